#pragma once

#include <map>
#include <optional>
#include <set>
#include <shared_mutex>
#include <utility>
#include <vector>

#include "sfc/descriptor.hpp"

namespace sfc {

enum class Verdict : std::uint8_t { Deny, Allow };

/// (src, dst) authorization map consulted before a descriptor is handed to
/// its destination. Lookups are total: anything not listed gets the default.
class FilterTable {
public:
    explicit FilterTable(Verdict default_verdict = Verdict::Deny) : default_(default_verdict) {}

    void set(FnId src, FnId dst, Verdict v);
    void clear();
    Verdict lookup(FnId src, FnId dst) const;
    /// Hops that touch an infrastructure endpoint (ingress, manager, egress)
    /// are never filtered; only function-to-function transfers are.
    bool allows(FnId src, FnId dst) const {
        return src.is_infrastructure() || dst.is_infrastructure() || lookup(src, dst) == Verdict::Allow;
    }
    Verdict default_verdict() const noexcept { return default_; }
    std::vector<std::pair<std::pair<FnId, FnId>, Verdict>> rules() const;

private:
    mutable std::shared_mutex mu_;
    std::map<std::pair<FnId, FnId>, Verdict> rules_;
    Verdict default_;
};

/// Next-hop table owned by the manager: each function maps to the function
/// that follows it, or to kEgress. kIngress names the chain entry.
class RoutingTable {
public:
    void add_function(FnId fn);
    bool has_function(FnId fn) const;

    /// Throws UnknownFunction for unregistered endpoints and CycleDetected
    /// when the new edge would close a loop. On error the table is unchanged.
    void set_route(FnId from, FnId to);
    std::optional<FnId> next(FnId from) const;
    void clear_routes();
    /// Functions in traversal order starting at kIngress.
    std::vector<FnId> chain() const;
    std::map<FnId, FnId> routes() const;

private:
    mutable std::shared_mutex mu_;
    std::set<FnId> functions_;
    std::map<FnId, FnId> next_;
};

}  // namespace sfc
