#include "sfc/routing.hpp"

#include <mutex>

#include "sfc/error.hpp"

namespace sfc {

void FilterTable::set(FnId src, FnId dst, Verdict v) {
    std::unique_lock lock(mu_);
    rules_[{src, dst}] = v;
}

void FilterTable::clear() {
    std::unique_lock lock(mu_);
    rules_.clear();
}

Verdict FilterTable::lookup(FnId src, FnId dst) const {
    std::shared_lock lock(mu_);
    auto it = rules_.find({src, dst});
    return it == rules_.end() ? default_ : it->second;
}

std::vector<std::pair<std::pair<FnId, FnId>, Verdict>> FilterTable::rules() const {
    std::shared_lock lock(mu_);
    return {rules_.begin(), rules_.end()};
}

void RoutingTable::add_function(FnId fn) {
    if (fn.is_infrastructure()) throw Error(Errc::InvalidConfig, "reserved function id " + fn.str());
    std::unique_lock lock(mu_);
    if (!functions_.insert(fn).second) throw Error(Errc::DuplicateFunction, fn.str());
}

bool RoutingTable::has_function(FnId fn) const {
    std::shared_lock lock(mu_);
    return functions_.contains(fn);
}

void RoutingTable::set_route(FnId from, FnId to) {
    std::unique_lock lock(mu_);
    if (from != kIngress && !functions_.contains(from)) throw Error(Errc::UnknownFunction, from.str());
    if (to != kEgress && !functions_.contains(to)) throw Error(Errc::UnknownFunction, to.str());
    if (from == to) throw Error(Errc::CycleDetected, from.str() + " -> " + to.str());
    // Following the existing routes from `to` must not lead back to `from`.
    FnId cur = to;
    for (std::size_t guard = 0; guard <= next_.size(); ++guard) {
        auto it = next_.find(cur);
        if (it == next_.end() || it->first == from) break;
        cur = it->second;
        if (cur == from) throw Error(Errc::CycleDetected, from.str() + " -> " + to.str());
    }
    next_[from] = to;
}

std::optional<FnId> RoutingTable::next(FnId from) const {
    std::shared_lock lock(mu_);
    auto it = next_.find(from);
    if (it == next_.end()) return std::nullopt;
    return it->second;
}

void RoutingTable::clear_routes() {
    std::unique_lock lock(mu_);
    next_.clear();
}

std::vector<FnId> RoutingTable::chain() const {
    std::shared_lock lock(mu_);
    std::vector<FnId> out;
    FnId cur = kIngress;
    while (out.size() <= functions_.size()) {
        auto it = next_.find(cur);
        if (it == next_.end() || it->second == kEgress) break;
        cur = it->second;
        out.push_back(cur);
    }
    return out;
}

std::map<FnId, FnId> RoutingTable::routes() const {
    std::shared_lock lock(mu_);
    return next_;
}

}  // namespace sfc
