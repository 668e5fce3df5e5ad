#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sfc/audit.hpp"
#include "sfc/flow.hpp"
#include "sfc/l2l3_plane.hpp"
#include "sfc/l4l7_plane.hpp"

namespace sfc {

enum class PlaneTarget : std::uint8_t { L2L3, L4L7 };

std::string_view to_string(PlaneTarget t) noexcept;
PlaneTarget parse_target(std::string_view text);

/// IPv4 prefix match; length 0 matches every address.
struct Ipv4Prefix {
    Ipv4 addr;
    std::uint8_t length = 0;

    /// "a.b.c.d", "a.b.c.d/len" or "*".
    static Ipv4Prefix parse(std::string_view text);
    bool matches(Ipv4 ip) const noexcept;
    std::string str() const;
};

/// 5-tuple pattern; unset fields are wildcards.
struct FlowPattern {
    Ipv4Prefix src_ip;
    Ipv4Prefix dst_ip;
    std::optional<std::uint16_t> src_port;
    std::optional<std::uint16_t> dst_port;
    std::optional<Protocol> protocol;

    bool matches(const FlowKey& k) const noexcept;
    std::string str() const;
};

/// Lower priority values are consulted first. `hairpin` labels the side the
/// flow entered from; return traffic is steered back to it.
struct BifurcationRule {
    FlowPattern match;
    PlaneTarget target = PlaneTarget::L4L7;
    std::int32_t priority = 0;
    HairpinLabel hairpin = 0;
};

/// Rule table of the flow-bifurcation classifier. Updates are serialized
/// against classification; classify() may be called from any context.
class ClassifierTable {
public:
    static constexpr PlaneTarget kDefaultTarget = PlaneTarget::L4L7;

    /// Throws DuplicatePriority.
    void add_rule(const BifurcationRule& rule);
    bool remove_rule(std::int32_t priority);
    void clear();

    /// Target of the first matching rule in priority order, else L4L7.
    PlaneTarget classify(const FlowKey& key) const;
    std::optional<BifurcationRule> match(const FlowKey& key) const;
    std::vector<BifurcationRule> rules() const;

private:
    mutable std::shared_mutex mu_;
    std::map<std::int32_t, BifurcationRule> rules_;
};

/// Token bucket standing in for the shared physical link both planes sit
/// behind. Units are caller-defined (bytes or messages).
class LinkShaper {
public:
    /// Throws InvalidConfig unless rate > 0 and burst >= 1.
    LinkShaper(double rate_per_s, double burst);

    /// Takes `n` units if available now.
    bool try_consume(double n);
    /// Reserves `n` units and waits until they are paid for; returns false
    /// without reserving if that would exceed `max_wait`.
    bool consume(double n, std::chrono::nanoseconds max_wait = std::chrono::seconds(1));
    double rate() const noexcept { return rate_; }

    /// Deterministic form for virtual-time use: `now_s` must not decrease.
    bool try_consume_at(double n, double now_s);

private:
    void refill_locked(double now_s);

    std::mutex mu_;
    double rate_;
    double burst_;
    double tokens_;
    double last_s_ = -1;
};

/// Loopback bridge for flows that go L2/L3 first and then need the host
/// stack and the L4/L7 plane: an L2/L3 egress sink that writes the packet's
/// payload into a TCP connection to the broker listener. Each handoff is
/// audited at kStepHandoff as one copy (into the socket), two interrupts
/// (loopback transmit and receive) and one context switch (the send).
class HandoffAdapter {
public:
    /// `payload_offset` skips the L2/L3 headers in front of the HTTP bytes.
    /// Throws IoError when the broker is unreachable.
    HandoffAdapter(const SocketAddress& broker, std::size_t payload_offset, AuditLedger* ledger = nullptr);
    ~HandoffAdapter();
    HandoffAdapter(const HandoffAdapter&) = delete;
    HandoffAdapter& operator=(const HandoffAdapter&) = delete;

    PacketSink sink();
    bool handoff(const PacketDescriptor& d, std::span<const std::uint8_t> packet);

    std::uint64_t handed_off() const noexcept { return handed_.load(std::memory_order_relaxed); }
    std::uint64_t responses() const noexcept { return responses_.load(std::memory_order_relaxed); }
    /// Waits until every handed-off request has been answered.
    bool wait_responses(std::uint64_t n, std::chrono::milliseconds timeout) const;

    static CostVector handoff_cost();

private:
    void reader();

    int fd_ = -1;
    std::size_t offset_;
    AuditLedger* ledger_;
    std::atomic<std::uint64_t> handed_{0};
    std::atomic<std::uint64_t> responses_{0};
    std::atomic<bool> stopping_{false};
    std::thread reader_;
};

/// Side-indexed egress: descriptors leave through the sink registered for
/// their origin label, so each plane's traffic returns to where it came
/// from.
class HairpinRouter {
public:
    void set_side(HairpinLabel label, PacketSink sink);
    PacketSink sink();
    std::uint64_t unrouted() const noexcept { return unrouted_.load(std::memory_order_relaxed); }

private:
    mutable std::shared_mutex mu_;
    std::map<HairpinLabel, PacketSink> sides_;
    std::atomic<std::uint64_t> unrouted_{0};
};

enum class DispatchStatus : std::uint8_t { ToL2L3, ToL4L7, Dropped };

/// Ingress point of the unified design: classifies each packet by 5-tuple
/// and hands it to the chosen plane. Packets classified L4/L7 are raw HTTP
/// payload and go to the broker through the host stack (a TCP connection),
/// as in the bifurcated NIC where the kernel owns that virtual function.
class Dispatcher {
public:
    Dispatcher(std::shared_ptr<ClassifierTable> table, L2L3Plane* l2l3, Broker* l4l7);
    ~Dispatcher();

    /// Throws PlaneUnavailable when the chosen plane is absent or stopped.
    DispatchStatus dispatch(std::span<const std::uint8_t> packet, const FlowKey& key, std::uint64_t trace_id = 0);
    /// Plane a new connection with this 5-tuple belongs to; for L4/L7 the
    /// broker address to connect to. Throws PlaneUnavailable.
    std::optional<SocketAddress> connection_target(const FlowKey& key) const;

    std::uint64_t to_l2l3() const noexcept { return to_l2l3_.load(std::memory_order_relaxed); }
    std::uint64_t to_l4l7() const noexcept { return to_l4l7_.load(std::memory_order_relaxed); }
    const std::shared_ptr<ClassifierTable>& table() const noexcept { return table_; }

private:
    std::shared_ptr<ClassifierTable> table_;
    L2L3Plane* l2l3_;
    Broker* l4l7_;
    std::mutex conn_mu_;
    std::unique_ptr<HttpConnection> l4l7_conn_;
    std::atomic<std::uint64_t> to_l2l3_{0};
    std::atomic<std::uint64_t> to_l4l7_{0};
};

}  // namespace sfc
