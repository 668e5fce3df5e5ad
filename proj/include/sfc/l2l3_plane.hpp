#pragma once

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sfc/audit.hpp"
#include "sfc/event_transport.hpp"
#include "sfc/functions.hpp"
#include "sfc/ring_transport.hpp"
#include "sfc/routing.hpp"
#include "sfc/shm_pool.hpp"

namespace sfc {

enum class PlaneMode : std::uint8_t { Polling, Event };

std::string_view to_string(PlaneMode m) noexcept;
PlaneMode parse_mode(std::string_view text);

/// Receives transmitted packets. The span aliases shared memory and is only
/// valid during the call. Returning false reports the sink as unavailable.
using PacketSink = std::function<bool(const PacketDescriptor&, std::span<const std::uint8_t>)>;

struct L2L3Config {
    PoolConfig pool{.frame_count = 4096, .frame_size = 2048, .domain_prefix = "l2l3"};
    PlaneMode mode = PlaneMode::Polling;
    std::size_t ring_capacity = kDefaultRingCapacity;
    std::size_t inbox_capacity = kDefaultInboxCapacity;
    BatchPolicy batch;
    /// Polling contexts burst-dequeue up to this many descriptors per pass.
    std::size_t burst = 32;
    Verdict filter_default = Verdict::Deny;
    AuditLedger* ledger = nullptr;
};

enum class IngressStatus : std::uint8_t { Ok, DroppedPoolExhausted, DroppedRingFull, DroppedTooLarge, NotRunning };

/// Counters are cumulative. `offered` counts every ingress call; packets
/// refused before a frame was written count as dropped_pool or
/// dropped_oversize, everything else as ingressed. At any time
///   offered = egressed + dropped() + in_flight.
struct PlaneCounters {
    std::uint64_t offered = 0;
    std::uint64_t ingressed = 0;
    std::uint64_t egressed = 0;
    std::uint64_t forwarded = 0;
    std::uint64_t drained = 0;  // descriptors taken off function TX paths
    std::uint64_t dropped_pool = 0;
    std::uint64_t dropped_ring = 0;
    std::uint64_t dropped_filter = 0;
    std::uint64_t dropped_handler = 0;
    std::uint64_t dropped_sink = 0;
    std::uint64_t dropped_route = 0;
    std::uint64_t dropped_oversize = 0;
    std::uint64_t dma_writes = 0;

    std::uint64_t dropped() const noexcept {
        return dropped_pool + dropped_oversize + dropped_ring + dropped_filter + dropped_handler + dropped_sink +
               dropped_route;
    }
};

/// Named execution context, exposed for CPU sampling.
struct ContextInfo {
    std::string name;
    std::thread::native_handle_type handle;
};

/// The NF manager: emulated DMA ingress into the shared pool, centralized
/// routing between per-function transports, filtering, and egress.
///
/// Polling mode: the manager owns a NIC RX ring, one RX/TX ring pair per
/// function and an egress ring. A router context is the only producer of
/// every function RX ring and of the egress ring; a NIC context drains the
/// egress ring to the sink. Functions spin on their RX rings.
///
/// Event mode: ingress takes frames from the Fill ring and raises a
/// kernel-side redirect context, which fills the XSK RX ring and wakes the
/// manager RX context. Chain hops go through a SocketMap. The router context
/// transmits inline on egress and posts to the Completion ring; a
/// coordinator context recycles Completion into Fill.
class L2L3Plane {
public:
    explicit L2L3Plane(L2L3Config config);
    ~L2L3Plane();
    L2L3Plane(const L2L3Plane&) = delete;
    L2L3Plane& operator=(const L2L3Plane&) = delete;

    /// Throws ModeChangeAfterStart once started.
    void set_mode(PlaneMode mode);
    PlaneMode mode() const noexcept { return config_.mode; }

    /// Throws DuplicateFunction; registration closes at start().
    void register_nf(FnId id, std::unique_ptr<Handler> handler);
    void set_route(FnId from, FnId to);
    void clear_routes();
    void set_filter(FnId src, FnId dst, Verdict v);
    void set_sink(PacketSink sink);

    /// Launches the plane's contexts (threaded) or only freezes the
    /// configuration for manual stepping (polling mode only).
    void start(bool threaded = true);
    void stop();
    bool running() const noexcept { return started_; }

    /// Emulated NIC receive: the payload is written once into a shared frame
    /// (the DMA) and handed to the chain. Must be called from a single
    /// context at a time.
    IngressStatus ingress(std::span<const std::uint8_t> packet, const std::optional<FlowKey>& flow = std::nullopt,
                          std::uint64_t trace_id = 0, HairpinLabel origin = 0);

    // Manual stepping, polling mode without threads.
    std::size_t route_step();
    std::size_t nf_step(FnId id);
    std::size_t egress_step();
    /// Runs all steps until no descriptor moves.
    void drain();

    /// Waits until every descriptor ingressed so far has left the plane and
    /// all event-mode contexts are parked. Returns false on timeout.
    bool wait_quiescent(std::chrono::milliseconds timeout);

    PlaneCounters counters() const;
    const PoolHandle& pool() const noexcept { return pool_; }
    const RoutingTable& routes() const noexcept { return routes_; }
    const std::shared_ptr<FilterTable>& filter() const noexcept { return filter_; }
    std::vector<ContextInfo> contexts() const;
    std::uint64_t in_flight() const noexcept;
    /// Number of descriptors the given function's handler has processed.
    std::uint64_t processed_by(FnId id) const;

private:
    struct Nf;
    struct Counters {
        std::atomic<std::uint64_t> offered{0}, ingressed{0}, egressed{0}, forwarded{0}, drained{0};
        std::atomic<std::uint64_t> dropped_pool{0}, dropped_ring{0}, dropped_filter{0}, dropped_handler{0},
            dropped_sink{0}, dropped_route{0}, dropped_oversize{0}, dma_writes{0};
    };

    Nf* find_nf(FnId id) const;
    void release(const PacketDescriptor& d, std::atomic<std::uint64_t>& reason);
    void finish(const PacketDescriptor& d);
    bool transmit(const PacketDescriptor& d);
    void check_started_for_config() const;

    // Polling mode.
    bool route_one(PacketDescriptor d);
    void polling_nf_loop(Nf& nf);
    // Event mode.
    IngressStatus event_ingress(PacketDescriptor d, std::span<const std::uint8_t> packet);
    void kernel_loop();
    void manager_rx_loop();
    void router_loop();
    void coordinator_loop();
    void event_nf_loop(Nf& nf);
    void event_forward(PacketDescriptor d);
    void event_egress(const PacketDescriptor& d);
    void count_send_failure(SendStatus s);
    void replenish_fill();
    void free_leftovers();

    L2L3Config config_;
    PoolHandle pool_;
    AuditLedger* ledger_;
    RoutingTable routes_;
    std::shared_ptr<FilterTable> filter_;
    PacketSink sink_;
    std::vector<std::unique_ptr<Nf>> nfs_;
    std::map<FnId, Nf*> nf_index_;

    // Polling transports.
    std::unique_ptr<DescriptorRing> nic_rx_;
    std::unique_ptr<DescriptorRing> egress_ring_;
    std::optional<PacketDescriptor> sink_retry_;

    // Event transports.
    std::unique_ptr<XskRingSet> xsk_;
    std::unique_ptr<SocketMap> sockets_;
    std::shared_ptr<EventEndpoint> kernel_ep_;
    std::shared_ptr<EventEndpoint> router_ep_;
    std::unique_ptr<WakeLatch> rx_latch_;
    std::unique_ptr<WakeLatch> completion_latch_;
    std::atomic<bool> fill_low_{false};

    std::atomic<bool> started_{false};
    std::atomic<bool> stopping_{false};
    bool threaded_ = false;
    std::vector<std::pair<std::string, std::thread>> threads_;
    Counters c_;
    std::uint64_t next_trace_ = 1;
};

}  // namespace sfc
