#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "sfc/audit.hpp"
#include "sfc/event_transport.hpp"
#include "sfc/functions.hpp"
#include "sfc/http.hpp"
#include "sfc/l2l3_plane.hpp"
#include "sfc/ring_transport.hpp"
#include "sfc/routing.hpp"
#include "sfc/shm_pool.hpp"

namespace sfc {

struct SocketAddress {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    /// "host:port"; throws InvalidConfig.
    static SocketAddress parse(std::string_view text);
    std::string str() const;
    friend bool operator==(const SocketAddress&, const SocketAddress&) = default;
};

/// Blocking connect with TCP_NODELAY. Returns -1 on failure.
int connect_tcp(const SocketAddress& addr);

struct BrokerConfig {
    SocketAddress listen;
    std::vector<SocketAddress> upstreams;
    PlaneMode mode = PlaneMode::Event;
    BatchPolicy batch;
    PoolConfig pool{.frame_count = 1024, .frame_size = 16384, .domain_prefix = "l4l7"};
    std::size_t ring_capacity = kDefaultRingCapacity;
    std::size_t inbox_capacity = kDefaultInboxCapacity;
    Verdict filter_default = Verdict::Deny;
    AuditLedger* ledger = nullptr;
    bool record_latency = true;

    /// Throws InvalidConfig when no upstream is configured.
    void validate() const;
};

/// Response traces carry this bit; request traces never do.
inline constexpr std::uint64_t kResponseTraceBit = 1ULL << 63;

/// Per-message host-stack costs charged by the broker. Ingress: the stack's
/// receive interrupt and socket wakeup, the read syscall, the stack-to-broker
/// copy, the broker-to-frame copy, one protocol pass and one parse. Egress:
/// frame-to-buffer and buffer-to-stack copies, the write syscall, the
/// transmit interrupt, one protocol pass and one serialization.
CostVector broker_ingress_cost();
CostVector broker_egress_cost();

struct LatencyRecord {
    std::uint64_t trace_id = 0;
    std::uint64_t t_ingress_ns = 0;
    std::uint64_t t_egress_ns = 0;
    PlaneMode mode = PlaneMode::Event;
};

struct BrokerCounters {
    std::uint64_t connections = 0;
    std::uint64_t requests = 0;   // parsed and stored in a frame
    std::uint64_t egressed = 0;   // written to an upstream
    std::uint64_t responses = 0;  // upstream responses relayed to clients
    std::uint64_t error_responses = 0;
    std::uint64_t parse_errors = 0;
    std::uint64_t upstream_errors = 0;
    std::uint64_t stalls = 0;  // reads deferred because the pool was empty
    std::uint64_t forwarded = 0;
    std::uint64_t dropped_filter = 0;
    std::uint64_t dropped_handler = 0;
    std::uint64_t dropped_ring = 0;
    std::uint64_t dropped_route = 0;
};

/// The message broker: terminates client TCP connections, moves each HTTP
/// request into a shared frame, runs it through the middlebox chain and
/// writes it to the upstream chosen by the chain (or round robin when no
/// function chose). Upstream responses are relayed back to the client by the
/// broker without traversing the chain.
///
/// Polling mode runs an RX-poll context (network I/O plus routing) and a
/// TX-poll context (upstream writes); functions spin on ring pairs.
/// Event mode runs a network context blocked in epoll, a router context
/// blocked on its endpoint that also performs egress, and one blocking
/// context per function. Chain hops go through the router in both modes.
class Broker {
public:
    explicit Broker(BrokerConfig config);
    ~Broker();
    Broker(const Broker&) = delete;
    Broker& operator=(const Broker&) = delete;

    void set_mode(PlaneMode mode);
    PlaneMode mode() const noexcept { return config_.mode; }
    void register_mf(FnId id, std::unique_ptr<Handler> handler);
    void set_route(FnId from, FnId to);
    void set_filter(FnId src, FnId dst, Verdict v);

    /// Binds the listener and launches the contexts. Throws IoError.
    void start();
    void stop();
    bool running() const noexcept { return started_; }
    /// Bound listen address (the real port when 0 was requested).
    SocketAddress address() const;

    /// Waits until no request is in flight and, in event mode, every
    /// chain context is parked.
    bool wait_quiescent(std::chrono::milliseconds timeout);

    BrokerCounters counters() const;
    std::size_t in_flight() const;
    std::vector<LatencyRecord> latency_records() const;
    std::vector<ContextInfo> contexts() const;
    const PoolHandle& pool() const noexcept { return pool_; }
    std::uint64_t processed_by(FnId id) const;
    std::size_t upstream_count() const noexcept { return config_.upstreams.size(); }

private:
    struct Mf;
    struct ClientConn;
    struct UpstreamConn;
    struct Task;
    struct Counters;
    struct Pending {
        std::uint64_t conn = 0;
        std::uint64_t t_ingress = 0;
    };

    Mf* find_mf(FnId id) const;
    void check_not_started() const;

    // Network context.
    void net_loop();
    void accept_all();
    void on_client_readable(std::uint64_t id);
    void try_ingest(std::uint64_t id);
    void on_upstream_readable(std::uint64_t id);
    bool relay_response(UpstreamConn& u);
    void run_tasks();
    void respond_error(std::uint64_t conn, int status, std::string_view reason);
    void close_client(std::uint64_t id);
    void close_upstream(std::uint64_t id, bool reusable);
    void post(Task t);

    // Chain.
    void dispatch(PacketDescriptor d);
    bool route_one(PacketDescriptor d);
    std::size_t route_step();
    void polling_mf_loop(Mf& mf);
    void tx_poll_loop();
    void event_forward(PacketDescriptor d);
    void router_loop();
    void event_mf_loop(Mf& mf);
    void drop(const PacketDescriptor& d, std::atomic<std::uint64_t>& reason, bool free_frame = true);
    void count_send_failure(const PacketDescriptor& d, SendStatus s);

    // Egress.
    void egress(const PacketDescriptor& d);
    int acquire_upstream(std::size_t backend);
    int connect_upstream(std::size_t backend);

    BrokerConfig config_;
    PoolHandle pool_;
    AuditLedger* ledger_;
    RoutingTable routes_;
    std::shared_ptr<FilterTable> filter_;
    std::vector<std::unique_ptr<Mf>> mfs_;
    std::map<FnId, Mf*> mf_index_;

    int listen_fd_ = -1;
    int epoll_fd_ = -1;
    int control_fd_ = -1;
    SocketAddress bound_;

    // Owned by the network context.
    std::unordered_map<std::uint64_t, std::unique_ptr<ClientConn>> clients_;
    std::unordered_map<std::uint64_t, std::unique_ptr<UpstreamConn>> upstream_conns_;
    std::vector<std::uint64_t> stalled_;
    std::uint64_t next_conn_ = 1;

    mutable std::mutex task_mu_;
    std::vector<Task> tasks_;

    mutable std::mutex pending_mu_;
    std::unordered_map<std::uint64_t, Pending> pending_;
    std::atomic<std::uint64_t> next_trace_{1};

    mutable std::mutex idle_mu_;
    std::vector<std::vector<int>> idle_upstreams_;
    std::atomic<std::uint64_t> rr_{0};

    mutable std::mutex latency_mu_;
    std::vector<LatencyRecord> latency_;

    // Polling transports.
    std::unique_ptr<DescriptorRing> egress_ring_;
    // Event transports.
    std::unique_ptr<SocketMap> sockets_;
    std::shared_ptr<EventEndpoint> router_ep_;

    std::atomic<bool> started_{false};
    std::atomic<bool> stopping_{false};
    std::vector<std::pair<std::string, std::thread>> threads_;
    std::unique_ptr<Counters> c_;
};

/// Blocking keep-alive HTTP/1.1 client connection.
class HttpConnection {
public:
    /// Throws IoError when the connection cannot be established.
    explicit HttpConnection(const SocketAddress& addr);
    ~HttpConnection();
    HttpConnection(const HttpConnection&) = delete;
    HttpConnection& operator=(const HttpConnection&) = delete;

    /// Throws Timeout, IoError (connection lost) or ParseError.
    HttpResponse roundtrip(const HttpRequest& req, std::chrono::milliseconds timeout = std::chrono::seconds(5));
    /// Sends raw bytes and waits for the peer to answer or close. Returns the
    /// bytes received.
    std::string exchange_raw(std::string_view bytes, std::chrono::milliseconds timeout);

private:
    int fd_ = -1;
    std::string buf_;
};

/// One request on a fresh connection.
HttpResponse http_roundtrip(const SocketAddress& addr, const HttpRequest& req,
                            std::chrono::milliseconds timeout = std::chrono::seconds(5));

}  // namespace sfc
