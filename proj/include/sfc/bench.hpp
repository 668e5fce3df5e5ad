#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "sfc/audit.hpp"
#include "sfc/classifier.hpp"
#include "sfc/flow.hpp"
#include "sfc/l2l3_plane.hpp"
#include "sfc/l4l7_plane.hpp"
#include "sfc/stats.hpp"

namespace sfc {

inline constexpr std::array<std::size_t, 6> kPacketSizes{64, 128, 256, 512, 1024, 1500};

// Generated packets: Ethernet + IPv4 + UDP, then the sequence number and the
// send timestamp, then seeded filler.
inline constexpr std::size_t kUdpPayloadOffset = kEthHeaderLen + 20 + 8;

struct PktgenConfig {
    std::size_t packet_size = 64;
    double offered_rate = 10000;  // packets per second
    std::chrono::milliseconds duration{5000};
    std::uint32_t payload_seed = 1;
    std::uint32_t flows = 1;

    /// Throws InvalidConfig for rates <= 0 or sizes outside kPacketSizes.
    void validate() const;
};

/// Builds generated packet `seq` of flow `flow` (deterministic filler).
std::vector<std::uint8_t> build_udp_packet(std::size_t size, const FlowKey& flow, std::uint64_t seq,
                                           std::uint32_t seed);
FlowKey pktgen_flow(std::uint32_t index);

struct CpuSample {
    std::string name;
    double cpu_seconds = 0;
    double fraction = 0;  // of one core over the interval
};

struct BenchReport {
    std::string name;
    double offered_rate = 0;
    std::uint64_t offered = 0;
    std::uint64_t delivered = 0;
    std::uint64_t dropped = 0;
    double elapsed_s = 0;
    double delivered_rate = 0;
    double loss_fraction = 0;
    LatencyStats latency;
    std::vector<CpuSample> cpu;
    std::string audit_summary;
    bool timed_out = false;

    std::string to_json() const;
};

/// Egress-side counterpart of the generator: reconciles sequence numbers and
/// measures latency from the embedded timestamps.
class DeliveryTracker {
public:
    PacketSink sink();
    void reset();
    std::uint64_t delivered() const noexcept { return delivered_.load(std::memory_order_relaxed); }
    std::uint64_t duplicates() const noexcept { return duplicates_.load(std::memory_order_relaxed); }
    std::uint64_t malformed() const noexcept { return malformed_.load(std::memory_order_relaxed); }
    std::vector<std::uint64_t> latencies() const;
    /// Samples every n-th latency only (bounded memory at high rates).
    void set_latency_stride(std::uint32_t n) noexcept { stride_ = n ? n : 1; }

private:
    mutable std::mutex mu_;
    std::vector<std::uint64_t> seen_words_;
    std::vector<std::uint64_t> latencies_;
    std::uint32_t stride_ = 1;
    std::atomic<std::uint64_t> delivered_{0};
    std::atomic<std::uint64_t> duplicates_{0};
    std::atomic<std::uint64_t> malformed_{0};
};

using PacketOffer = std::function<bool(std::span<const std::uint8_t>, const FlowKey&)>;

/// Paced open-loop packet source running in its own context.
class PacketGenerator {
public:
    PacketGenerator(PktgenConfig config, PacketOffer offer, LinkShaper* link = nullptr);
    ~PacketGenerator();

    void start();
    /// Blocks until the configured duration has been offered.
    void join();
    void stop();

    std::uint64_t offered() const noexcept { return offered_.load(std::memory_order_relaxed); }
    std::uint64_t accepted() const noexcept { return accepted_.load(std::memory_order_relaxed); }
    std::uint64_t link_dropped() const noexcept { return link_dropped_.load(std::memory_order_relaxed); }
    double elapsed_s() const noexcept { return elapsed_s_; }

private:
    void run();

    PktgenConfig config_;
    PacketOffer offer_;
    LinkShaper* link_;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> offered_{0}, accepted_{0}, link_dropped_{0};
    double elapsed_s_ = 0;
    std::thread thread_;
};

/// Offers `config` to a running plane whose sink is `tracker`, waits for the
/// plane to drain and reconciles offered against delivered. Throws
/// PlaneUnavailable when the plane is not running.
BenchReport pktgen_run(L2L3Plane& plane, DeliveryTracker& tracker, const PktgenConfig& config);

/// Loss observed when offering a given rate; implementations build whatever
/// they need per probe.
class LossProbe {
public:
    virtual ~LossProbe() = default;
    virtual std::uint64_t lost_at(double rate) = 0;
};

struct MlfrOptions {
    double rate_min = 1000;
    double rate_max = 1e6;
    double tolerance = 0.05;  // relative width of the final bracket
    std::uint32_t max_iterations = 64;

    /// Iteration bound: ceil(log2(rate_max / rate_min / tolerance)).
    std::uint32_t iteration_bound() const;
};

struct MlfrResult {
    double rate = 0;  // highest loss-free rate found
    double upper = 0;  // lowest lossy rate found (rate_max if none)
    std::uint32_t iterations = 0;
    std::vector<std::pair<double, std::uint64_t>> probes;  // (rate, lost)
};

/// Bisection in log space. Throws InvalidTolerance unless 0 < tolerance <
/// 0.5, InvalidConfig for a bad range, NeverLossFree when rate_min loses.
MlfrResult mlfr_search(LossProbe& probe, const MlfrOptions& options);

/// Fresh L2/L3 plane per probe, built by `make_plane` around the given sink.
class L2L3LossProbe final : public LossProbe {
public:
    using Factory = std::function<std::unique_ptr<L2L3Plane>(PacketSink)>;
    L2L3LossProbe(Factory make_plane, PktgenConfig base);
    std::uint64_t lost_at(double rate) override;
    const std::vector<BenchReport>& reports() const noexcept { return reports_; }

private:
    Factory make_plane_;
    PktgenConfig base_;
    std::vector<BenchReport> reports_;
};

/// A sink that forwards at most `capacity` packets per second of virtual
/// time. The configured capacity is the exact MLFR.
class RateLimitedSinkProbe final : public LossProbe {
public:
    RateLimitedSinkProbe(double capacity_pps, double duration_s) : capacity_(capacity_pps), duration_(duration_s) {}
    std::uint64_t lost_at(double rate) override;

private:
    double capacity_;
    double duration_;
};

struct HttpLoadConfig {
    SocketAddress target;
    unsigned concurrency = 1;
    std::chrono::milliseconds duration{5000};
    HttpRequest request;
    std::chrono::milliseconds timeout{5000};
    LinkShaper* link = nullptr;
    double link_cost = 1;  // link units per request
    double rate = 0;       // requests per second over all clients; 0 = unpaced

    /// Throws InvalidConfig unless 1 <= concurrency <= 512.
    void validate() const;
};

/// Keep-alive clients, one context each. Closed loop, or paced when a rate
/// is set.
class HttpLoadGenerator {
public:
    explicit HttpLoadGenerator(HttpLoadConfig config);
    ~HttpLoadGenerator();

    void start();
    void stop();
    std::uint64_t completed() const noexcept { return completed_.load(std::memory_order_relaxed); }
    std::uint64_t errors() const noexcept { return errors_.load(std::memory_order_relaxed); }
    bool timed_out() const noexcept { return timed_out_.load(std::memory_order_relaxed); }
    std::vector<std::uint64_t> latencies() const;

private:
    void client();

    HttpLoadConfig config_;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> completed_{0}, errors_{0};
    std::atomic<bool> timed_out_{false};
    mutable std::mutex mu_;
    std::vector<std::uint64_t> latencies_;
    std::vector<std::thread> threads_;
};

/// Runs the load for config.duration and reports RPS and latency.
BenchReport http_load(const HttpLoadConfig& config);

/// CPU time of one context. Throws UnsupportedPlatform.
double thread_cpu_seconds(std::thread::native_handle_type handle);

/// Per-context CPU fraction over `interval`.
std::vector<CpuSample> cpu_sample(const std::vector<ContextInfo>& contexts, std::chrono::milliseconds interval);

/// Sum of fractions.
double total_fraction(const std::vector<CpuSample>& samples);

struct DynamicAudit {
    std::shared_ptr<AuditLedger> ledger;
    std::vector<std::uint64_t> trace_ids;
    VerificationReport report;
};

/// Closed-loop audited run of `traces` packets (alpha, beta) or requests
/// (gamma, delta) through a chain of `chain_len` functions; each trace leaves
/// the plane before the next one enters. Throws UnknownModel for models with
/// no runtime pipeline.
DynamicAudit dynamic_audit(ModelId model, std::size_t traces, std::uint32_t chain_len = 2,
                           const std::string& prefix = "audit");

struct UnifiedConfig {
    double link_rate = 40000;     // link units per second (one unit = 64 bytes)
    double l2l3_offered = 60000;  // packets per second
    unsigned http_concurrency = 4;
    double l4l7_share = 0.4;  // fraction of the link the L4/L7 load asks for
    std::size_t http_body_bytes = 1024;
    std::chrono::milliseconds duration{30000};
    std::chrono::milliseconds step_at{10000};
    std::chrono::milliseconds sample_interval{1000};
    std::size_t audit_traces = 200;
    std::string prefix = "unified";
};

struct UnifiedReport {
    std::vector<double> t;          // seconds since start, end of each interval
    std::vector<double> l2l3_pps;
    std::vector<double> l4l7_rps;
    std::vector<double> l4l7_units;  // rps times link units per request
    std::vector<double> aggregate;   // l2l3_pps + l4l7_units
    double units_per_request = 0;
    double solo_plateau = 0;     // mean L2/L3 rate before the step
    double l2l3_after = 0;       // means after the step settles
    double l4l7_after = 0;
    double aggregate_after = 0;
    double aggregate_ratio = 0;  // aggregate_after / solo_plateau
    CostVector l2l3_solo, l2l3_shared, l4l7_solo, l4l7_shared;
    bool audit_unchanged = false;

    std::string to_json() const;
    std::string to_tsv() const;
};

/// Both planes behind one classifier and one shaped link. L2/L3 traffic runs
/// the whole time; the L4/L7 load starts at step_at. Before the timeline,
/// each plane is audited closed-loop alone and again while the other plane
/// carries load.
UnifiedReport unified_run(const UnifiedConfig& config);

}  // namespace sfc
