#include "sfc/bench.hpp"

#include <pthread.h>
#include <time.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <sstream>

#include "json.hpp"
#include "sfc/error.hpp"
#include "sfc/functions.hpp"
#include "sfc/upstream.hpp"

namespace sfc {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::size_t kSeqOffset = kUdpPayloadOffset;
constexpr std::size_t kStampOffset = kUdpPayloadOffset + 8;

void put_be16(std::uint8_t* p, std::uint16_t v) {
    p[0] = static_cast<std::uint8_t>(v >> 8);
    p[1] = static_cast<std::uint8_t>(v);
}

void put_be32(std::uint8_t* p, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) p[i] = static_cast<std::uint8_t>(v >> (24 - 8 * i));
}

void put_u64(std::uint8_t* p, std::uint64_t v) { std::memcpy(p, &v, 8); }

std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return v;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

nlohmann::json latency_json(const LatencyStats& s) {
    return {{"samples", s.samples}, {"median_ns", s.median_ns}, {"p95_ns", s.p95_ns},
            {"p99_ns", s.p99_ns},   {"mean_ns", s.mean_ns},     {"max_ns", s.max_ns}};
}

nlohmann::json cost_json(const CostVector& v) {
    nlohmann::json j;
    for (auto c : kAllCategories) j[std::string(to_string(c))] = v[c];
    return j;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    to = std::min(to, v.size());
    if (from >= to) return 0;
    double s = 0;
    for (std::size_t i = from; i < to; ++i) s += v[i];
    return s / static_cast<double>(to - from);
}

}  // namespace

void PktgenConfig::validate() const {
    if (std::find(kPacketSizes.begin(), kPacketSizes.end(), packet_size) == kPacketSizes.end())
        throw Error(Errc::InvalidConfig, "packet size " + std::to_string(packet_size) + " is not a generator size");
    if (!(offered_rate > 0)) throw Error(Errc::InvalidConfig, "offered rate must be positive");
    if (duration.count() <= 0) throw Error(Errc::InvalidConfig, "duration must be positive");
    if (flows == 0) throw Error(Errc::InvalidConfig, "at least one flow");
}

FlowKey pktgen_flow(std::uint32_t index) {
    FlowKey k;
    k.src_ip = Ipv4::parse("10.0.0.1");
    k.dst_ip = Ipv4::parse("10.0.0.5");
    k.src_port = static_cast<std::uint16_t>(10000 + index % 50000);
    k.dst_port = 9;
    k.protocol = Protocol::Udp;
    return k;
}

std::vector<std::uint8_t> build_udp_packet(std::size_t size, const FlowKey& flow, std::uint64_t seq,
                                           std::uint32_t seed) {
    if (size < kStampOffset + 8) throw Error(Errc::InvalidConfig, "packet too small for the generator payload");
    std::vector<std::uint8_t> p(size);
    std::mt19937 rng(seed);
    for (std::size_t i = kStampOffset + 8; i < size; ++i) p[i] = static_cast<std::uint8_t>(rng());
    // Ethernet: locally administered addresses, IPv4 ethertype.
    const std::uint8_t dst_mac[6]{0x02, 0, 0, 0, 0, 0x02};
    const std::uint8_t src_mac[6]{0x02, 0, 0, 0, 0, 0x01};
    std::memcpy(p.data(), dst_mac, 6);
    std::memcpy(p.data() + 6, src_mac, 6);
    put_be16(p.data() + 12, 0x0800);
    std::uint8_t* ip = p.data() + kEthHeaderLen;
    ip[0] = 0x45;
    put_be16(ip + 2, static_cast<std::uint16_t>(size - kEthHeaderLen));
    ip[8] = 64;
    ip[9] = static_cast<std::uint8_t>(flow.protocol);
    put_be32(ip + 12, flow.src_ip.value);
    put_be32(ip + 16, flow.dst_ip.value);
    put_be16(ip + 10, internet_checksum(std::span<const std::uint8_t>(ip, 20)));
    std::uint8_t* udp = ip + 20;
    put_be16(udp, flow.src_port);
    put_be16(udp + 2, flow.dst_port);
    put_be16(udp + 4, static_cast<std::uint16_t>(size - kEthHeaderLen - 20));
    put_u64(p.data() + kSeqOffset, seq);
    put_u64(p.data() + kStampOffset, now_ns());
    return p;
}

std::string BenchReport::to_json() const {
    nlohmann::json j{{"name", name},
                     {"offered_rate", offered_rate},
                     {"offered", offered},
                     {"delivered", delivered},
                     {"dropped", dropped},
                     {"elapsed_s", elapsed_s},
                     {"delivered_rate", delivered_rate},
                     {"loss_fraction", loss_fraction},
                     {"latency", latency_json(latency)},
                     {"timed_out", timed_out}};
    auto& cpu_j = j["cpu"] = nlohmann::json::array();
    for (const auto& c : cpu) cpu_j.push_back({{"context", c.name}, {"cpu_seconds", c.cpu_seconds}, {"fraction", c.fraction}});
    if (!audit_summary.empty()) j["audit"] = audit_summary;
    return j.dump(2);
}

// ---------------------------------------------------------------------------

PacketSink DeliveryTracker::sink() {
    return [this](const PacketDescriptor&, std::span<const std::uint8_t> bytes) {
        if (bytes.size() < kStampOffset + 8) {
            malformed_.fetch_add(1, std::memory_order_relaxed);
            return true;
        }
        const std::uint64_t seq = get_u64(bytes.data() + kSeqOffset);
        const std::uint64_t stamp = get_u64(bytes.data() + kStampOffset);
        const std::uint64_t now = now_ns();
        std::lock_guard lock(mu_);
        const std::size_t word = seq / 64;
        if (word >= seen_words_.size()) seen_words_.resize(std::max(word + 1, seen_words_.size() * 2));
        const std::uint64_t bit = 1ULL << (seq % 64);
        if (seen_words_[word] & bit) {
            duplicates_.fetch_add(1, std::memory_order_relaxed);
            return true;
        }
        seen_words_[word] |= bit;
        const auto n = delivered_.fetch_add(1, std::memory_order_relaxed);
        if (n % stride_ == 0 && now >= stamp) latencies_.push_back(now - stamp);
        return true;
    };
}

void DeliveryTracker::reset() {
    std::lock_guard lock(mu_);
    seen_words_.clear();
    latencies_.clear();
    delivered_ = 0;
    duplicates_ = 0;
    malformed_ = 0;
}

std::vector<std::uint64_t> DeliveryTracker::latencies() const {
    std::lock_guard lock(mu_);
    return latencies_;
}

// ---------------------------------------------------------------------------

PacketGenerator::PacketGenerator(PktgenConfig config, PacketOffer offer, LinkShaper* link)
    : config_(std::move(config)), offer_(std::move(offer)), link_(link) {
    config_.validate();
}

PacketGenerator::~PacketGenerator() { stop(); }

void PacketGenerator::start() {
    if (thread_.joinable()) return;
    stopping_ = false;
    thread_ = std::thread([this] { run(); });
}

void PacketGenerator::join() {
    if (thread_.joinable()) thread_.join();
}

void PacketGenerator::stop() {
    stopping_ = true;
    join();
}

void PacketGenerator::run() {
    std::vector<std::vector<std::uint8_t>> templates;
    std::vector<FlowKey> flows;
    for (std::uint32_t f = 0; f < config_.flows; ++f) {
        flows.push_back(pktgen_flow(f));
        templates.push_back(build_udp_packet(config_.packet_size, flows.back(), 0, config_.payload_seed + f));
    }
    const double duration_s = std::chrono::duration<double>(config_.duration).count();
    const auto total = static_cast<std::uint64_t>(config_.offered_rate * duration_s);
    const auto t0 = Clock::now();
    std::uint64_t seq = 0;
    while (seq < total && !stopping_.load(std::memory_order_relaxed)) {
        const double elapsed = seconds_since(t0);
        // Everything is due at the deadline; a generator that falls far
        // behind gives up at twice the duration.
        if (elapsed >= 2 * duration_s) break;
        const auto due = elapsed >= duration_s
                             ? total
                             : std::min(total, static_cast<std::uint64_t>(elapsed * config_.offered_rate) + 1);
        if (seq >= due) {
            std::this_thread::yield();
            continue;
        }
        for (; seq < due; ++seq) {
            const auto f = static_cast<std::size_t>(seq % flows.size());
            auto& pkt = templates[f];
            put_u64(pkt.data() + kSeqOffset, seq);
            put_u64(pkt.data() + kStampOffset, now_ns());
            offered_.fetch_add(1, std::memory_order_relaxed);
            if (link_ && !link_->try_consume(1)) {
                link_dropped_.fetch_add(1, std::memory_order_relaxed);
                continue;
            }
            if (offer_(pkt, flows[f])) accepted_.fetch_add(1, std::memory_order_relaxed);
        }
    }
    elapsed_s_ = seconds_since(t0);
}

BenchReport pktgen_run(L2L3Plane& plane, DeliveryTracker& tracker, const PktgenConfig& config) {
    config.validate();
    if (!plane.running()) throw Error(Errc::PlaneUnavailable, "l2l3 plane is not running");
    tracker.reset();
    tracker.set_latency_stride(std::max<std::uint32_t>(1, static_cast<std::uint32_t>(config.offered_rate / 20000)));
    PacketGenerator gen(config, [&](std::span<const std::uint8_t> pkt, const FlowKey& k) {
        return plane.ingress(pkt, k) == IngressStatus::Ok;
    });
    gen.start();
    gen.join();
    BenchReport r;
    r.name = "pktgen";
    r.offered_rate = config.offered_rate;
    r.timed_out = !plane.wait_quiescent(std::chrono::seconds(5));
    r.offered = gen.offered();
    r.delivered = tracker.delivered();
    r.dropped = r.offered - std::min(r.offered, r.delivered);
    r.elapsed_s = gen.elapsed_s();
    r.delivered_rate = r.elapsed_s > 0 ? static_cast<double>(r.delivered) / r.elapsed_s : 0;
    // Packets the generator could not emit in time count against the rate.
    const auto target = static_cast<std::uint64_t>(config.offered_rate *
                                                   std::chrono::duration<double>(config.duration).count());
    r.loss_fraction = target ? static_cast<double>(target - std::min(target, r.delivered)) / static_cast<double>(target)
                             : 0;
    const auto lat = tracker.latencies();
    r.latency = summarize(lat);
    return r;
}

// ---------------------------------------------------------------------------

std::uint32_t MlfrOptions::iteration_bound() const {
    return static_cast<std::uint32_t>(std::ceil(std::log2(rate_max / rate_min / tolerance)));
}

MlfrResult mlfr_search(LossProbe& probe, const MlfrOptions& o) {
    if (!(o.tolerance > 0 && o.tolerance < 0.5))
        throw Error(Errc::InvalidTolerance, "tolerance must lie in (0, 0.5)");
    if (!(o.rate_min > 0) || !(o.rate_max > o.rate_min))
        throw Error(Errc::InvalidConfig, "rate range must satisfy 0 < rate_min < rate_max");
    MlfrResult r;
    auto run = [&](double rate) {
        const auto lost = probe.lost_at(rate);
        r.probes.emplace_back(rate, lost);
        ++r.iterations;
        return lost;
    };
    if (run(o.rate_min) != 0) throw Error(Errc::NeverLossFree, "loss at the minimum rate");
    double lo = o.rate_min, hi = o.rate_max;
    if (run(hi) == 0) {
        r.rate = r.upper = hi;
        return r;
    }
    const std::uint32_t cap = std::min(o.max_iterations, o.iteration_bound());
    while (hi / lo > 1 + o.tolerance && r.iterations < cap) {
        const double mid = std::sqrt(lo * hi);
        (run(mid) == 0 ? lo : hi) = mid;
    }
    r.rate = lo;
    r.upper = hi;
    return r;
}

L2L3LossProbe::L2L3LossProbe(Factory make_plane, PktgenConfig base)
    : make_plane_(std::move(make_plane)), base_(std::move(base)) {}

std::uint64_t L2L3LossProbe::lost_at(double rate) {
    DeliveryTracker tracker;
    auto plane = make_plane_(tracker.sink());
    plane->start();
    auto cfg = base_;
    cfg.offered_rate = rate;
    auto report = pktgen_run(*plane, tracker, cfg);
    plane->stop();
    plane.reset();
    report.name = "mlfr-probe";
    const auto target =
        static_cast<std::uint64_t>(rate * std::chrono::duration<double>(cfg.duration).count());
    reports_.push_back(report);
    const auto lost = target - std::min(target, report.delivered);
    // A generator that could not keep the pace did not offer this rate.
    const double duration_s = std::chrono::duration<double>(cfg.duration).count();
    if (lost == 0 && report.elapsed_s > duration_s * 1.01) return 1;
    return lost;
}

std::uint64_t RateLimitedSinkProbe::lost_at(double rate) {
    // Burst just above one packet: any sustained rate above capacity loses.
    LinkShaper sink(capacity_, 1.0 + 1e-9);
    const auto n = static_cast<std::uint64_t>(rate * duration_);
    std::uint64_t lost = 0;
    for (std::uint64_t i = 0; i < n; ++i)
        if (!sink.try_consume_at(1, static_cast<double>(i) / rate)) ++lost;
    return lost;
}

// ---------------------------------------------------------------------------

void HttpLoadConfig::validate() const {
    if (concurrency < 1 || concurrency > 512) throw Error(Errc::InvalidConfig, "concurrency must be in 1..512");
    if (rate < 0) throw Error(Errc::InvalidConfig, "rate must not be negative");
    if (target.port == 0) throw Error(Errc::InvalidConfig, "target port missing");
    if (request.method.empty()) throw Error(Errc::InvalidConfig, "request method missing");
}

HttpLoadGenerator::HttpLoadGenerator(HttpLoadConfig config) : config_(std::move(config)) { config_.validate(); }

HttpLoadGenerator::~HttpLoadGenerator() { stop(); }

void HttpLoadGenerator::start() {
    if (!threads_.empty()) return;
    stopping_ = false;
    for (unsigned i = 0; i < config_.concurrency; ++i) threads_.emplace_back([this] { client(); });
}

void HttpLoadGenerator::stop() {
    stopping_ = true;
    for (auto& t : threads_)
        if (t.joinable()) t.join();
    threads_.clear();
}

std::vector<std::uint64_t> HttpLoadGenerator::latencies() const {
    std::lock_guard lock(mu_);
    return latencies_;
}

void HttpLoadGenerator::client() {
    std::unique_ptr<HttpConnection> conn;
    std::vector<std::uint64_t> local;
    const auto gap = config_.rate > 0 ? std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(
                                            config_.concurrency / config_.rate))
                                      : Clock::duration::zero();
    auto due = Clock::now();
    while (!stopping_.load(std::memory_order_relaxed)) {
        if (config_.rate > 0) {
            std::this_thread::sleep_until(due);
            due += gap;
        }
        try {
            if (!conn) conn = std::make_unique<HttpConnection>(config_.target);
            if (config_.link && !config_.link->consume(config_.link_cost, std::chrono::milliseconds(200))) continue;
            const auto t0 = now_ns();
            auto resp = conn->roundtrip(config_.request, config_.timeout);
            local.push_back(now_ns() - t0);
            if (resp.status == 200)
                completed_.fetch_add(1, std::memory_order_relaxed);
            else
                errors_.fetch_add(1, std::memory_order_relaxed);
        } catch (const Error& e) {
            if (e.code() == Errc::Timeout) timed_out_ = true;
            errors_.fetch_add(1, std::memory_order_relaxed);
            conn.reset();
            std::this_thread::sleep_for(std::chrono::milliseconds(1));
        }
    }
    std::lock_guard lock(mu_);
    latencies_.insert(latencies_.end(), local.begin(), local.end());
}

BenchReport http_load(const HttpLoadConfig& config) {
    HttpLoadGenerator gen(config);
    const auto t0 = Clock::now();
    gen.start();
    std::this_thread::sleep_for(config.duration);
    gen.stop();
    BenchReport r;
    r.name = "http-load";
    r.elapsed_s = seconds_since(t0);
    r.offered = gen.completed() + gen.errors();
    r.delivered = gen.completed();
    r.dropped = gen.errors();
    r.delivered_rate = static_cast<double>(r.delivered) / r.elapsed_s;
    r.offered_rate = static_cast<double>(r.offered) / r.elapsed_s;
    r.loss_fraction = r.offered ? static_cast<double>(r.dropped) / static_cast<double>(r.offered) : 0;
    r.timed_out = gen.timed_out();
    const auto lat = gen.latencies();
    r.latency = summarize(lat);
    return r;
}

// ---------------------------------------------------------------------------

double thread_cpu_seconds(std::thread::native_handle_type handle) {
    clockid_t cid;
    if (pthread_getcpuclockid(handle, &cid) != 0)
        throw Error(Errc::UnsupportedPlatform, "per-thread CPU clock unavailable");
    timespec ts{};
    if (clock_gettime(cid, &ts) != 0) throw Error(Errc::UnsupportedPlatform, "per-thread CPU clock unreadable");
    return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
}

std::vector<CpuSample> cpu_sample(const std::vector<ContextInfo>& contexts, std::chrono::milliseconds interval) {
    std::vector<double> before;
    before.reserve(contexts.size());
    for (const auto& c : contexts) before.push_back(thread_cpu_seconds(c.handle));
    const auto t0 = Clock::now();
    std::this_thread::sleep_for(interval);
    const double wall = seconds_since(t0);
    std::vector<CpuSample> out;
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        const double used = thread_cpu_seconds(contexts[i].handle) - before[i];
        out.push_back({contexts[i].name, used, used / wall});
    }
    return out;
}

double total_fraction(const std::vector<CpuSample>& samples) {
    double s = 0;
    for (const auto& c : samples) s += c.fraction;
    return s;
}

// ---------------------------------------------------------------------------

DynamicAudit dynamic_audit(ModelId model, std::size_t traces, std::uint32_t chain_len, const std::string& prefix) {
    if (chain_len == 0) throw Error(Errc::InvalidConfig, "chain length must be at least 1");
    DynamicAudit out;
    out.ledger = std::make_shared<AuditLedger>();
    // Chain: the two audited functions first, then pass-through stages.
    auto handler_for = [&](std::uint32_t i, bool l2l3) {
        if (i == 0) return l2l3 ? make_handler("l3route", {{"route", "10.0.0.5>10.0.1.5"}})
                                : make_handler("urlrewrite", {{"rule", "/api>/v2"}});
        if (i == 1) return l2l3 ? make_handler("l2fwd", {{"next_hop", "02:00:00:00:00:09"}})
                                : make_handler("revproxy", {}, 1);
        return make_handler("noop", {});
    };
    if (model == ModelId::Alpha || model == ModelId::Beta) {
        L2L3Config c;
        c.pool.domain_prefix = prefix;
        c.pool.frame_count = 512;
        c.mode = model == ModelId::Alpha ? PlaneMode::Polling : PlaneMode::Event;
        c.filter_default = Verdict::Allow;
        c.ledger = out.ledger.get();
        L2L3Plane plane(c);
        DeliveryTracker tracker;
        plane.set_sink(tracker.sink());
        FnId prev = kIngress;
        for (std::uint32_t i = 0; i < chain_len; ++i) {
            const FnId id{static_cast<std::uint16_t>(i + 1)};
            plane.register_nf(id, handler_for(i, true));
            plane.set_route(prev, id);
            prev = id;
        }
        plane.set_route(prev, kEgress);
        plane.start();
        plane.wait_quiescent(std::chrono::seconds(2));
        const auto flow = pktgen_flow(0);
        for (std::size_t i = 0; i < traces; ++i) {
            const std::uint64_t id = i + 1;
            const auto pkt = build_udp_packet(64, flow, i, static_cast<std::uint32_t>(i));
            if (plane.ingress(pkt, flow, id) != IngressStatus::Ok) continue;
            plane.wait_quiescent(std::chrono::seconds(2));
            out.trace_ids.push_back(id);
        }
        plane.stop();
    } else if (model == ModelId::Gamma || model == ModelId::Delta) {
        UpstreamStub up("audit-up");
        BrokerConfig c;
        c.pool.domain_prefix = prefix;
        c.pool.frame_count = 64;
        c.upstreams = {up.address()};
        c.mode = model == ModelId::Gamma ? PlaneMode::Polling : PlaneMode::Event;
        c.filter_default = Verdict::Allow;
        c.ledger = out.ledger.get();
        Broker broker(c);
        FnId prev = kIngress;
        for (std::uint32_t i = 0; i < chain_len; ++i) {
            const FnId id{static_cast<std::uint16_t>(i + 1)};
            broker.register_mf(id, handler_for(i, false));
            broker.set_route(prev, id);
            prev = id;
        }
        broker.set_route(prev, kEgress);
        broker.start();
        {
            HttpConnection conn(broker.address());
            HttpRequest req;
            req.method = "POST";
            req.target = "/api/audit";
            req.headers = {{"Host", "audit"}};
            req.body = "audited payload";
            broker.wait_quiescent(std::chrono::seconds(2));
            for (std::size_t i = 0; i < traces; ++i) {
                conn.roundtrip(req);
                broker.wait_quiescent(std::chrono::seconds(2));
            }
        }
        for (const auto& r : broker.latency_records()) out.trace_ids.push_back(r.trace_id);
        broker.stop();
        up.stop();
    } else {
        throw Error(Errc::UnknownModel, "model " + std::string(to_string(model)) + " has no runtime pipeline");
    }
    out.report = verify(*out.ledger, model, out.trace_ids, chain_len);
    return out;
}

// ---------------------------------------------------------------------------

std::string UnifiedReport::to_json() const {
    nlohmann::json j{{"t", t},
                     {"l2l3_pps", l2l3_pps},
                     {"l4l7_rps", l4l7_rps},
                     {"l4l7_units", l4l7_units},
                     {"aggregate", aggregate},
                     {"units_per_request", units_per_request},
                     {"solo_plateau", solo_plateau},
                     {"l2l3_after", l2l3_after},
                     {"l4l7_after", l4l7_after},
                     {"aggregate_after", aggregate_after},
                     {"aggregate_ratio", aggregate_ratio},
                     {"audit",
                      {{"l2l3_solo", cost_json(l2l3_solo)},
                       {"l2l3_shared", cost_json(l2l3_shared)},
                       {"l4l7_solo", cost_json(l4l7_solo)},
                       {"l4l7_shared", cost_json(l4l7_shared)},
                       {"unchanged", audit_unchanged}}}};
    return j.dump(2);
}

std::string UnifiedReport::to_tsv() const {
    std::ostringstream os;
    os << "t\tl2l3_pps\tl4l7_rps\tl4l7_units\taggregate\n";
    for (std::size_t i = 0; i < t.size(); ++i)
        os << t[i] << '\t' << l2l3_pps[i] << '\t' << l4l7_rps[i] << '\t' << l4l7_units[i] << '\t' << aggregate[i]
           << '\n';
    return os.str();
}

namespace {

constexpr HairpinLabel kWireSide = 1;

struct UnifiedNode {
    UpstreamStub upstream{"unified-up"};
    AuditLedger l2l3_ledger;
    AuditLedger l4l7_ledger;
    DeliveryTracker tracker;
    HairpinRouter hairpin;
    std::unique_ptr<L2L3Plane> l2l3;
    std::unique_ptr<Broker> broker;
    std::shared_ptr<ClassifierTable> table = std::make_shared<ClassifierTable>();
    std::unique_ptr<Dispatcher> dispatcher;

    explicit UnifiedNode(const std::string& prefix) {
        hairpin.set_side(kWireSide, tracker.sink());
        L2L3Config lc;
        lc.pool.domain_prefix = prefix + "-l2l3";
        lc.mode = PlaneMode::Polling;
        lc.filter_default = Verdict::Allow;
        lc.ledger = &l2l3_ledger;
        l2l3 = std::make_unique<L2L3Plane>(lc);
        l2l3->register_nf(FnId{1}, make_handler("l3route", {{"route", "10.0.0.5>10.0.1.5"}}));
        l2l3->register_nf(FnId{2}, make_handler("l2fwd", {{"next_hop", "02:00:00:00:00:09"}}));
        l2l3->set_route(kIngress, FnId{1});
        l2l3->set_route(FnId{1}, FnId{2});
        l2l3->set_route(FnId{2}, kEgress);
        l2l3->set_sink(hairpin.sink());

        BrokerConfig bc;
        bc.pool.domain_prefix = prefix + "-l4l7";
        bc.mode = PlaneMode::Event;
        bc.upstreams = {upstream.address()};
        bc.filter_default = Verdict::Allow;
        bc.ledger = &l4l7_ledger;
        broker = std::make_unique<Broker>(bc);
        broker->register_mf(FnId{1}, make_handler("urlrewrite", {{"rule", "/api>/v2"}}));
        broker->register_mf(FnId{2}, make_handler("revproxy", {}, 1));
        broker->set_route(kIngress, FnId{1});
        broker->set_route(FnId{1}, FnId{2});
        broker->set_route(FnId{2}, kEgress);

        BifurcationRule udp;
        udp.match.protocol = Protocol::Udp;
        udp.target = PlaneTarget::L2L3;
        udp.priority = 10;
        udp.hairpin = kWireSide;
        table->add_rule(udp);
        BifurcationRule tcp;
        tcp.match.protocol = Protocol::Tcp;
        tcp.target = PlaneTarget::L4L7;
        tcp.priority = 20;
        table->add_rule(tcp);

        l2l3->start();
        broker->start();
        dispatcher = std::make_unique<Dispatcher>(table, l2l3.get(), broker.get());
    }

    ~UnifiedNode() {
        dispatcher.reset();
        broker->stop();
        l2l3->stop();
        upstream.stop();
    }

    FlowKey http_flow() const {
        FlowKey k;
        k.src_ip = Ipv4::parse("10.0.0.1");
        k.dst_ip = Ipv4::parse("10.0.0.80");
        k.src_port = 40000;
        k.dst_port = 80;
        k.protocol = Protocol::Tcp;
        return k;
    }

    // Closed loop: each trace leaves the plane before the next one enters.
    CostVector audit_l2l3(std::size_t n, std::uint64_t first_id) {
        const auto flow = pktgen_flow(0);
        auto pkt = build_udp_packet(64, flow, 0, 7);
        std::vector<std::uint64_t> ids;
        for (std::size_t i = 0; i < n; ++i) {
            const auto id = first_id + i;
            dispatcher->dispatch(pkt, flow, id);
            l2l3->wait_quiescent(std::chrono::seconds(2));
            ids.push_back(id);
        }
        return modal_totals(l2l3_ledger, ids);
    }

    CostVector audit_l4l7(std::size_t n, const HttpRequest& req) {
        auto target = dispatcher->connection_target(http_flow());
        HttpConnection conn(*target);
        broker->wait_quiescent(std::chrono::seconds(2));
        const auto before = broker->latency_records().size();
        for (std::size_t i = 0; i < n; ++i) {
            conn.roundtrip(req);
            broker->wait_quiescent(std::chrono::seconds(2));
        }
        std::vector<std::uint64_t> ids;
        const auto recs = broker->latency_records();
        for (std::size_t i = before; i < recs.size(); ++i) ids.push_back(recs[i].trace_id);
        return modal_totals(l4l7_ledger, ids);
    }
};

}  // namespace

UnifiedReport unified_run(const UnifiedConfig& cfg) {
    if (!(cfg.link_rate > 0) || !(cfg.l2l3_offered > 0) || cfg.step_at >= cfg.duration ||
        !(cfg.l4l7_share > 0 && cfg.l4l7_share < 1) ||
        cfg.sample_interval.count() <= 0)
        throw Error(Errc::InvalidConfig, "unified run timing or rates out of range");
    UnifiedNode node(cfg.prefix);

    HttpRequest req;
    req.method = "POST";
    req.target = "/api/item";
    req.headers = {{"Host", "unified"}};
    req.body.assign(cfg.http_body_bytes, 'x');

    UnifiedReport rep;
    // The response echoes the body, so one request moves both messages over
    // the link.
    const double msg_bytes = static_cast<double>(serialize(req).size()) * 2.0;
    rep.units_per_request = std::ceil(msg_bytes / 64.0);

    // Coexistence audit: each plane alone, then under the other's load.
    rep.l2l3_solo = node.audit_l2l3(cfg.audit_traces, 1ULL << 40);
    rep.l4l7_solo = node.audit_l4l7(cfg.audit_traces, req);
    {
        HttpLoadConfig hc;
        hc.target = node.broker->address();
        hc.concurrency = 2;
        hc.request = req;
        HttpLoadGenerator bg(hc);
        bg.start();
        rep.l2l3_shared = node.audit_l2l3(cfg.audit_traces, (1ULL << 40) + cfg.audit_traces);
        bg.stop();
    }
    {
        PktgenConfig pc;
        pc.offered_rate = std::min(cfg.l2l3_offered, 20000.0);
        pc.duration = std::chrono::hours(1);
        PacketGenerator bg(pc, [&](std::span<const std::uint8_t> p, const FlowKey& k) {
            return node.dispatcher->dispatch(p, k) == DispatchStatus::ToL2L3;
        });
        bg.start();
        // Background L2/L3 traffic stays out of the L4/L7 ledger.
        rep.l4l7_shared = node.audit_l4l7(cfg.audit_traces, req);
        bg.stop();
    }
    node.l2l3->wait_quiescent(std::chrono::seconds(2));
    node.broker->wait_quiescent(std::chrono::seconds(2));
    rep.audit_unchanged = rep.l2l3_solo == rep.l2l3_shared && rep.l4l7_solo == rep.l4l7_shared;

    // Timeline on one shaped link.
    LinkShaper link(cfg.link_rate, std::max(64.0, cfg.link_rate / 100.0));
    PktgenConfig pc;
    pc.offered_rate = cfg.l2l3_offered;
    pc.duration = cfg.duration + std::chrono::seconds(5);
    PacketGenerator pktgen(
        pc,
        [&](std::span<const std::uint8_t> p, const FlowKey& k) {
            return node.dispatcher->dispatch(p, k) == DispatchStatus::ToL2L3;
        },
        &link);
    HttpLoadConfig hc;
    hc.target = node.broker->address();
    hc.concurrency = cfg.http_concurrency;
    hc.request = req;
    hc.link = &link;
    hc.link_cost = rep.units_per_request;
    hc.rate = cfg.l4l7_share * cfg.link_rate / rep.units_per_request;
    HttpLoadGenerator http(hc);

    node.tracker.reset();
    node.tracker.set_latency_stride(1000);
    const auto t0 = Clock::now();
    pktgen.start();
    bool stepped = false;
    std::uint64_t last_pkts = 0, last_reqs = 0;
    auto last_t = t0;
    for (auto next = t0 + cfg.sample_interval; next <= t0 + cfg.duration; next += cfg.sample_interval) {
        if (!stepped && t0 + cfg.step_at < next) {
            std::this_thread::sleep_until(t0 + cfg.step_at);
            http.start();
            stepped = true;
        }
        std::this_thread::sleep_until(next);
        const auto now = Clock::now();
        const double dt = std::chrono::duration<double>(now - last_t).count();
        const auto pkts = node.tracker.delivered();
        const auto reqs = http.completed();
        rep.t.push_back(std::chrono::duration<double>(now - t0).count());
        rep.l2l3_pps.push_back(static_cast<double>(pkts - last_pkts) / dt);
        rep.l4l7_rps.push_back(static_cast<double>(reqs - last_reqs) / dt);
        rep.l4l7_units.push_back(rep.l4l7_rps.back() * rep.units_per_request);
        rep.aggregate.push_back(rep.l2l3_pps.back() + rep.l4l7_units.back());
        last_pkts = pkts;
        last_reqs = reqs;
        last_t = now;
    }
    http.stop();
    pktgen.stop();

    const auto step_idx = static_cast<std::size_t>(cfg.step_at / cfg.sample_interval);
    // Skip the first interval (ramp) and two intervals after the step.
    rep.solo_plateau = mean_of(rep.aggregate, 1, step_idx);
    const std::size_t settle = step_idx + 2;
    rep.l2l3_after = mean_of(rep.l2l3_pps, settle, rep.t.size());
    rep.l4l7_after = mean_of(rep.l4l7_units, settle, rep.t.size());
    rep.aggregate_after = mean_of(rep.aggregate, settle, rep.t.size());
    rep.aggregate_ratio = rep.solo_plateau > 0 ? rep.aggregate_after / rep.solo_plateau : 0;
    return rep;
}

}  // namespace sfc
