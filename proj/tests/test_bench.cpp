#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "sfc/bench.hpp"
#include "sfc/error.hpp"
#include "sfc/functions.hpp"
#include "sfc/upstream.hpp"

using namespace sfc;
using namespace std::chrono_literals;

namespace {

// Reference sink: a rate is loss-free exactly when it does not exceed the
// capacity.
class ThresholdOracle final : public LossProbe {
public:
    explicit ThresholdOracle(double capacity) : capacity_(capacity) {}
    std::uint64_t lost_at(double rate) override {
        ++calls;
        return rate > capacity_ ? 1 : 0;
    }
    std::uint32_t calls = 0;

private:
    double capacity_;
};

std::unique_ptr<L2L3Plane> small_plane(const std::string& prefix, PacketSink sink) {
    L2L3Config c;
    c.pool.domain_prefix = prefix;
    c.pool.frame_count = 1024;
    c.ring_capacity = 512;
    c.filter_default = Verdict::Allow;
    auto p = std::make_unique<L2L3Plane>(c);
    p->register_nf(FnId{1}, make_handler("l3route", {{"route", "10.0.0.5>10.0.1.5"}}));
    p->register_nf(FnId{2}, make_handler("l2fwd", {{"next_hop", "02:00:00:00:00:09"}}));
    p->set_route(kIngress, FnId{1});
    p->set_route(FnId{1}, FnId{2});
    p->set_route(FnId{2}, kEgress);
    p->set_sink(std::move(sink));
    return p;
}

}  // namespace

TEST_SUITE("bench") {
    TEST_CASE("generated packets carry a valid IPv4 header and their sequence number") {
        for (auto size : kPacketSizes) {
            CAPTURE(size);
            auto p = build_udp_packet(size, pktgen_flow(3), 77, 1);
            REQUIRE(p.size() == size);
            CHECK(internet_checksum(std::span(p).subspan(kEthHeaderLen, 20)) == 0);
            CHECK(p[kEthHeaderLen + 9] == 17);
            std::uint64_t seq;
            std::memcpy(&seq, p.data() + kUdpPayloadOffset, 8);
            CHECK(seq == 77);
        }
        PktgenConfig c;
        c.packet_size = 100;
        CHECK_THROWS_AS(c.validate(), Error);
        c.packet_size = 64;
        c.offered_rate = 0;
        CHECK_THROWS_AS(c.validate(), Error);
    }

    TEST_CASE("tolerance outside (0, 0.5) is refused") {
        ThresholdOracle o(50000);
        for (double tol : {0.0, -0.1, 0.5, 0.9}) {
            MlfrOptions opt;
            opt.tolerance = tol;
            try {
                mlfr_search(o, opt);
                FAIL("accepted tolerance " << tol);
            } catch (const Error& e) {
                CHECK(e.code() == Errc::InvalidTolerance);
            }
        }
    }

    TEST_CASE("a lossy floor rate is reported as never loss-free") {
        ThresholdOracle o(500);
        MlfrOptions opt;
        opt.rate_min = 1000;
        try {
            mlfr_search(o, opt);
            FAIL("expected NeverLossFree");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::NeverLossFree);
        }
    }

    TEST_CASE("search against a 50k pps rate-limited sink lands within tolerance below capacity") {
        const double cap = 50000;
        for (double tol : {0.01, 0.05, 0.2}) {
            CAPTURE(tol);
            MlfrOptions opt;
            opt.rate_min = 1000;
            opt.rate_max = 1e6;
            opt.tolerance = tol;
            RateLimitedSinkProbe sink(cap, 1.0);
            auto r = mlfr_search(sink, opt);
            CHECK(r.rate >= cap * (1 - tol));
            CHECK(r.rate <= cap);
            CHECK(r.iterations <= opt.iteration_bound());
        }
    }

    TEST_CASE("rate-limited sink agrees with the threshold oracle") {
        RateLimitedSinkProbe sink(50000, 1.0);
        ThresholdOracle o(50000);
        for (double r : {1000.0, 40000.0, 49999.0, 50000.0, 50100.0, 60000.0, 200000.0})
            CHECK_MESSAGE((sink.lost_at(r) == 0) == (o.lost_at(r) == 0), "rate " << r);
    }

    TEST_CASE("iteration bound and bracket hold for random capacities and ranges") {
        std::mt19937 rng(11);
        for (int i = 0; i < 200; ++i) {
            MlfrOptions opt;
            opt.rate_min = 100 + rng() % 1000;
            opt.rate_max = opt.rate_min * (2 + rng() % 5000);
            opt.tolerance = 0.001 + (rng() % 400) / 1000.0;
            const double cap = opt.rate_min * std::exp(std::uniform_real_distribution<>(0, std::log(opt.rate_max / opt.rate_min))(rng));
            ThresholdOracle o(cap);
            auto r = mlfr_search(o, opt);
            CHECK(r.iterations <= opt.iteration_bound());
            CHECK(r.rate <= cap);
            if (r.rate < opt.rate_max) CHECK(r.rate >= cap * (1 - opt.tolerance));
            CHECK(o.calls == r.iterations);
        }
    }

    TEST_CASE("generator loss accounting is exact on a real plane") {
        DeliveryTracker tracker;
        auto plane = small_plane("bench-pktgen", tracker.sink());
        plane->start();
        PktgenConfig c;
        c.offered_rate = 5000;
        c.duration = 400ms;
        c.flows = 4;
        auto before = plane->counters();
        auto r = pktgen_run(*plane, tracker, c);
        auto after = plane->counters();
        CHECK_FALSE(r.timed_out);
        CHECK(r.offered == r.delivered + r.dropped);
        CHECK(after.offered - before.offered == r.offered);
        CHECK(after.egressed - before.egressed == r.delivered);
        CHECK(after.dropped() - before.dropped() == r.dropped);
        CHECK(tracker.duplicates() == 0);
        CHECK(r.latency.samples > 0);
        CHECK(r.delivered > 1500);
        plane->stop();
        CHECK_THROWS_AS(pktgen_run(*plane, tracker, c), Error);
    }

    TEST_CASE("plane loss probe is loss-free at a modest rate") {
        PktgenConfig base;
        base.duration = 300ms;
        L2L3LossProbe probe([](PacketSink s) { return small_plane("bench-probe", std::move(s)); }, base);
        CHECK(probe.lost_at(2000) == 0);
        CHECK(probe.lost_at(3000) == 0);
        CHECK(probe.reports().size() == 2);
    }

    TEST_CASE("delivery tracker counts each sequence number once") {
        DeliveryTracker t;
        auto sink = t.sink();
        auto p = build_udp_packet(64, pktgen_flow(0), 5, 1);
        PacketDescriptor d;
        CHECK(sink(d, p));
        CHECK(sink(d, p));
        CHECK(t.delivered() == 1);
        CHECK(t.duplicates() == 1);
        std::vector<std::uint8_t> tiny(10);
        sink(d, tiny);
        CHECK(t.malformed() == 1);
    }

    TEST_CASE("http load respects concurrency limits and completes requests") {
        HttpLoadConfig bad;
        bad.target = {"127.0.0.1", 1};
        bad.request.method = "GET";
        bad.concurrency = 0;
        CHECK_THROWS_AS(bad.validate(), Error);
        bad.concurrency = 513;
        CHECK_THROWS_AS(bad.validate(), Error);

        UpstreamStub up("u");
        HttpLoadConfig c;
        c.target = up.address();
        c.concurrency = 3;
        c.duration = 300ms;
        c.request.method = "GET";
        c.request.target = "/";
        auto r = http_load(c);
        CHECK(r.delivered > 10);
        CHECK(r.dropped == 0);
        CHECK(r.latency.samples == r.delivered);
        CHECK(up.hits() == r.delivered);
    }

    TEST_CASE("CPU sampling separates a spinning context from a sleeping one") {
        std::atomic<bool> stop{false};
        std::thread spin([&] {
            while (!stop) {
            }
        });
        std::thread idle([&] {
            while (!stop) std::this_thread::sleep_for(5ms);
        });
        auto s = cpu_sample({{"spin", spin.native_handle()}, {"idle", idle.native_handle()}}, 300ms);
        stop = true;
        spin.join();
        idle.join();
        REQUIRE(s.size() == 2);
        CHECK(s[0].fraction > 0.5);
        CHECK(s[1].fraction < 0.05);
        CHECK(total_fraction(s) == doctest::Approx(s[0].fraction + s[1].fraction));
    }

    TEST_CASE("short unified run reports aligned series and an unchanged coexistence audit") {
        UnifiedConfig c;
        c.duration = 3s;
        c.step_at = 1s;
        c.sample_interval = 500ms;
        c.link_rate = 20000;
        c.l2l3_offered = 30000;
        c.http_concurrency = 2;
        c.audit_traces = 20;
        c.prefix = "bench-unified";
        auto r = unified_run(c);
        REQUIRE(r.t.size() == 6);
        CHECK(r.l2l3_pps.size() == r.t.size());
        CHECK(r.aggregate.size() == r.t.size());
        CHECK(r.units_per_request > 1);
        CHECK(r.audit_unchanged);
        CHECK(r.l4l7_after > 0);
        CHECK(r.solo_plateau > 0);
        CHECK(r.aggregate[0] <= 1.2 * c.link_rate);
        c.step_at = 5s;
        CHECK_THROWS_AS(unified_run(c), Error);
    }

    TEST_CASE("dynamic audits of the four runtime pipelines verify") {
        for (auto m : {ModelId::Alpha, ModelId::Beta, ModelId::Gamma, ModelId::Delta}) {
            CAPTURE(to_string(m));
            auto a = dynamic_audit(m, 30, 2, "bench-audit");
            CHECK(a.trace_ids.size() == 30);
            INFO(a.report.to_text());
            CHECK(a.report.passed);
        }
        auto d4 = dynamic_audit(ModelId::Delta, 10, 4, "bench-audit4");
        CHECK(d4.report.passed);
        CHECK_THROWS_AS(dynamic_audit(ModelId::A, 1), Error);
    }
}
