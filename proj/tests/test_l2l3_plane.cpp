#include <map>
#include <mutex>
#include <random>
#include <set>

#include "doctest.h"
#include "sfc/error.hpp"
#include "sfc/l2l3_plane.hpp"

using namespace sfc;
using namespace std::chrono_literals;

namespace {

constexpr FnId kNf1{1}, kNf2{2}, kNf3{3};

std::vector<std::uint8_t> ipv4_packet(std::uint32_t dst, std::size_t len, std::uint32_t seed) {
    std::vector<std::uint8_t> p(len);
    std::mt19937 rng(seed);
    for (auto& b : p) b = static_cast<std::uint8_t>(rng());
    p[12] = 0x08;
    p[13] = 0x00;
    p[14] = 0x45;
    p[kIpv4ChecksumOffset] = p[kIpv4ChecksumOffset + 1] = 0;
    for (int i = 0; i < 4; ++i) p[kIpv4DstOffset + i] = static_cast<std::uint8_t>(dst >> (24 - 8 * i));
    auto ck = internet_checksum(std::span(p).subspan(kEthHeaderLen, 20));
    p[kIpv4ChecksumOffset] = static_cast<std::uint8_t>(ck >> 8);
    p[kIpv4ChecksumOffset + 1] = static_cast<std::uint8_t>(ck);
    return p;
}

L2L3Config config(const std::string& prefix, PlaneMode mode, std::uint32_t frames = 512) {
    L2L3Config c;
    c.pool.domain_prefix = prefix;
    c.pool.frame_count = frames;
    c.mode = mode;
    c.ring_capacity = 256;
    c.filter_default = Verdict::Allow;
    return c;
}

struct Captured {
    std::mutex mu;
    std::vector<std::vector<std::uint8_t>> packets;
    std::vector<PacketDescriptor> descs;

    PacketSink sink() {
        return [this](const PacketDescriptor& d, std::span<const std::uint8_t> bytes) {
            std::lock_guard lock(mu);
            packets.emplace_back(bytes.begin(), bytes.end());
            descs.push_back(d);
            return true;
        };
    }
    std::size_t size() {
        std::lock_guard lock(mu);
        return packets.size();
    }
};

// Two-function chain: l3route (10.0.0.5 -> 10.0.1.5) then l2fwd.
void two_nf_chain(L2L3Plane& plane) {
    plane.register_nf(kNf1, make_handler("l3route", {{"route", "10.0.0.5>10.0.1.5"}}));
    plane.register_nf(kNf2, make_handler("l2fwd", {{"next_hop", "02:00:00:00:00:09"}}));
    plane.set_route(kIngress, kNf1);
    plane.set_route(kNf1, kNf2);
    plane.set_route(kNf2, kEgress);
}

std::uint32_t dst_of(const std::vector<std::uint8_t>& p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | p[kIpv4DstOffset + i];
    return v;
}

}  // namespace

TEST_SUITE("l2l3_plane") {
    TEST_CASE("manual stepping moves a packet through the chain in order") {
        L2L3Plane plane(config("l2l3-step", PlaneMode::Polling));
        two_nf_chain(plane);
        Captured out;
        plane.set_sink(out.sink());
        plane.start(false);
        auto pkt = ipv4_packet(0x0a000005, 128, 7);
        REQUIRE(plane.ingress(pkt) == IngressStatus::Ok);
        CHECK(plane.processed_by(kNf1) == 0);
        CHECK(plane.route_step() == 1);
        CHECK(plane.nf_step(kNf1) == 1);
        CHECK(plane.processed_by(kNf1) == 1);
        CHECK(plane.processed_by(kNf2) == 0);
        CHECK(plane.route_step() == 1);
        CHECK(plane.nf_step(kNf2) == 1);
        CHECK(plane.route_step() == 1);
        CHECK(out.size() == 0);
        CHECK(plane.egress_step() == 1);
        REQUIRE(out.size() == 1);
        const auto& got = out.packets[0];
        CHECK(dst_of(got) == 0x0a000105);
        CHECK(internet_checksum(std::span(got).subspan(kEthHeaderLen, 20)) == 0);
        CHECK(got[5] == 0x09);
        CHECK(out.descs[0].hops == 4);
        CHECK(plane.in_flight() == 0);
        CHECK(plane.pool()->free_count() == 512);
    }

    TEST_CASE("payload outside the functions' mutable ranges arrives byte-identical") {
        L2L3Plane plane(config("l2l3-zc", PlaneMode::Polling));
        two_nf_chain(plane);
        Captured out;
        plane.set_sink(out.sink());
        plane.start(false);
        std::vector<std::vector<std::uint8_t>> sent;
        for (std::uint32_t i = 0; i < 64; ++i) {
            sent.push_back(ipv4_packet(0x0a000005, 64 + i * 23, i));
            REQUIRE(plane.ingress(sent.back()) == IngressStatus::Ok);
        }
        plane.drain();
        REQUIRE(out.size() == 64);
        for (std::size_t i = 0; i < 64; ++i) {
            const auto& a = sent[i];
            const auto& b = out.packets[i];
            REQUIRE(a.size() == b.size());
            // Mutable: dst MAC [0,6), IPv4 checksum [24,26), IPv4 dst [30,34).
            for (std::size_t k = 0; k < a.size(); ++k) {
                const bool mut = k < 6 || (k >= 24 && k < 26) || (k >= 30 && k < 34);
                if (!mut && a[k] != b[k]) FAIL("byte " << k << " of packet " << i << " changed");
            }
        }
        auto c = plane.counters();
        CHECK(c.dma_writes == 64);
        CHECK(c.egressed == 64);
    }

    TEST_CASE("pool exhaustion drops at ingress and recovers") {
        L2L3Plane plane(config("l2l3-exh", PlaneMode::Polling, 8));
        two_nf_chain(plane);
        plane.start(false);
        auto pkt = ipv4_packet(0x0a000005, 100, 1);
        for (int i = 0; i < 8; ++i) REQUIRE(plane.ingress(pkt) == IngressStatus::Ok);
        CHECK(plane.ingress(pkt) == IngressStatus::DroppedPoolExhausted);
        CHECK(plane.counters().dropped_pool == 1);
        plane.drain();
        CHECK(plane.ingress(pkt) == IngressStatus::Ok);
        plane.drain();
        auto c = plane.counters();
        CHECK(c.offered == c.egressed + c.dropped());
    }

    TEST_CASE("oversize packets are refused") {
        L2L3Plane plane(config("l2l3-big", PlaneMode::Polling));
        two_nf_chain(plane);
        plane.start(false);
        std::vector<std::uint8_t> big(4096);
        CHECK(plane.ingress(big) == IngressStatus::DroppedTooLarge);
        CHECK(plane.counters().dropped_oversize == 1);
    }

    TEST_CASE("configuration is frozen after start") {
        L2L3Plane plane(config("l2l3-frozen", PlaneMode::Polling));
        two_nf_chain(plane);
        CHECK(plane.ingress(ipv4_packet(1, 64, 1)) == IngressStatus::NotRunning);
        plane.start(false);
        CHECK_THROWS_AS(plane.set_mode(PlaneMode::Event), Error);
        try {
            plane.set_mode(PlaneMode::Event);
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ModeChangeAfterStart);
        }
        CHECK_THROWS_AS(plane.register_nf(kNf3, make_handler("noop", {})), Error);
    }

    TEST_CASE("event mode cannot be stepped manually") {
        L2L3Plane plane(config("l2l3-evman", PlaneMode::Event));
        two_nf_chain(plane);
        CHECK_THROWS_AS(plane.start(false), Error);
    }

    TEST_CASE("route cycles are rejected") {
        L2L3Plane plane(config("l2l3-cyc", PlaneMode::Polling));
        two_nf_chain(plane);
        try {
            plane.set_route(kNf2, kNf1);
            FAIL("cycle accepted");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::CycleDetected);
        }
    }

    TEST_CASE("filter grid over a three-function chain") {
        // Oracle: a packet egresses iff every consecutive function pair on
        // its path is allowed.
        const std::array<FnId, 3> fns{kNf1, kNf2, kNf3};
        for (PlaneMode mode : {PlaneMode::Polling, PlaneMode::Event}) {
            for (unsigned mask = 0; mask < 4; ++mask) {
                CAPTURE(mask);
                auto cfg = config("l2l3-grid-" + std::string(to_string(mode)) + std::to_string(mask), mode);
                cfg.filter_default = Verdict::Deny;
                L2L3Plane plane(cfg);
                for (auto f : fns) plane.register_nf(f, make_handler("noop", {}));
                plane.set_route(kIngress, kNf1);
                plane.set_route(kNf1, kNf2);
                plane.set_route(kNf2, kNf3);
                plane.set_route(kNf3, kEgress);
                plane.set_filter(kNf1, kNf2, (mask & 1) ? Verdict::Allow : Verdict::Deny);
                plane.set_filter(kNf2, kNf3, (mask & 2) ? Verdict::Allow : Verdict::Deny);
                Captured out;
                plane.set_sink(out.sink());
                plane.start(mode == PlaneMode::Event);
                for (int i = 0; i < 20; ++i) REQUIRE(plane.ingress(ipv4_packet(1, 80, i)) == IngressStatus::Ok);
                if (mode == PlaneMode::Polling)
                    plane.drain();
                else
                    REQUIRE(plane.wait_quiescent(5s));
                const bool pass = mask == 3;
                CHECK(out.size() == (pass ? 20u : 0u));
                auto c = plane.counters();
                CHECK(c.dropped_filter == (pass ? 0u : 20u));
                CHECK(plane.processed_by(kNf2) == ((mask & 1) ? 20u : 0u));
                CHECK(plane.processed_by(kNf3) == (pass ? 20u : 0u));
                plane.stop();
                CHECK(plane.pool()->free_count() == 512);
            }
        }
    }

    TEST_CASE("set_filter rejects unknown functions") {
        L2L3Plane plane(config("l2l3-filt", PlaneMode::Polling));
        two_nf_chain(plane);
        CHECK_THROWS_AS(plane.set_filter(kNf1, FnId{42}, Verdict::Allow), Error);
    }

    TEST_CASE("threaded planes deliver everything in both modes") {
        for (PlaneMode mode : {PlaneMode::Polling, PlaneMode::Event}) {
            CAPTURE(to_string(mode));
            L2L3Plane plane(config("l2l3-thr-" + std::string(to_string(mode)), mode));
            two_nf_chain(plane);
            Captured out;
            plane.set_sink(out.sink());
            plane.start();
            const int n = 2000;
            for (int i = 0; i < n; ++i) {
                auto pkt = ipv4_packet(0x0a000005, 64, i);
                while (plane.ingress(pkt) != IngressStatus::Ok) std::this_thread::yield();
            }
            REQUIRE(plane.wait_quiescent(10s));
            auto c = plane.counters();
            CHECK(c.offered == c.egressed + c.dropped());
            CHECK(c.ingressed == static_cast<std::uint64_t>(n) + c.dropped_ring);
            CHECK(out.size() == c.egressed);
            CHECK(c.egressed == static_cast<std::uint64_t>(n));
            for (const auto& p : out.packets) CHECK(dst_of(p) == 0x0a000105);
            CHECK(!plane.contexts().empty());
            plane.stop();
            CHECK(plane.pool()->free_count() == 512);
        }
    }

    TEST_CASE("closed-loop audit matches the polling and event-driven models") {
        struct Case {
            PlaneMode mode;
            ModelId model;
        };
        for (Case k : {Case{PlaneMode::Polling, ModelId::Alpha}, Case{PlaneMode::Event, ModelId::Beta}}) {
            CAPTURE(to_string(k.model));
            AuditLedger ledger;
            auto cfg = config("l2l3-audit-" + std::string(to_string(k.mode)), k.mode);
            cfg.ledger = &ledger;
            L2L3Plane plane(cfg);
            two_nf_chain(plane);
            plane.start();
            REQUIRE(plane.wait_quiescent(5s));
            std::vector<std::uint64_t> ids;
            for (std::uint64_t t = 1; t <= 50; ++t) {
                REQUIRE(plane.ingress(ipv4_packet(0x0a000005, 64, t), std::nullopt, t) == IngressStatus::Ok);
                REQUIRE(plane.wait_quiescent(5s));
                ids.push_back(t);
            }
            auto report = verify(ledger, k.model, ids);
            INFO(report.to_text());
            CHECK(report.passed);
        }
    }

    TEST_CASE("event-mode fill ring recovers after running dry") {
        auto cfg = config("l2l3-fill", PlaneMode::Event, 32);
        cfg.ring_capacity = 16;
        L2L3Plane plane(cfg);
        two_nf_chain(plane);
        plane.start();
        std::size_t ok = 0;
        for (int i = 0; i < 200; ++i) {
            if (plane.ingress(ipv4_packet(0x0a000005, 64, i)) == IngressStatus::Ok) ++ok;
            if (i % 40 == 39) REQUIRE(plane.wait_quiescent(5s));
        }
        REQUIRE(plane.wait_quiescent(5s));
        std::this_thread::sleep_for(20ms);
        CHECK(plane.ingress(ipv4_packet(0x0a000005, 64, 1)) == IngressStatus::Ok);
        REQUIRE(plane.wait_quiescent(5s));
        auto c = plane.counters();
        CHECK(c.offered == c.egressed + c.dropped());
        CHECK(ok > 16);
    }

    TEST_CASE("mode names round-trip") {
        CHECK(parse_mode("polling") == PlaneMode::Polling);
        CHECK(parse_mode(to_string(PlaneMode::Event)) == PlaneMode::Event);
        CHECK_THROWS_AS(parse_mode("interrupt"), Error);
    }
}
