#include <pthread.h>
#include <time.h>

#include <random>
#include <set>

#include "doctest.h"
#include "sfc/error.hpp"
#include "sfc/l4l7_plane.hpp"
#include "sfc/upstream.hpp"

using namespace sfc;
using namespace std::chrono_literals;

namespace {

constexpr FnId kMf1{1}, kMf2{2};

BrokerConfig broker_config(const std::string& prefix, PlaneMode mode, std::vector<SocketAddress> ups,
                           std::uint32_t frames = 64) {
    BrokerConfig c;
    c.mode = mode;
    c.upstreams = std::move(ups);
    c.pool.domain_prefix = prefix;
    c.pool.frame_count = frames;
    c.filter_default = Verdict::Allow;
    return c;
}

// urlrewrite (/api -> /v2) then a round-robin reverse proxy.
void two_mf_chain(Broker& b) {
    b.register_mf(kMf1, make_handler("urlrewrite", {{"rule", "/api>/v2"}}));
    b.register_mf(kMf2, make_handler("revproxy", {}, b.upstream_count()));
    b.set_route(kIngress, kMf1);
    b.set_route(kMf1, kMf2);
    b.set_route(kMf2, kEgress);
}

HttpRequest get(std::string path, std::string body = {}) {
    HttpRequest r;
    r.method = body.empty() ? "GET" : "POST";
    r.target = std::move(path);
    r.headers = {{"Host", "svc.local"}, {"X-Test", "1"}};
    r.body = std::move(body);
    return r;
}

double cpu_seconds(pthread_t t) {
    clockid_t cid;
    pthread_getcpuclockid(t, &cid);
    timespec ts{};
    clock_gettime(cid, &ts);
    return static_cast<double>(ts.tv_sec) + static_cast<double>(ts.tv_nsec) * 1e-9;
}

}  // namespace

TEST_SUITE("l4l7_plane") {
    TEST_CASE("socket addresses") {
        auto a = SocketAddress::parse("127.0.0.1:8080");
        CHECK(a.port == 8080);
        CHECK(a.str() == "127.0.0.1:8080");
        CHECK_THROWS_AS(SocketAddress::parse("localhost"), Error);
        CHECK_THROWS_AS(SocketAddress::parse("127.0.0.1:99999"), Error);
        CHECK_THROWS_AS(SocketAddress::parse("not-an-ip:80"), Error);
    }

    TEST_CASE("a broker needs an upstream") {
        BrokerConfig c;
        c.pool.domain_prefix = "l4l7-noup";
        CHECK_THROWS_AS(Broker{c}, Error);
    }

    TEST_CASE("round trip through a two-function chain in both modes") {
        UpstreamStub a("a"), b("b");
        for (PlaneMode mode : {PlaneMode::Polling, PlaneMode::Event}) {
            CAPTURE(to_string(mode));
            Broker broker(broker_config("l4l7-rt-" + std::string(to_string(mode)), mode, {a.address(), b.address()}));
            two_mf_chain(broker);
            broker.start();
            HttpConnection conn(broker.address());
            std::mt19937 rng(5);
            std::set<std::string> backends;
            for (int i = 0; i < 20; ++i) {
                std::string body(100 + i * 37, '\0');
                for (auto& ch : body) ch = static_cast<char>('a' + rng() % 26);
                auto resp = conn.roundtrip(get("/api/item/" + std::to_string(i), body));
                CHECK(resp.status == 200);
                CHECK(resp.body == body);
                CHECK(resp.header("X-Path").value_or("") == "/v2/item/" + std::to_string(i));
                backends.insert(std::string(resp.header("X-Backend").value_or("")));
            }
            CHECK(backends == std::set<std::string>{"a", "b"});
            REQUIRE(broker.wait_quiescent(2s));
            auto c = broker.counters();
            CHECK(c.requests == 20);
            CHECK(c.responses == 20);
            CHECK(broker.processed_by(kMf2) == 20);
            CHECK(broker.latency_records().size() == 20);
            CHECK(broker.pool()->free_count() == 64);
        }
    }

    TEST_CASE("closed-loop audit matches the polling and event-driven broker models") {
        UpstreamStub up("u");
        struct Case {
            PlaneMode mode;
            ModelId model;
        };
        for (Case k : {Case{PlaneMode::Polling, ModelId::Gamma}, Case{PlaneMode::Event, ModelId::Delta}}) {
            CAPTURE(to_string(k.model));
            AuditLedger ledger;
            auto cfg = broker_config("l4l7-audit-" + std::string(to_string(k.mode)), k.mode, {up.address()});
            cfg.ledger = &ledger;
            Broker broker(cfg);
            two_mf_chain(broker);
            broker.start();
            HttpConnection conn(broker.address());
            REQUIRE(broker.wait_quiescent(2s));
            for (int i = 0; i < 40; ++i) {
                REQUIRE(conn.roundtrip(get("/api/x", "payload")).status == 200);
                REQUIRE(broker.wait_quiescent(2s));
            }
            std::vector<std::uint64_t> ids, rids;
            for (const auto& r : broker.latency_records()) {
                ids.push_back(r.trace_id);
                rids.push_back(r.trace_id | kResponseTraceBit);
            }
            REQUIRE(ids.size() == 40);
            auto report = verify(ledger, k.model, ids);
            INFO(report.to_text());
            CHECK(report.passed);
            // The response direction is relayed without the chain.
            CHECK(modal_totals(ledger, rids) == broker_ingress_cost() + broker_egress_cost());
        }
    }

    TEST_CASE("event-driven interrupts grow by two per added function") {
        UpstreamStub up("u");
        for (std::uint32_t n : {1u, 3u}) {
            CAPTURE(n);
            AuditLedger ledger;
            auto cfg = broker_config("l4l7-n" + std::to_string(n), PlaneMode::Event, {up.address()});
            cfg.ledger = &ledger;
            Broker broker(cfg);
            FnId prev = kIngress;
            for (std::uint16_t i = 1; i <= n; ++i) {
                broker.register_mf(FnId{i}, make_handler("noop", {}));
                broker.set_route(prev, FnId{i});
                prev = FnId{i};
            }
            broker.set_route(prev, kEgress);
            broker.start();
            HttpConnection conn(broker.address());
            REQUIRE(broker.wait_quiescent(2s));
            for (int i = 0; i < 20; ++i) {
                REQUIRE(conn.roundtrip(get("/")).status == 200);
                REQUIRE(broker.wait_quiescent(2s));
            }
            std::vector<std::uint64_t> ids;
            for (const auto& r : broker.latency_records()) ids.push_back(r.trace_id);
            auto report = verify(ledger, ModelId::Delta, ids, n);
            INFO(report.to_text());
            CHECK(report.passed);
            CHECK(modal_totals(ledger, ids)[Category::Interrupts] == 3 + 2 * n);
        }
    }

    TEST_CASE("malformed requests are answered 400 and reset") {
        UpstreamStub up("u");
        Broker broker(broker_config("l4l7-bad", PlaneMode::Event, {up.address()}));
        two_mf_chain(broker);
        broker.start();
        HttpConnection conn(broker.address());
        auto out = conn.exchange_raw("NOT A REQUEST\r\n\r\n", 2s);
        CHECK(out.rfind("HTTP/1.1 400", 0) == 0);
        CHECK(broker.counters().parse_errors == 1);
        CHECK(up.hits() == 0);
    }

    TEST_CASE("filter denies at the send site in both modes") {
        UpstreamStub up("u");
        for (PlaneMode mode : {PlaneMode::Polling, PlaneMode::Event}) {
            CAPTURE(to_string(mode));
            auto cfg = broker_config("l4l7-filt-" + std::string(to_string(mode)), mode, {up.address()});
            cfg.filter_default = Verdict::Deny;
            Broker broker(cfg);
            two_mf_chain(broker);
            broker.start();
            HttpConnection conn(broker.address());
            for (int i = 0; i < 5; ++i) CHECK(conn.roundtrip(get("/api")).status == 403);
            REQUIRE(broker.wait_quiescent(2s));
            CHECK(broker.counters().dropped_filter == 5);
            CHECK(broker.processed_by(kMf1) == 5);
            CHECK(broker.processed_by(kMf2) == 0);
            CHECK(broker.pool()->free_count() == 64);
        }
        CHECK(up.hits() == 0);
    }

    TEST_CASE("unreachable upstream yields 502") {
        SocketAddress dead;
        {
            UpstreamStub gone("gone");
            dead = gone.address();
        }
        Broker broker(broker_config("l4l7-502", PlaneMode::Event, {dead}));
        two_mf_chain(broker);
        broker.start();
        auto resp = http_roundtrip(broker.address(), get("/"));
        CHECK(resp.status == 502);
        CHECK(broker.counters().upstream_errors >= 1);
        REQUIRE(broker.wait_quiescent(2s));
        CHECK(broker.pool()->free_count() == 64);
    }

    TEST_CASE("an exhausted pool back-pressures instead of dropping") {
        UpstreamStub up("u");
        Broker broker(broker_config("l4l7-bp", PlaneMode::Event, {up.address()}, 2));
        two_mf_chain(broker);
        broker.start();
        std::vector<std::thread> clients;
        std::atomic<int> ok{0};
        for (int t = 0; t < 8; ++t) {
            clients.emplace_back([&] {
                HttpConnection conn(broker.address());
                for (int i = 0; i < 10; ++i)
                    if (conn.roundtrip(get("/api", std::string(500, 'x')), 10s).status == 200) ++ok;
            });
        }
        for (auto& t : clients) t.join();
        CHECK(ok == 80);
        REQUIRE(broker.wait_quiescent(2s));
        CHECK(broker.pool()->free_count() == 2);
    }

    TEST_CASE("event-driven broker is idle at zero load") {
        UpstreamStub up("u");
        Broker broker(broker_config("l4l7-idle", PlaneMode::Event, {up.address()}));
        two_mf_chain(broker);
        broker.start();
        http_roundtrip(broker.address(), get("/"));
        REQUIRE(broker.wait_quiescent(2s));
        auto ctxs = broker.contexts();
        double before = 0;
        for (auto& c : ctxs) before += cpu_seconds(c.handle);
        std::this_thread::sleep_for(300ms);
        double after = 0;
        for (auto& c : ctxs) after += cpu_seconds(c.handle);
        CHECK(after - before < 0.3 * 0.05);
    }

    TEST_CASE("mode is fixed after start") {
        UpstreamStub up("u");
        Broker broker(broker_config("l4l7-mode", PlaneMode::Event, {up.address()}));
        two_mf_chain(broker);
        broker.start();
        CHECK_THROWS_AS(broker.set_mode(PlaneMode::Polling), Error);
    }
}
