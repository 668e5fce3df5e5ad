#include <random>

#include "doctest.h"
#include "sfc/chain_spec.hpp"

using namespace sfc;

namespace {

const char* kTwoNf = R"(# L3 routing followed by L2 forwarding
[plane l2l3]
mode = polling
pool.prefix = spec-l2l3
pool.frames = 256

[function nf1]
plane = l2l3
handler = l3route
route = 10.0.0.5>10.0.1.5

[function nf2]
plane = l2l3
handler = l2fwd
next_hop = 02:00:00:00:00:09

[chain l2l3]
route = INGRESS > nf1
route = nf1 > nf2
route = nf2 > EGRESS
)";

SpecError parse_error(const std::string& text) {
    try {
        parse_spec(text);
    } catch (const SpecError& e) {
        return e;
    }
    FAIL("spec was accepted");
    throw;
}

}  // namespace

TEST_SUITE("chain_spec") {
    TEST_CASE("two-function L2/L3 chain parses") {
        auto s = parse_spec(kTwoNf);
        REQUIRE(s.l2l3);
        CHECK_FALSE(s.l4l7);
        CHECK(s.l2l3->mode == PlaneMode::Polling);
        CHECK(s.l2l3->pool.frame_count == 256);
        REQUIRE(s.functions.size() == 2);
        CHECK(s.functions[0].id == FnId{1});
        CHECK(s.functions[1].id == FnId{2});
        CHECK(s.functions[0].handler == "l3route");
        CHECK(s.functions[0].params == HandlerParams{{"route", "10.0.0.5>10.0.1.5"}});
        CHECK(s.routes.size() == 3);
        CHECK(resolve_endpoint(s, PlaneTarget::L2L3, "nf2") == FnId{2});
        CHECK(resolve_endpoint(s, PlaneTarget::L2L3, "EGRESS") == kEgress);
    }

    TEST_CASE("route to an undeclared function is an unresolved reference") {
        auto e = parse_error(std::string(kTwoNf) + "route = nf2 > nf9\n");
        CHECK(e.code() == Errc::UnresolvedReference);
        CHECK(e.line() == 21);
        CHECK(e.column() == 15);
    }

    TEST_CASE("route without any declared function is an unresolved reference") {
        auto e = parse_error("[plane l2l3]\nmode = event\n[chain l2l3]\nroute = INGRESS > EGRESS\n");
        CHECK(e.code() == Errc::UnresolvedReference);
        CHECK(e.line() == 4);
        e = parse_error("[plane l2l3]\nmode = event\n[chain l2l3]\nroute = INGRESS > nf1\n");
        CHECK(e.code() == Errc::UnresolvedReference);
    }

    TEST_CASE("a loop in the chain is reported where it closes") {
        std::string t = kTwoNf;
        t.replace(t.find("route = nf2 > EGRESS"), 20, "route = nf2 > nf1");
        auto e = parse_error(t);
        CHECK(e.code() == Errc::CycleDetected);
        CHECK(e.line() == 20);
    }

    TEST_CASE("syntax errors carry line and column") {
        auto e = parse_error("[plane l2l3]\nmode polling\n");
        CHECK(e.code() == Errc::SyntaxError);
        CHECK(e.line() == 2);
        e = parse_error("[plane l2l3]\nmode = sideways\n");
        CHECK(e.column() == 8);
        e = parse_error("[plane l2l3]\nmode = event\nmode = polling\n");
        CHECK(e.line() == 3);  // exactly one mode per plane
        e = parse_error("[plane l2l3]\npool.frames = 10\n");
        CHECK(e.reason().find("no mode") != std::string::npos);
        e = parse_error("[planes l2l3]\n");
        CHECK(e.line() == 1);
        e = parse_error("mode = event\n");
        CHECK(e.code() == Errc::SyntaxError);
        e = parse_error("[plane l2l3]\nmode = event\npool.frames = many\n");
        CHECK(e.column() == 15);
        e = parse_error("[plane l2l3]\nmode = event\n[function f]\nplane = l2l3\nhandler = nosuch\n");
        CHECK(e.code() == Errc::UnresolvedReference);
        CHECK(e.line() == 5);
    }

    TEST_CASE("classifier rules parse and refuse duplicates") {
        std::string t = std::string(kTwoNf) +
                        "[plane l4l7]\nmode = event\nupstream = 127.0.0.1:9000\n"
                        "[classifier]\nrule = priority=5 proto=udp dst=10.0.0.0/8 dport=9 target=l2l3 hairpin=2\n"
                        "rule = priority=7 target=l4l7\n";
        auto s = parse_spec(t);
        REQUIRE(s.classifier.size() == 2);
        CHECK(s.classifier[0].hairpin == 2);
        CHECK(s.classifier[0].match.dst_ip.length == 8);
        auto table = build_classifier(s);
        FlowKey k{Ipv4::parse("1.1.1.1"), Ipv4::parse("10.2.3.4"), 1, 9, Protocol::Udp};
        CHECK(table->classify(k) == PlaneTarget::L2L3);
        k.dst_port = 10;
        CHECK(table->classify(k) == PlaneTarget::L4L7);
        auto e = parse_error(t + "rule = priority=7 target=l2l3\n");
        CHECK(e.code() == Errc::SyntaxError);
        e = parse_error(std::string(kTwoNf) + "[classifier]\nrule = priority=1 target=l4l7\n");
        CHECK(e.code() == Errc::UnresolvedReference);
    }

    TEST_CASE("render then parse round-trips") {
        auto check = [](const ChainSpec& s) {
            const auto text = render_spec(s);
            const auto back = parse_spec(text);
            CHECK(equivalent(s, back));
            CHECK(render_spec(back) == text);
            CHECK(back.functions.size() == s.functions.size());
            CHECK(back.routes.size() == s.routes.size());
            CHECK(back.filters.size() == s.filters.size());
            CHECK(back.classifier.size() == s.classifier.size());
        };
        check(parse_spec(kTwoNf));
        check(default_spec());

        // Randomized specs built through the text form.
        std::mt19937 rng(5);
        for (int i = 0; i < 100; ++i) {
            std::string t = "[plane l2l3]\nmode = ";
            t += rng() % 2 ? "event" : "polling";
            t += "\npool.frames = " + std::to_string(8 + rng() % 1000) + "\nfilter.default = ";
            t += rng() % 2 ? "allow" : "deny";
            t += "\n[plane l4l7]\nmode = polling\nupstream = 127.0.0.1:" + std::to_string(1 + rng() % 60000) + "\n";
            const int n = 1 + static_cast<int>(rng() % 6);
            for (int f = 1; f <= n; ++f)
                t += "[function f" + std::to_string(f) + "]\nplane = l2l3\nhandler = " +
                     (rng() % 2 ? "noop\n" : "primeburn\nn = " + std::to_string(rng() % 5000) + "\n");
            t += "[chain l2l3]\nroute = INGRESS > f1\n";
            for (int f = 1; f < n; ++f) t += "route = f" + std::to_string(f) + " > f" + std::to_string(f + 1) + "\n";
            t += "route = f" + std::to_string(n) + " > EGRESS\n[filter l2l3]\n";
            for (int f = 1; f <= n; ++f)
                t += (rng() % 2 ? "allow" : "deny") + std::string(" = f") + std::to_string(f) + " > f" +
                     std::to_string(1 + rng() % n) + "\n";
            t += "[classifier]\nrule = priority=" + std::to_string(rng() % 100) + " proto=udp sport=" +
                 std::to_string(rng() % 65536) + " target=l2l3\n";
            t += "[bench]\nrate = " + std::to_string(rng() % 100000) + ".25\nmlfr.tolerance = 0.0" +
                 std::to_string(1 + rng() % 9) + "\n";
            check(parse_spec(t));
        }
    }

    TEST_CASE("built planes carry the declared chain and filters") {
        std::string t = std::string(kTwoNf) + "[filter l2l3]\ndeny = nf1 > nf2\n";
        auto s = parse_spec(t);
        auto plane = build_l2l3(s);
        CHECK(plane->routes().chain() == std::vector<FnId>{FnId{1}, FnId{2}});
        CHECK(plane->filter()->lookup(FnId{1}, FnId{2}) == Verdict::Deny);
        CHECK_THROWS_AS(build_broker(s), Error);
    }
}
