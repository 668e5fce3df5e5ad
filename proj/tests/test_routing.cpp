#include "doctest.h"
#include "sfc/error.hpp"
#include "sfc/routing.hpp"

using namespace sfc;

TEST_SUITE("routing") {
    TEST_CASE("valid two-function chain") {
        RoutingTable rt;
        rt.add_function(FnId{1});
        rt.add_function(FnId{2});
        rt.set_route(kIngress, FnId{1});
        rt.set_route(FnId{1}, FnId{2});
        rt.set_route(FnId{2}, kEgress);
        CHECK(rt.chain() == std::vector<FnId>{FnId{1}, FnId{2}});
        CHECK(*rt.next(FnId{2}) == kEgress);
    }

    TEST_CASE("cycles and unknown endpoints are rejected without side effects") {
        RoutingTable rt;
        for (std::uint16_t i = 1; i <= 3; ++i) rt.add_function(FnId{i});
        rt.set_route(FnId{1}, FnId{2});
        rt.set_route(FnId{2}, FnId{3});
        try {
            rt.set_route(FnId{3}, FnId{1});
            FAIL("expected CycleDetected");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::CycleDetected);
        }
        CHECK_FALSE(rt.next(FnId{3}).has_value());
        CHECK_THROWS_AS(rt.set_route(FnId{1}, FnId{1}), Error);
        try {
            rt.set_route(FnId{1}, FnId{9});
            FAIL("expected UnknownFunction");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::UnknownFunction);
        }
        CHECK(*rt.next(FnId{1}) == FnId{2});
        CHECK_THROWS_AS(rt.add_function(FnId{1}), Error);
        // Re-pointing an edge is fine as long as no loop appears.
        rt.set_route(FnId{1}, FnId{3});
        CHECK(*rt.next(FnId{1}) == FnId{3});
    }

    TEST_CASE("filter lookups are total with a deny default") {
        FilterTable f;
        CHECK(f.lookup(FnId{1}, FnId{2}) == Verdict::Deny);
        f.set(FnId{1}, FnId{2}, Verdict::Allow);
        CHECK(f.allows(FnId{1}, FnId{2}));
        CHECK_FALSE(f.allows(FnId{2}, FnId{1}));
        CHECK(f.allows(kIngress, FnId{1}));
        CHECK(f.allows(FnId{2}, kEgress));
        FilterTable open(Verdict::Allow);
        CHECK(open.allows(FnId{5}, FnId{6}));
    }
}
