#include <map>

#include "doctest.h"
#include "sfc/audit.hpp"
#include "sfc/error.hpp"

using namespace sfc;

namespace {

// Independent transcription of the per-step cost tables. Columns are in the
// tables' own order: outside the chain (1, 6) then within (2, 3, 4, 5).
using Cols = std::array<std::uint32_t, 6>;
struct OracleModel {
    std::map<Category, Cols> rows;
};

std::map<ModelId, OracleModel> oracle_tables() {
    const Cols zero{}, one{0, 0, 1, 1, 1, 1}, two{0, 0, 2, 2, 2, 2};
    std::map<ModelId, OracleModel> t;
    auto l2 = [&](Cols c, Cols i, Cols x) {
        return OracleModel{{{Category::Copies, c}, {Category::Interrupts, i}, {Category::ContextSwitches, x}}};
    };
    t[ModelId::A] = l2(one, {1, 0, 1, 1, 1, 1}, one);
    t[ModelId::B] = l2(one, {1, 0, 1, 1, 1, 1}, one);
    t[ModelId::E] = l2(one, zero, zero);
    t[ModelId::F] = l2(one, zero, zero);
    auto l7 = [&](Cols c, Cols i, Cols x, Cols l) {
        return OracleModel{{{Category::Copies, c},
                            {Category::Interrupts, i},
                            {Category::ContextSwitches, x},
                            {Category::ProtocolTasks, one},
                            {Category::SerdeTasks, one},
                            {Category::L2L3Tasks, l}}};
    };
    const Cols int_cd{1, 0, 2, 2, 2, 2}, l23_2{0, 1, 2, 1, 2, 1}, l23_1{0, 1, 1, 0, 1, 0};
    t[ModelId::C] = l7(two, int_cd, two, l23_2);
    t[ModelId::D] = l7(one, int_cd, one, l23_1);
    t[ModelId::G] = l7(two, two, one, l23_2);
    t[ModelId::H] = l7(two, {0, 0, 3, 3, 3, 3}, two, l23_1);
    t[ModelId::Alpha] = l2(zero, zero, zero);
    t[ModelId::Beta] = l2(zero, {2, 1, 1, 1, 1, 1}, {1, 1, 1, 1, 1, 1});
    const Cols io2{2, 2, 0, 0, 0, 0}, io1{1, 1, 0, 0, 0, 0};
    t[ModelId::Gamma] = OracleModel{{{Category::Copies, io2},
                                     {Category::Interrupts, {2, 1, 0, 0, 0, 0}},
                                     {Category::ContextSwitches, io1},
                                     {Category::ProtocolTasks, io1},
                                     {Category::SerdeTasks, io1}}};
    t[ModelId::Delta] = OracleModel{{{Category::Copies, io2},
                                     {Category::Interrupts, {2, 1, 1, 1, 1, 1}},
                                     {Category::ContextSwitches, {1, 1, 1, 1, 1, 1}},
                                     {Category::ProtocolTasks, io1},
                                     {Category::SerdeTasks, io1}}};
    return t;
}

// Walks a chain of n functions hop by hop: outside costs once, then each
// function contributes the (into, out of) column pair of the first function.
std::uint32_t walk_chain(const Cols& c, std::uint32_t n) {
    std::uint32_t total = c[0] + c[1];
    for (std::uint32_t f = 0; f < n; ++f) total += c[2] + c[3];
    return total;
}

}  // namespace

TEST_SUITE("audit") {
    TEST_CASE("per-step vectors and totals match the transcribed tables") {
        for (const auto& [id, om] : oracle_tables()) {
            CAPTURE(to_string(id));
            const auto p = predict(id);
            REQUIRE(p.steps.size() == 6);
            // Pipeline order is 1,2,3,4,5,6; the oracle stores 1,6,2,3,4,5.
            const std::array<std::size_t, 6> col_of_step{0, 2, 3, 4, 5, 1};
            for (auto c : kAllCategories) {
                Cols cols{};
                if (auto it = om.rows.find(c); it != om.rows.end()) cols = it->second;
                std::uint32_t sum = 0;
                for (std::size_t s = 0; s < 6; ++s) {
                    CHECK(p.steps[s].cost[c] == cols[col_of_step[s]]);
                    sum += cols[s];
                }
                CHECK(p.totals[c] == sum);
            }
        }
    }

    TEST_CASE("headline totals") {
        auto b = predict(ModelId::Beta).totals;
        CHECK(b[Category::Copies] == 0);
        CHECK(b[Category::Interrupts] == 7);
        CHECK(b[Category::ContextSwitches] == 6);
        auto d = predict(ModelId::Delta).totals;
        CHECK(d[Category::Copies] == 4);
        CHECK(d[Category::Interrupts] == 7);
        CHECK(d[Category::ContextSwitches] == 6);
        CHECK(d[Category::ProtocolTasks] == 2);
        CHECK(d[Category::SerdeTasks] == 2);
        auto g = predict(ModelId::Gamma).totals;
        CHECK(g[Category::Interrupts] == 3);
        CHECK(g[Category::ContextSwitches] == 2);
        CHECK(predict(ModelId::Alpha).totals == CostVector{});
        auto c = predict(ModelId::C).totals;
        CHECK(c[Category::L2L3Tasks] == 7);
        CHECK(c[Category::Interrupts] == 9);
        auto h = predict(ModelId::H).totals;
        CHECK(h[Category::Interrupts] == 12);
    }

    TEST_CASE("unified designs") {
        auto hw = predict(ModelId::UnifiedHw);
        REQUIRE(hw.steps.size() == 1);
        CHECK(hw.totals[Category::Interrupts] == 2);
        CHECK(hw.totals[Category::Copies] == 1);
        CHECK(hw.totals[Category::ContextSwitches] == 1);
        auto sw = predict(ModelId::UnifiedSw).totals;
        CHECK(sw[Category::Interrupts] == 2);
        CHECK(sw[Category::Copies] == 2);
        CHECK(sw[Category::ContextSwitches] == 2);
        CHECK(extrapolate(ModelId::UnifiedHw, 5) == hw.totals);
    }

    TEST_CASE("extrapolation agrees with a hop-by-hop walk for every chain model") {
        for (const auto& [id, om] : oracle_tables()) {
            for (std::uint32_t n = 1; n <= 8; ++n) {
                auto v = extrapolate(id, n);
                for (auto c : kAllCategories) {
                    Cols cols{};
                    if (auto it = om.rows.find(c); it != om.rows.end()) cols = it->second;
                    CHECK(v[c] == walk_chain(cols, n));
                }
            }
            CHECK(extrapolate(id, 2) == predict(id).totals);
        }
        for (std::uint32_t n : {2u, 4u, 8u}) CHECK(extrapolate(ModelId::Delta, n)[Category::Interrupts] == 3 + 2 * n);
        CHECK_THROWS_AS(extrapolate(ModelId::Beta, 0), Error);
    }

    TEST_CASE("model names") {
        for (auto id : kAllModels) CHECK(parse_model(to_string(id)) == id);
        CHECK(parse_model("δ") == ModelId::Delta);
        CHECK_THROWS_AS(parse_model("z"), Error);
    }

    TEST_CASE("ledger verification uses modal per-trace totals") {
        AuditLedger ledger;
        const auto want = extrapolate(ModelId::Beta, 2);
        std::vector<std::uint64_t> ids;
        for (std::uint64_t t = 1; t <= 10; ++t) {
            ids.push_back(t);
            ledger.record(t, kStepIngress, Category::Interrupts, 2);
            ledger.record(t, kStepIngress, Category::ContextSwitches);
            for (std::uint16_t h = 0; h < 4; ++h) {
                ledger.record(t, chain_step(h), Category::Interrupts);
                ledger.record(t, chain_step(h), Category::ContextSwitches);
            }
            ledger.record(t, kStepEgress, Category::Interrupts);
            ledger.record(t, kStepEgress, Category::ContextSwitches);
            if (t == 3) ledger.record(t, kStepEgress, Category::Interrupts);  // one outlier
            ledger.mark_complete(t);
        }
        CHECK(ledger.totals(1) == want);
        auto rep = verify(ledger, ModelId::Beta, ids);
        CHECK(rep.passed);
        CHECK(rep.traces == 10);
        auto alpha = verify(ledger, ModelId::Alpha, ids);
        CHECK_FALSE(alpha.passed);
        CHECK(alpha.categories[1].delta == 7);
        CHECK(rep.to_json().find("\"passed\": true") != std::string::npos);
        CHECK(ledger.per_step_totals(1).size() == 6);

        std::vector<std::uint64_t> with_missing = ids;
        with_missing.push_back(99);
        try {
            verify(ledger, ModelId::Beta, with_missing);
            FAIL("expected IncompleteTrace");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::IncompleteTrace);
        }
        CHECK(ledger.dump_csv().rfind("trace_id,step,category,amount\n", 0) == 0);
    }

    TEST_CASE("prediction rendering") {
        auto txt = render_prediction_text(ModelId::Delta);
        CHECK(txt.find("total") != std::string::npos);
        CHECK(render_prediction_json(ModelId::Beta).find("\"total\": 7") != std::string::npos);
    }
}
