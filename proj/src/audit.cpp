#include "sfc/audit.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "sfc/error.hpp"

namespace sfc {

std::string_view to_string(Category c) noexcept {
    switch (c) {
        case Category::Copies: return "copies";
        case Category::Interrupts: return "interrupts";
        case Category::ContextSwitches: return "context_switches";
        case Category::ProtocolTasks: return "protocol_tasks";
        case Category::SerdeTasks: return "serde_tasks";
        case Category::L2L3Tasks: return "l2l3_tasks";
    }
    return "?";
}

std::string_view row_label(Category c) noexcept {
    switch (c) {
        case Category::Copies: return "# of copies";
        case Category::Interrupts: return "# of interrupts";
        case Category::ContextSwitches: return "# of context switch";
        case Category::ProtocolTasks: return "# of protocol processing tasks";
        case Category::SerdeTasks: return "# of serialization or deserialization (L7)";
        case Category::L2L3Tasks: return "# of L2/L3 processing tasks";
    }
    return "?";
}

std::string CostVector::str() const {
    std::ostringstream os;
    os << '{';
    for (std::size_t i = 0; i < kCategoryCount; ++i) {
        if (i) os << ", ";
        os << to_string(kAllCategories[i]) << '=' << counts[i];
    }
    os << '}';
    return os.str();
}

std::string_view to_string(ModelId id) noexcept {
    switch (id) {
        case ModelId::A: return "a";
        case ModelId::B: return "b";
        case ModelId::C: return "c";
        case ModelId::D: return "d";
        case ModelId::E: return "e";
        case ModelId::F: return "f";
        case ModelId::G: return "g";
        case ModelId::H: return "h";
        case ModelId::Alpha: return "alpha";
        case ModelId::Beta: return "beta";
        case ModelId::Gamma: return "gamma";
        case ModelId::Delta: return "delta";
        case ModelId::UnifiedHw: return "unified_hw";
        case ModelId::UnifiedSw: return "unified_sw";
    }
    return "?";
}

ModelId parse_model(std::string_view name) {
    for (auto id : kAllModels)
        if (to_string(id) == name) return id;
    if (name == "α") return ModelId::Alpha;
    if (name == "β") return ModelId::Beta;
    if (name == "γ") return ModelId::Gamma;
    if (name == "δ") return ModelId::Delta;
    throw Error(Errc::UnknownModel, std::string(name));
}

std::string step_label(Step s) {
    if (s == kStepIngress) return "ingress";
    if (s == kStepEgress) return "egress";
    if (s == kStepHandoff) return "handoff";
    return "hop" + std::to_string(s - 1);
}

namespace {

// Table rows are transcribed column by column in the tables' own layout:
// {outside: 1, 6 | within: 2, 3, 4, 5}.
using Row = std::array<std::uint32_t, 6>;
constexpr Row kZero{0, 0, 0, 0, 0, 0};

struct Rows {
    Row copies = kZero;
    Row interrupts = kZero;
    Row ctx = kZero;
    Row protocol = kZero;
    Row serde = kZero;
    Row l2l3 = kZero;
};

PipelineModel chain_model(ModelId id, std::string_view table, std::string_view desc, std::vector<Category> cats,
                          const Rows& r) {
    // Column index of each pipeline step in table layout.
    static constexpr std::array<std::size_t, 6> kColumnOfStep{0, 2, 3, 4, 5, 1};
    static constexpr std::array<std::string_view, 6> kLabels{"1", "2", "3", "4", "5", "6"};
    PipelineModel m{id, table, desc, std::move(cats), {}, true};
    for (std::size_t s = 0; s < 6; ++s) {
        const auto col = kColumnOfStep[s];
        CostVector v;
        v[Category::Copies] = r.copies[col];
        v[Category::Interrupts] = r.interrupts[col];
        v[Category::ContextSwitches] = r.ctx[col];
        v[Category::ProtocolTasks] = r.protocol[col];
        v[Category::SerdeTasks] = r.serde[col];
        v[Category::L2L3Tasks] = r.l2l3[col];
        m.steps.push_back({std::string(kLabels[s]), v});
    }
    return m;
}

PipelineModel unified_model(ModelId id, std::string_view desc, std::uint32_t interrupts, std::uint32_t copies,
                            std::uint32_t ctx) {
    CostVector v;
    v[Category::Interrupts] = interrupts;
    v[Category::Copies] = copies;
    v[Category::ContextSwitches] = ctx;
    return PipelineModel{id,
                         "unified",
                         desc,
                         {Category::Interrupts, Category::Copies, Category::ContextSwitches},
                         {{"handoff", v}},
                         false};
}

std::vector<PipelineModel> build_models() {
    const std::vector<Category> l2l3_cats{Category::Copies, Category::Interrupts, Category::ContextSwitches};
    const std::vector<Category> l4l7_cats{Category::Copies,        Category::Interrupts, Category::ContextSwitches,
                                          Category::ProtocolTasks, Category::SerdeTasks, Category::L2L3Tasks};
    const std::vector<Category> shm_l4l7_cats{Category::Copies, Category::Interrupts, Category::ContextSwitches,
                                              Category::ProtocolTasks, Category::SerdeTasks};

    const Row one{0, 0, 1, 1, 1, 1};
    const Row two{0, 0, 2, 2, 2, 2};

    std::vector<PipelineModel> out;
    // L2/L3 NF data plane models.
    out.push_back(chain_model(ModelId::A, "l2l3-vswitch", "kernel-based vSwitch + virtio-user/vhost-net & TUN/TAP + VM", l2l3_cats,
                              {.copies = one, .interrupts = {1, 0, 1, 1, 1, 1}, .ctx = one}));
    out.push_back(chain_model(ModelId::B, "l2l3-vswitch", "kernel-based vSwitch + virtio-user/vhost-net & TUN/TAP + container",
                              l2l3_cats, {.copies = one, .interrupts = {1, 0, 1, 1, 1, 1}, .ctx = one}));
    out.push_back(chain_model(ModelId::E, "l2l3-vswitch", "userspace vSwitch + virtio-user/vhost-user + VM", l2l3_cats,
                              {.copies = one}));
    out.push_back(chain_model(ModelId::F, "l2l3-vswitch", "userspace vSwitch + virtio-user/vhost-user + container", l2l3_cats,
                              {.copies = one}));

    // L4/L7 middlebox data plane models.
    out.push_back(chain_model(ModelId::C, "l4l7-vswitch", "kernel-based vSwitch + virtio-net/vhost-net & TUN/TAP + VM", l4l7_cats,
                              {.copies = two,
                               .interrupts = {1, 0, 2, 2, 2, 2},
                               .ctx = two,
                               .protocol = one,
                               .serde = one,
                               .l2l3 = {0, 1, 2, 1, 2, 1}}));
    out.push_back(chain_model(ModelId::D, "l4l7-vswitch", "kernel-based vSwitch + veth + container", l4l7_cats,
                              {.copies = one,
                               .interrupts = {1, 0, 2, 2, 2, 2},
                               .ctx = one,
                               .protocol = one,
                               .serde = one,
                               .l2l3 = {0, 1, 1, 0, 1, 0}}));
    out.push_back(chain_model(ModelId::G, "l4l7-vswitch", "userspace vSwitch + virtio-net/vhost-user + VM", l4l7_cats,
                              {.copies = two,
                               .interrupts = two,
                               .ctx = one,
                               .protocol = one,
                               .serde = one,
                               .l2l3 = {0, 1, 2, 1, 2, 1}}));
    out.push_back(chain_model(ModelId::H, "l4l7-vswitch",
                              "userspace vSwitch + virtio-user/vhost-net & TUN/TAP + veth + container", l4l7_cats,
                              {.copies = two,
                               .interrupts = {0, 0, 3, 3, 3, 3},
                               .ctx = two,
                               .protocol = one,
                               .serde = one,
                               .l2l3 = {0, 1, 1, 0, 1, 0}}));

    // Unified designs.
    out.push_back(unified_model(ModelId::UnifiedHw, "NIC switch in SR-IOV", 2, 1, 1));
    out.push_back(unified_model(ModelId::UnifiedSw, "virtio-user/vhost-net & TUN/TAP", 2, 2, 2));

    // L2/L3 chain over shared memory.
    out.push_back(chain_model(ModelId::Alpha, "l2l3-shm", "polling kernel-bypass + polling zero-copy rings", l2l3_cats, {}));
    out.push_back(chain_model(ModelId::Beta, "l2l3-shm", "event-driven kernel-bypass + event-driven zero-copy messaging",
                              l2l3_cats, {.interrupts = {2, 1, 1, 1, 1, 1}, .ctx = {1, 1, 1, 1, 1, 1}}));

    // L4/L7 chain over shared memory.
    out.push_back(chain_model(ModelId::Gamma, "l4l7-shm", "kernel-based exchange + polling zero-copy rings", shm_l4l7_cats,
                              {.copies = {2, 2, 0, 0, 0, 0},
                               .interrupts = {2, 1, 0, 0, 0, 0},
                               .ctx = {1, 1, 0, 0, 0, 0},
                               .protocol = {1, 1, 0, 0, 0, 0},
                               .serde = {1, 1, 0, 0, 0, 0}}));
    out.push_back(chain_model(ModelId::Delta, "l4l7-shm", "kernel-based exchange + event-driven zero-copy messaging",
                              shm_l4l7_cats,
                              {.copies = {2, 2, 0, 0, 0, 0},
                               .interrupts = {2, 1, 1, 1, 1, 1},
                               .ctx = {1, 1, 1, 1, 1, 1},
                               .protocol = {1, 1, 0, 0, 0, 0},
                               .serde = {1, 1, 0, 0, 0, 0}}));
    return out;
}

const std::vector<PipelineModel>& models() {
    static const std::vector<PipelineModel> all = build_models();
    return all;
}

}  // namespace

CostVector PipelineModel::totals() const {
    CostVector t;
    for (const auto& s : steps) t += s.cost;
    return t;
}

const PipelineModel& model(ModelId id) {
    for (const auto& m : models())
        if (m.id == id) return m;
    throw Error(Errc::UnknownModel, std::string(to_string(id)));
}

Prediction predict(ModelId id) {
    const auto& m = model(id);
    return Prediction{id, m.steps, m.totals()};
}

CostVector extrapolate(ModelId id, std::uint32_t chain_len) {
    if (chain_len < 1) throw Error(Errc::InvalidConfig, "chain length must be >= 1");
    const auto& m = model(id);
    if (!m.is_chain) return m.totals();
    // steps: [ingress, in1, out1, in2, out2, egress]; transfers per function are symmetric.
    const CostVector per_function = m.steps[1].cost + m.steps[2].cost;
    return m.steps.front().cost + m.steps.back().cost + chain_len * per_function;
}

AuditLedger::AuditLedger() = default;

AuditLedger::Shard& AuditLedger::local_shard() {
    static std::atomic<std::size_t> next{0};
    thread_local const std::size_t slot = next.fetch_add(1, std::memory_order_relaxed);
    return shards_[slot % kShards];
}

void AuditLedger::record(std::uint64_t trace_id, Step step, Category category, std::uint32_t amount) {
    if (amount == 0) return;
    auto& s = local_shard();
    std::lock_guard lock(s.mu);
    s.records.push_back({trace_id, step, category, amount});
}

void AuditLedger::record(std::uint64_t trace_id, Step step, const CostVector& cost) {
    auto& s = local_shard();
    std::lock_guard lock(s.mu);
    for (auto c : kAllCategories)
        if (cost[c]) s.records.push_back({trace_id, step, c, cost[c]});
}

void AuditLedger::mark_complete(std::uint64_t trace_id) {
    auto& s = local_shard();
    std::lock_guard lock(s.mu);
    s.completed.push_back(trace_id);
}

std::vector<AuditRecord> AuditLedger::records() const {
    std::vector<AuditRecord> out;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mu);
        out.insert(out.end(), s.records.begin(), s.records.end());
    }
    std::stable_sort(out.begin(), out.end(), [](const AuditRecord& a, const AuditRecord& b) {
        return a.trace_id != b.trace_id ? a.trace_id < b.trace_id : a.step < b.step;
    });
    return out;
}

bool AuditLedger::is_complete(std::uint64_t trace_id) const {
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mu);
        if (std::find(s.completed.begin(), s.completed.end(), trace_id) != s.completed.end()) return true;
    }
    return false;
}

CostVector AuditLedger::totals(std::uint64_t trace_id) const {
    CostVector v;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mu);
        for (const auto& r : s.records)
            if (r.trace_id == trace_id) v[r.category] += r.amount;
    }
    return v;
}

std::map<std::uint64_t, CostVector> AuditLedger::per_trace_totals() const {
    std::map<std::uint64_t, CostVector> out;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mu);
        for (const auto& r : s.records) out[r.trace_id][r.category] += r.amount;
    }
    return out;
}

std::map<Step, CostVector> AuditLedger::per_step_totals(std::uint64_t trace_id) const {
    std::map<Step, CostVector> out;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mu);
        for (const auto& r : s.records)
            if (r.trace_id == trace_id) out[r.step][r.category] += r.amount;
    }
    return out;
}

std::size_t AuditLedger::size() const {
    std::size_t n = 0;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mu);
        n += s.records.size();
    }
    return n;
}

void AuditLedger::clear() {
    for (auto& s : shards_) {
        std::lock_guard lock(s.mu);
        s.records.clear();
        s.completed.clear();
    }
}

std::string AuditLedger::dump_csv() const {
    std::ostringstream os;
    os << "trace_id,step,category,amount\n";
    for (const auto& r : records())
        os << r.trace_id << ',' << step_label(r.step) << ',' << to_string(r.category) << ',' << r.amount << '\n';
    return os.str();
}

namespace {

struct TraceIndex {
    std::unordered_map<std::uint64_t, CostVector> totals;
    std::unordered_set<std::uint64_t> completed;
};

TraceIndex index_ledger(const AuditLedger& ledger, std::span<const std::uint64_t> trace_ids,
                        std::span<const Step> steps) {
    TraceIndex idx;
    std::unordered_set<std::uint64_t> wanted(trace_ids.begin(), trace_ids.end());
    for (auto id : trace_ids) idx.totals[id];
    for (const auto& r : ledger.records()) {
        if (!wanted.contains(r.trace_id)) continue;
        if (!steps.empty() && std::find(steps.begin(), steps.end(), r.step) == steps.end()) continue;
        idx.totals[r.trace_id][r.category] += r.amount;
    }
    for (auto id : trace_ids)
        if (ledger.is_complete(id)) idx.completed.insert(id);
    return idx;
}

std::uint32_t mode_of(const std::vector<std::uint32_t>& values) {
    std::map<std::uint32_t, std::size_t> freq;
    for (auto v : values) ++freq[v];
    std::uint32_t best = 0;
    std::size_t best_n = 0;
    for (auto [v, n] : freq)
        if (n > best_n) best = v, best_n = n;  // ties resolve to the smaller value
    return best;
}

CostVector modal(const TraceIndex& idx, std::span<const std::uint64_t> trace_ids) {
    CostVector out;
    for (auto c : kAllCategories) {
        std::vector<std::uint32_t> values;
        values.reserve(trace_ids.size());
        for (auto id : trace_ids) values.push_back(idx.totals.at(id)[c]);
        out[c] = mode_of(values);
    }
    return out;
}

}  // namespace

CostVector modal_totals(const AuditLedger& ledger, std::span<const std::uint64_t> trace_ids,
                        std::span<const Step> steps) {
    return modal(index_ledger(ledger, trace_ids, steps), trace_ids);
}

VerificationReport verify(const AuditLedger& ledger, ModelId id, std::span<const std::uint64_t> trace_ids,
                          std::uint32_t chain_len) {
    const auto predicted = extrapolate(id, chain_len);
    const auto idx = index_ledger(ledger, trace_ids, {});
    for (auto t : trace_ids)
        if (!idx.completed.contains(t)) throw Error(Errc::IncompleteTrace, "trace " + std::to_string(t));

    VerificationReport rep;
    rep.model = id;
    rep.chain_len = chain_len;
    rep.traces = trace_ids.size();
    const auto measured = modal(idx, trace_ids);
    rep.passed = !trace_ids.empty();
    for (auto c : kAllCategories) {
        CategoryVerdict v{c, predicted[c], measured[c],
                          static_cast<std::int64_t>(measured[c]) - static_cast<std::int64_t>(predicted[c]),
                          measured[c] == predicted[c]};
        rep.passed = rep.passed && v.pass;
        rep.categories.push_back(v);
    }
    return rep;
}

std::string VerificationReport::to_json() const {
    nlohmann::json j;
    j["model"] = to_string(model);
    j["chain_len"] = chain_len;
    j["traces"] = traces;
    j["passed"] = passed;
    for (const auto& v : categories) {
        j["categories"].push_back({{"category", to_string(v.category)},
                                   {"predicted", v.predicted},
                                   {"measured", v.measured},
                                   {"delta", v.delta},
                                   {"pass", v.pass}});
    }
    return j.dump(2);
}

std::string VerificationReport::to_text() const {
    std::ostringstream os;
    os << "model " << to_string(model) << " (chain of " << chain_len << ", " << traces << " traces): "
       << (passed ? "PASS" : "FAIL") << '\n';
    os << std::left << std::setw(20) << "category" << std::right << std::setw(11) << "predicted" << std::setw(10)
       << "measured" << std::setw(8) << "delta" << "  verdict\n";
    for (const auto& v : categories) {
        os << std::left << std::setw(20) << to_string(v.category) << std::right << std::setw(11) << v.predicted
           << std::setw(10) << v.measured << std::setw(8) << std::showpos << v.delta << std::noshowpos << "  "
           << (v.pass ? "pass" : "FAIL") << '\n';
    }
    return os.str();
}

std::string render_prediction_text(ModelId id) {
    const auto& m = model(id);
    std::ostringstream os;
    os << m.table << " (" << to_string(id) << "): " << m.description << '\n';
    if (!m.is_chain) {
        for (auto c : m.categories)
            os << std::left << std::setw(44) << row_label(c) << std::right << std::setw(4) << m.steps[0].cost[c]
               << '\n';
        return os.str();
    }
    // Outside the chain (1, 6) | within the chain (2..5) | total
    static constexpr std::array<std::size_t, 6> kStepOfColumn{0, 5, 1, 2, 3, 4};
    os << std::left << std::setw(44) << "" << std::right << std::setw(4) << "1" << std::setw(4) << "6" << " |"
       << std::setw(4) << "2" << std::setw(4) << "3" << std::setw(4) << "4" << std::setw(4) << "5" << " |"
       << std::setw(6) << "total" << '\n';
    const auto totals = m.totals();
    for (auto c : m.categories) {
        os << std::left << std::setw(44) << row_label(c) << std::right;
        for (std::size_t col = 0; col < 6; ++col) {
            if (col == 2) os << " |";
            os << std::setw(4) << m.steps[kStepOfColumn[col]].cost[c];
        }
        os << " |" << std::setw(6) << totals[c] << '\n';
    }
    return os.str();
}

std::string render_prediction_json(ModelId id) {
    const auto& m = model(id);
    nlohmann::json j;
    j["model"] = to_string(id);
    j["table"] = m.table;
    j["description"] = m.description;
    const auto totals = m.totals();
    for (auto c : m.categories) {
        nlohmann::json row;
        for (const auto& s : m.steps) row["steps"][s.label] = s.cost[c];
        row["total"] = totals[c];
        j["categories"][std::string(to_string(c))] = row;
    }
    return j.dump(2);
}

}  // namespace sfc
