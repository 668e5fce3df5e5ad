#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace sfc {

// Event categories. Mapping used by every instrumented site:
//   copy            any byte-for-byte duplication of payload
//   interrupt       a wakeup that moves a blocked context to runnable, or a
//                   receive/transmit interrupt of the (emulated) NIC or host stack
//   context switch  return from a blocking receive in a userspace context, or
//                   a handoff into the host transport stack on the audited path
//   protocol task   one pass of the host transport stack
//   serde task      one HTTP parse or one HTTP serialization
//   l2l3 task       one L2/L3 header processing pass outside the functions
enum class Category : std::uint8_t { Copies, Interrupts, ContextSwitches, ProtocolTasks, SerdeTasks, L2L3Tasks };

inline constexpr std::size_t kCategoryCount = 6;
inline constexpr std::array<Category, kCategoryCount> kAllCategories{
    Category::Copies,      Category::Interrupts, Category::ContextSwitches,
    Category::ProtocolTasks, Category::SerdeTasks, Category::L2L3Tasks};

std::string_view to_string(Category c) noexcept;
std::string_view row_label(Category c) noexcept;

struct CostVector {
    std::array<std::uint32_t, kCategoryCount> counts{};

    std::uint32_t& operator[](Category c) noexcept { return counts[static_cast<std::size_t>(c)]; }
    std::uint32_t operator[](Category c) const noexcept { return counts[static_cast<std::size_t>(c)]; }

    CostVector& operator+=(const CostVector& o) noexcept {
        for (std::size_t i = 0; i < kCategoryCount; ++i) counts[i] += o.counts[i];
        return *this;
    }
    friend CostVector operator+(CostVector a, const CostVector& b) noexcept { return a += b; }
    friend CostVector operator*(std::uint32_t k, CostVector v) noexcept {
        for (auto& c : v.counts) c *= k;
        return v;
    }
    friend bool operator==(const CostVector&, const CostVector&) = default;

    std::string str() const;
};

enum class ModelId : std::uint8_t { A, B, C, D, E, F, G, H, Alpha, Beta, Gamma, Delta, UnifiedHw, UnifiedSw };

inline constexpr std::array<ModelId, 14> kAllModels{
    ModelId::A,     ModelId::B,    ModelId::C,     ModelId::D,     ModelId::E,         ModelId::F,        ModelId::G,
    ModelId::H,     ModelId::Alpha, ModelId::Beta, ModelId::Gamma, ModelId::Delta,     ModelId::UnifiedHw, ModelId::UnifiedSw};

std::string_view to_string(ModelId id) noexcept;
/// Accepts "a".."h", "alpha"/"beta"/"gamma"/"delta" (or the Greek letters),
/// "unified_hw", "unified_sw". Throws Error(UnknownModel).
ModelId parse_model(std::string_view name);

/// Runtime step numbering: 1 is NIC->shared-memory ingress, chain transfers
/// are numbered from 2 in pipeline order, egress and the unified handoff use
/// fixed ids so they do not depend on chain length.
using Step = std::uint16_t;
inline constexpr Step kStepIngress = 1;
inline constexpr Step kStepHandoff = 0xfe;
inline constexpr Step kStepEgress = 0xff;
inline constexpr Step chain_step(std::uint16_t hop) noexcept { return static_cast<Step>(2 + hop); }

std::string step_label(Step s);

struct StepCost {
    std::string label;
    CostVector cost;
};

/// One audited data pipeline. Chain models list their steps in pipeline
/// order (ingress, four chain transfers for two functions, egress); unified
/// designs have a single handoff step.
struct PipelineModel {
    ModelId id;
    std::string_view table;
    std::string_view description;
    std::vector<Category> categories;  // the rows the source table reports
    std::vector<StepCost> steps;
    bool is_chain = true;

    CostVector totals() const;
};

struct Prediction {
    ModelId model;
    std::vector<StepCost> steps;
    CostVector totals;
};

const PipelineModel& model(ModelId id);

/// Per-step vectors and totals of a model at the audited chain length of two.
Prediction predict(ModelId id);

/// Closed-form totals for a chain of `chain_len` functions: fixed ingress and
/// egress vectors plus one (in, out) transfer pair per function. Unified
/// designs have no chain and return their handoff totals.
CostVector extrapolate(ModelId id, std::uint32_t chain_len);

struct AuditRecord {
    std::uint64_t trace_id;
    Step step;
    Category category;
    std::uint32_t amount;
};

/// Append-only per-trace event counters. record() is safe from any thread;
/// records land in one of several internally locked shards and are merged
/// when read.
class AuditLedger {
public:
    AuditLedger();

    void record(std::uint64_t trace_id, Step step, Category category, std::uint32_t amount = 1);
    void record(std::uint64_t trace_id, Step step, const CostVector& cost);
    /// A trace is complete once it reached egress or was dropped.
    void mark_complete(std::uint64_t trace_id);

    std::vector<AuditRecord> records() const;
    bool is_complete(std::uint64_t trace_id) const;
    CostVector totals(std::uint64_t trace_id) const;
    std::map<std::uint64_t, CostVector> per_trace_totals() const;
    std::map<Step, CostVector> per_step_totals(std::uint64_t trace_id) const;
    std::size_t size() const;
    void clear();

    /// Raw ledger as CSV: trace_id,step,category,amount.
    std::string dump_csv() const;

private:
    struct Shard {
        mutable std::mutex mu;
        std::vector<AuditRecord> records;
        std::vector<std::uint64_t> completed;
    };
    static constexpr std::size_t kShards = 16;
    Shard& local_shard();

    std::array<Shard, kShards> shards_;
};

struct CategoryVerdict {
    Category category;
    std::uint32_t predicted = 0;
    std::uint32_t measured = 0;  // modal per-trace total
    std::int64_t delta = 0;      // measured - predicted
    bool pass = false;
};

struct VerificationReport {
    ModelId model;
    std::uint32_t chain_len = 2;
    std::size_t traces = 0;
    std::vector<CategoryVerdict> categories;
    bool passed = false;

    std::string to_json() const;
    std::string to_text() const;
};

/// Checks the modal per-trace totals of `trace_ids` against the model's
/// extrapolated totals. Throws Error(IncompleteTrace) if a trace never
/// reached egress or a drop.
VerificationReport verify(const AuditLedger& ledger, ModelId id, std::span<const std::uint64_t> trace_ids,
                          std::uint32_t chain_len = 2);

/// Modal total over `trace_ids` restricted to the given steps.
CostVector modal_totals(const AuditLedger& ledger, std::span<const std::uint64_t> trace_ids,
                        std::span<const Step> steps = {});

/// Prediction rendered in the source table's layout (outside-the-chain
/// columns first, then the four within-chain columns, then the total).
std::string render_prediction_text(ModelId id);
std::string render_prediction_json(ModelId id);

}  // namespace sfc
