// speculation.hpp - expert prediction signals and the speculative decode
// path: default vectors, quasi-hidden states, the predictor variants, and
// decode that executes predicted experts instead of re-routing.

#pragma once

#include "specmoe/estimator.hpp"
#include "specmoe/model.hpp"
#include "specmoe/trace.hpp"

#include <filesystem>
#include <memory>
#include <optional>

namespace specmoe {

// Per-(layer, expert) running mean of the expert's raw (pre-gate) output.
struct DefaultVectorTable {
    int layers = 0;
    int experts = 0;
    int hidden = 0;
    std::vector<Vec> d;                // [layers * experts], each H
    std::vector<std::int64_t> counts;  // [layers * experts]

    const Vec& at(int layer, int expert) const {
        return d[static_cast<std::size_t>(layer) * experts + expert];
    }
    std::int64_t count(int layer, int expert) const {
        return counts[static_cast<std::size_t>(layer) * experts + expert];
    }

    static DefaultVectorTable zeros(int layers, int experts, int hidden);
};

// Accumulates in double and freezes to the f32 table.
class DefaultVectorAccumulator {
public:
    DefaultVectorAccumulator(int layers, int experts, int hidden);
    void add(int layer, const LayerTraceRecord& rec);
    void add_token(const TraceToken& tok);
    DefaultVectorTable freeze() const;

private:
    int layers_, experts_, hidden_;
    std::vector<std::vector<double>> sums_;
    std::vector<std::int64_t> counts_;
};

DefaultVectorTable accumulate_default_vectors(TraceReader& trace);

// Writes default_vectors.moet [L][E][H] and counts.json.
void save_default_vectors(const DefaultVectorTable& table, const std::filesystem::path& dir);
DefaultVectorTable load_default_vectors(const std::filesystem::path& dir);

// d_l = sum over selected experts of gate * d[l][e]
Vec layer_default(const DefaultVectorTable& table, const RouterDecision& decision, int layer);

// q_l = rms_norm(r_l + d_l, next layer's pre-routing gain)
Vec quasi_hidden(const Vec& r, const Vec& d, const Vec& next_norm_gain, float eps);

// --- predictors ------------------------------------------------------------

enum class PredictorKind { kBaselineS, kRouterPF, kEstPF, kHybridPF, kOracle };

std::string_view to_string(PredictorKind k);
PredictorKind predictor_kind_from_string(std::string_view s);

// Per-layer dispatch table for hybrid prediction, entries for layers 0..L-2.
using HybridMap = std::vector<PredictorKind>;
HybridMap load_hybrid_map(const std::filesystem::path& path, int layers);

std::unique_ptr<Predictor> make_baseline_s();
std::unique_ptr<Predictor> make_router_pf(std::shared_ptr<const DefaultVectorTable> table);
std::unique_ptr<Predictor> make_est_pf(std::shared_ptr<const DefaultVectorTable> table,
                                       std::shared_ptr<const EstimatorParams> estimator);
std::unique_ptr<Predictor> make_hybrid_pf(std::shared_ptr<const DefaultVectorTable> table,
                                          std::shared_ptr<const EstimatorParams> estimator,
                                          HybridMap map);
// The oracle replays the true path on a private shadow state; in offline
// trace evaluation it reads the recorded truth from the context instead.
std::unique_ptr<Predictor> make_oracle();

struct PredictorArtifacts {
    std::shared_ptr<const DefaultVectorTable> table;
    std::shared_ptr<const EstimatorParams> estimator;
    std::optional<HybridMap> hybrid_map;
};
std::unique_ptr<Predictor> make_predictor(PredictorKind kind, const PredictorArtifacts& art,
                                          int layers);

// --- speculative decode -----------------------------------------------------

// One decode step executing speculated experts: layer 0 routes truly; each
// later layer runs the decision predicted at the previous layer. The true
// router is still evaluated per layer, but only to fill the trace record's
// logits for metric logging.
Vec speculative_forward(const Model& model, DecodeState& state, int token,
                        Predictor& predictor, const TraceSink* sink = nullptr);

// Greedy generation. Prefill always routes truly; decode uses the predictor
// from layer 1 onward when one is given, otherwise the plain true-router path.
std::vector<int> generate(const Model& model, std::span<const int> prompt, int n_new,
                          Predictor* predictor = nullptr);

// --- offline evaluation / datasets -------------------------------------------

// Builds the predictor context for layer l of a recorded token and returns
// the prediction for layer l+1.
Predictor::Prediction predict_from_record(Predictor& predictor, const Model& model,
                                          const TraceToken& tok, int layer);

enum class DistillInput {
    kQuasiHidden, // input q_l, target layer-(l+1) true logits
    kSNext,       // input s_{l+1}, target layer-(l+1) true logits (sanity task)
};

DistillDataset build_distill_dataset(TraceReader& trace, const Model& model,
                                     const DefaultVectorTable* table, DistillInput input,
                                     std::int64_t max_tokens = 0);

// In-memory variant fed token by token.
class DistillDatasetBuilder {
public:
    DistillDatasetBuilder(const Model& model, const DefaultVectorTable* table,
                          DistillInput input, std::int64_t tokens_reserve = 0);
    void add_token(const TraceToken& tok);
    DistillDataset take();

private:
    const Model& model_;
    const DefaultVectorTable* table_;
    DistillInput input_;
    DistillDataset data_;
};

} // namespace specmoe
