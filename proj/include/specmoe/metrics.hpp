// metrics.hpp - recall@k, rank alignment, drift curves, and the running-mean
// aggregation behind every CSV report.

#pragma once

#include "specmoe/model.hpp"
#include "specmoe/speculation.hpp"
#include "specmoe/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace specmoe {

// |pred ids  truth ids| / k. Both decisions must share k.
double recall_at_k(const RouterDecision& pred, const RouterDecision& truth);

// match[i] := pred.ids[i] == truth.ids[i] for ranks 1..k (both decisions are
// sorted by descending gate weight by construction).
std::vector<bool> rank_alignment(const RouterDecision& pred, const RouterDecision& truth);

// Numerically stable streaming mean.
class RunningMean {
public:
    void add(double x) {
        ++n_;
        mean_ += (x - mean_) / static_cast<double>(n_);
    }
    double mean() const { return mean_; }
    std::int64_t count() const { return n_; }
    void merge(const RunningMean& other) {
        if (other.n_ == 0) return;
        const std::int64_t total = n_ + other.n_;
        mean_ += (other.mean_ - mean_) * static_cast<double>(other.n_) /
                 static_cast<double>(total);
        n_ = total;
    }

private:
    double mean_ = 0.0;
    std::int64_t n_ = 0;
};

struct LayerReport {
    int layer = 0;
    RunningMean recall;
    RunningMean cos_quasi;
    RunningMean cos_baseline;
    std::vector<RunningMean> rank_match; // size k
};

// Ordered (layer, metric) -> mean aggregation with deterministic output.
class Aggregator {
public:
    void add(int layer, const std::string& metric, double value);
    void merge(const Aggregator& other);
    const std::map<std::pair<int, std::string>, RunningMean>& cells() const { return cells_; }
    void write_csv(const std::filesystem::path& path, const std::string& header,
                   const std::vector<std::string>& metrics) const;

private:
    std::map<std::pair<int, std::string>, RunningMean> cells_;
};

struct DriftReport {
    std::vector<double> cos_quasi;    // layers 0..L-2
    std::vector<double> cos_baseline; // layers 0..L-2
};

// Per-layer mean cosine(q_l, s_{l+1}) and cosine(s_l, s_{l+1}).
DriftReport drift_report(TraceReader& trace, const DefaultVectorTable& table,
                         const Model& model);

// Streaming accumulation version used by the trace walkers.
class DriftAccumulator {
public:
    DriftAccumulator(const Model& model, const DefaultVectorTable& table);
    void add_token(const TraceToken& tok);
    void merge(const DriftAccumulator& other);
    DriftReport report() const;

private:
    const Model& model_;
    const DefaultVectorTable& table_;
    std::vector<RunningMean> quasi_, baseline_;
};

struct HitRateRow {
    int layer;
    std::string predictor;
    double recall;
};

struct RankAlignRow {
    int layer;
    int rank; // 1-based
    double match_rate;
};

// Streaming evaluation of predictors against the recorded truth of a trace:
// per-layer recall@k for every predictor, per-rank alignment for the first,
// and both drift curves.
class TraceEvaluator {
public:
    TraceEvaluator(const Model& model, const DefaultVectorTable& table,
                   std::vector<std::pair<std::string, Predictor*>> predictors);

    void add_token(const TraceToken& tok);
    void merge(const TraceEvaluator& other);

    DriftReport drift() const;
    std::vector<HitRateRow> hit_rate_rows() const;   // requested predictor order
    std::vector<RankAlignRow> rank_align_rows() const;
    double mean_recall(const std::string& predictor) const;

private:
    const Model& model_;
    DriftAccumulator drift_;
    std::vector<std::pair<std::string, Predictor*>> predictors_;
    // recall_[p][l], rank_[r][l] for the first predictor
    std::vector<std::vector<RunningMean>> recall_;
    std::vector<std::vector<RunningMean>> rank_;
};

// 6-significant-digit float formatting used by every CSV.
std::string format_sig6(double v);

void write_drift_csv(const std::filesystem::path& path, const DriftReport& report);
void write_hit_rate_csv(const std::filesystem::path& path, const std::vector<HitRateRow>& rows);
void write_rank_align_csv(const std::filesystem::path& path,
                          const std::vector<RankAlignRow>& rows);

} // namespace specmoe
