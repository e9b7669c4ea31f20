#include "specmoe/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace specmoe {

double recall_at_k(const RouterDecision& pred, const RouterDecision& truth) {
    if (pred.ids.size() != truth.ids.size())
        throw std::invalid_argument("recall_at_k: k mismatch");
    int hits = 0;
    for (int a : pred.ids)
        for (int b : truth.ids)
            if (a == b) {
                ++hits;
                break;
            }
    return static_cast<double>(hits) / static_cast<double>(pred.ids.size());
}

std::vector<bool> rank_alignment(const RouterDecision& pred, const RouterDecision& truth) {
    if (pred.ids.size() != truth.ids.size())
        throw std::invalid_argument("rank_alignment: k mismatch");
    std::vector<bool> match(pred.ids.size());
    for (std::size_t i = 0; i < pred.ids.size(); ++i) match[i] = pred.ids[i] == truth.ids[i];
    return match;
}

void Aggregator::add(int layer, const std::string& metric, double value) {
    cells_[{layer, metric}].add(value);
}

void Aggregator::merge(const Aggregator& other) {
    for (const auto& [key, rm] : other.cells_) cells_[key].merge(rm);
}

void Aggregator::write_csv(const std::filesystem::path& path, const std::string& header,
                           const std::vector<std::string>& metrics) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << header << '\n';
    int max_layer = -1;
    for (const auto& [key, rm] : cells_) max_layer = std::max(max_layer, key.first);
    for (int l = 0; l <= max_layer; ++l) {
        bool any = false;
        for (const std::string& m : metrics)
            if (cells_.count({l, m})) any = true;
        if (!any) continue;
        out << l;
        for (const std::string& m : metrics) {
            auto it = cells_.find({l, m});
            out << ',' << (it == cells_.end() ? "" : format_sig6(it->second.mean()));
        }
        out << '\n';
    }
}

DriftAccumulator::DriftAccumulator(const Model& model, const DefaultVectorTable& table)
    : model_(model), table_(table),
      quasi_(static_cast<std::size_t>(model.config.layers - 1)),
      baseline_(static_cast<std::size_t>(model.config.layers - 1)) {
    if (model.config.layers < 2)
        throw std::invalid_argument("drift_report: need at least 2 layers");
}

void DriftAccumulator::add_token(const TraceToken& tok) {
    for (int l = 0; l + 1 < model_.config.layers; ++l) {
        const LayerTraceRecord& rec = tok.layers[static_cast<std::size_t>(l)];
        const LayerTraceRecord& next = tok.layers[static_cast<std::size_t>(l) + 1];
        const Vec d = layer_default(table_, rec.decision, l);
        const Vec q =
            quasi_hidden(rec.r, d, model_.layers[l + 1].moe_norm_gain, model_.config.eps);
        quasi_[static_cast<std::size_t>(l)].add(cosine_similarity(q, next.s));
        baseline_[static_cast<std::size_t>(l)].add(cosine_similarity(rec.s, next.s));
    }
}

void DriftAccumulator::merge(const DriftAccumulator& other) {
    for (std::size_t l = 0; l < quasi_.size(); ++l) {
        quasi_[l].merge(other.quasi_[l]);
        baseline_[l].merge(other.baseline_[l]);
    }
}

DriftReport DriftAccumulator::report() const {
    DriftReport rep;
    for (const RunningMean& m : quasi_) rep.cos_quasi.push_back(m.mean());
    for (const RunningMean& m : baseline_) rep.cos_baseline.push_back(m.mean());
    return rep;
}

DriftReport drift_report(TraceReader& trace, const DefaultVectorTable& table,
                         const Model& model) {
    if (trace.tokens() < 1) throw std::invalid_argument("drift_report: empty trace");
    DriftAccumulator acc(model, table);
    for (std::int64_t t = 0; t < trace.tokens(); ++t) acc.add_token(trace.read_token(t));
    return acc.report();
}

TraceEvaluator::TraceEvaluator(const Model& model, const DefaultVectorTable& table,
                               std::vector<std::pair<std::string, Predictor*>> predictors)
    : model_(model), drift_(model, table), predictors_(std::move(predictors)),
      recall_(predictors_.size(),
              std::vector<RunningMean>(static_cast<std::size_t>(model.config.layers - 1))),
      rank_(static_cast<std::size_t>(model.config.top_k),
            std::vector<RunningMean>(static_cast<std::size_t>(model.config.layers - 1))) {}

void TraceEvaluator::add_token(const TraceToken& tok) {
    drift_.add_token(tok);
    for (std::size_t p = 0; p < predictors_.size(); ++p) {
        for (int l = 0; l + 1 < model_.config.layers; ++l) {
            const auto pred =
                predict_from_record(*predictors_[p].second, model_, tok, l);
            const RouterDecision& truth =
                tok.layers[static_cast<std::size_t>(l) + 1].decision;
            recall_[p][static_cast<std::size_t>(l)].add(recall_at_k(pred.decision, truth));
            if (p == 0) {
                const std::vector<bool> match = rank_alignment(pred.decision, truth);
                for (std::size_t r = 0; r < match.size(); ++r)
                    rank_[r][static_cast<std::size_t>(l)].add(match[r] ? 1.0 : 0.0);
            }
        }
    }
}

void TraceEvaluator::merge(const TraceEvaluator& other) {
    for (std::size_t p = 0; p < recall_.size(); ++p)
        for (std::size_t l = 0; l < recall_[p].size(); ++l)
            recall_[p][l].merge(other.recall_[p][l]);
    for (std::size_t r = 0; r < rank_.size(); ++r)
        for (std::size_t l = 0; l < rank_[r].size(); ++l)
            rank_[r][l].merge(other.rank_[r][l]);
    drift_.merge(other.drift_);
}

DriftReport TraceEvaluator::drift() const { return drift_.report(); }

std::vector<HitRateRow> TraceEvaluator::hit_rate_rows() const {
    std::vector<HitRateRow> rows;
    for (std::size_t p = 0; p < predictors_.size(); ++p)
        for (std::size_t l = 0; l < recall_[p].size(); ++l)
            rows.push_back({static_cast<int>(l), predictors_[p].first, recall_[p][l].mean()});
    return rows;
}

std::vector<RankAlignRow> TraceEvaluator::rank_align_rows() const {
    if (rank_.empty()) return {};
    std::vector<RankAlignRow> rows;
    for (std::size_t l = 0; l < rank_[0].size(); ++l)
        for (std::size_t r = 0; r < rank_.size(); ++r)
            rows.push_back({static_cast<int>(l), static_cast<int>(r) + 1, rank_[r][l].mean()});
    return rows;
}

double TraceEvaluator::mean_recall(const std::string& predictor) const {
    for (std::size_t p = 0; p < predictors_.size(); ++p) {
        if (predictors_[p].first != predictor) continue;
        RunningMean total;
        for (const RunningMean& m : recall_[p]) total.merge(m);
        return total.mean();
    }
    throw std::invalid_argument("mean_recall: unknown predictor " + predictor);
}

std::string format_sig6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

void write_drift_csv(const std::filesystem::path& path, const DriftReport& report) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "layer,cos_quasi,cos_baseline\n";
    for (std::size_t l = 0; l < report.cos_quasi.size(); ++l)
        out << l << ',' << format_sig6(report.cos_quasi[l]) << ','
            << format_sig6(report.cos_baseline[l]) << '\n';
}

void write_hit_rate_csv(const std::filesystem::path& path,
                        const std::vector<HitRateRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "layer,predictor,recall_at_k\n";
    for (const HitRateRow& r : rows)
        out << r.layer << ',' << r.predictor << ',' << format_sig6(r.recall) << '\n';
}

void write_rank_align_csv(const std::filesystem::path& path,
                          const std::vector<RankAlignRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "layer,rank,match_rate\n";
    for (const RankAlignRow& r : rows)
        out << r.layer << ',' << r.rank << ',' << format_sig6(r.match_rate) << '\n';
}

} // namespace specmoe
