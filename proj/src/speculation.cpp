#include "specmoe/speculation.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>

namespace specmoe {

using nlohmann::json;
namespace fs = std::filesystem;

DefaultVectorTable DefaultVectorTable::zeros(int layers, int experts, int hidden) {
    DefaultVectorTable t;
    t.layers = layers;
    t.experts = experts;
    t.hidden = hidden;
    t.d.assign(static_cast<std::size_t>(layers) * experts, Vec(hidden, 0.0f));
    t.counts.assign(static_cast<std::size_t>(layers) * experts, 0);
    return t;
}

DefaultVectorAccumulator::DefaultVectorAccumulator(int layers, int experts, int hidden)
    : layers_(layers), experts_(experts), hidden_(hidden),
      sums_(static_cast<std::size_t>(layers) * experts, std::vector<double>(hidden, 0.0)),
      counts_(static_cast<std::size_t>(layers) * experts, 0) {}

void DefaultVectorAccumulator::add(int layer, const LayerTraceRecord& rec) {
    if (layer < 0 || layer >= layers_)
        throw std::invalid_argument("default vectors: layer out of range");
    for (std::size_t i = 0; i < rec.decision.ids.size(); ++i) {
        const int e = rec.decision.ids[i];
        if (e < 0 || e >= experts_)
            throw std::invalid_argument("default vectors: expert index out of range");
        const Vec& out = rec.expert_outputs[i];
        if (out.size() != static_cast<std::size_t>(hidden_))
            throw std::invalid_argument("default vectors: malformed trace record");
        auto& sum = sums_[static_cast<std::size_t>(layer) * experts_ + e];
        for (int j = 0; j < hidden_; ++j) sum[j] += out[j];
        ++counts_[static_cast<std::size_t>(layer) * experts_ + e];
    }
}

void DefaultVectorAccumulator::add_token(const TraceToken& tok) {
    for (std::size_t l = 0; l < tok.layers.size(); ++l)
        add(static_cast<int>(l), tok.layers[l]);
}

DefaultVectorTable DefaultVectorAccumulator::freeze() const {
    DefaultVectorTable t = DefaultVectorTable::zeros(layers_, experts_, hidden_);
    for (std::size_t i = 0; i < sums_.size(); ++i) {
        t.counts[i] = counts_[i];
        if (counts_[i] == 0) continue;
        for (int j = 0; j < hidden_; ++j)
            t.d[i][j] = static_cast<float>(sums_[i][j] / static_cast<double>(counts_[i]));
    }
    return t;
}

DefaultVectorTable accumulate_default_vectors(TraceReader& trace) {
    const ModelConfig& cfg = trace.manifest().config;
    DefaultVectorAccumulator acc(cfg.layers, cfg.experts, cfg.hidden);
    for (std::int64_t t = 0; t < trace.tokens(); ++t) acc.add_token(trace.read_token(t));
    return acc.freeze();
}

void save_default_vectors(const DefaultVectorTable& table, const fs::path& dir) {
    fs::create_directories(dir);
    std::vector<float> packed;
    packed.reserve(table.d.size() * table.hidden);
    for (const Vec& v : table.d) packed.insert(packed.end(), v.begin(), v.end());
    const std::uint64_t dims[3] = {static_cast<std::uint64_t>(table.layers),
                                   static_cast<std::uint64_t>(table.experts),
                                   static_cast<std::uint64_t>(table.hidden)};
    moet::write(dir / "default_vectors.moet", dims, packed);
    json j{{"layers", table.layers},
           {"experts", table.experts},
           {"hidden", table.hidden},
           {"counts", table.counts}};
    std::ofstream out(dir / "counts.json");
    if (!out) throw std::runtime_error("cannot write counts.json");
    out << j.dump(2) << '\n';
}

DefaultVectorTable load_default_vectors(const fs::path& dir) {
    moet::Tensor t = moet::read(dir / "default_vectors.moet");
    if (t.dims.size() != 3)
        throw std::runtime_error("default_vectors.moet must be [L][E][H]");
    DefaultVectorTable table = DefaultVectorTable::zeros(
        static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]));
    for (std::size_t i = 0; i < table.d.size(); ++i)
        std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(i) * table.hidden,
                  t.data.begin() + static_cast<std::ptrdiff_t>(i + 1) * table.hidden,
                  table.d[i].begin());
    std::ifstream in(dir / "counts.json");
    if (!in) throw std::runtime_error("cannot read counts.json");
    json j = json::parse(in);
    table.counts = j.at("counts").get<std::vector<std::int64_t>>();
    if (table.counts.size() != table.d.size())
        throw std::runtime_error("counts.json does not match table shape");
    return table;
}

Vec layer_default(const DefaultVectorTable& table, const RouterDecision& decision, int layer) {
    if (layer < 0 || layer >= table.layers)
        throw std::invalid_argument("layer_default: layer out of range");
    Vec d(table.hidden, 0.0f);
    for (std::size_t i = 0; i < decision.ids.size(); ++i) {
        const int e = decision.ids[i];
        if (e < 0 || e >= table.experts)
            throw std::invalid_argument("layer_default: expert index out of range");
        const Vec& de = table.at(layer, e);
        const float g = decision.gates[i];
        for (int j = 0; j < table.hidden; ++j) d[j] += g * de[j];
    }
    return d;
}

Vec quasi_hidden(const Vec& r, const Vec& d, const Vec& next_norm_gain, float eps) {
    return rms_norm(add(r, d), next_norm_gain, eps);
}

// --- predictors ------------------------------------------------------------

std::string_view to_string(PredictorKind k) {
    switch (k) {
    case PredictorKind::kBaselineS: return "baseline-s";
    case PredictorKind::kRouterPF: return "router-pf";
    case PredictorKind::kEstPF: return "est-pf";
    case PredictorKind::kHybridPF: return "hybrid";
    case PredictorKind::kOracle: return "oracle";
    }
    return "?";
}

PredictorKind predictor_kind_from_string(std::string_view s) {
    if (s == "baseline-s") return PredictorKind::kBaselineS;
    if (s == "router-pf") return PredictorKind::kRouterPF;
    if (s == "est-pf") return PredictorKind::kEstPF;
    if (s == "hybrid") return PredictorKind::kHybridPF;
    if (s == "oracle") return PredictorKind::kOracle;
    throw std::invalid_argument("unknown predictor: " + std::string(s));
}

HybridMap load_hybrid_map(const fs::path& path, int layers) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read hybrid map " + path.string());
    json j = json::parse(in);
    HybridMap map(static_cast<std::size_t>(layers - 1), PredictorKind::kRouterPF);
    std::vector<bool> seen(map.size(), false);
    for (auto& [key, value] : j.items()) {
        const int l = std::stoi(key);
        if (l < 0 || l >= layers - 1)
            throw std::invalid_argument("hybrid map: layer out of range: " + key);
        const PredictorKind k = predictor_kind_from_string(value.get<std::string>());
        if (k == PredictorKind::kOracle || k == PredictorKind::kHybridPF)
            throw std::invalid_argument("hybrid map: entries must be concrete predictors");
        map[static_cast<std::size_t>(l)] = k;
        seen[static_cast<std::size_t>(l)] = true;
    }
    for (std::size_t l = 0; l < seen.size(); ++l)
        if (!seen[l])
            throw std::invalid_argument("hybrid map: missing layer " + std::to_string(l));
    return map;
}

namespace {

void check_context(const Predictor::Context& ctx, int layers) {
    if (ctx.layer < 0 || ctx.layer >= layers - 1)
        throw std::invalid_argument("predict_next: layer must be < L-1");
}

class BaselineSPredictor final : public Predictor {
public:
    std::string_view name() const override { return "baseline-s"; }
    Prediction predict_next(const Model& model, const Context& ctx) override {
        check_context(ctx, model.config.layers);
        auto [logits, decision] = router(*ctx.s, model.layers[ctx.layer + 1].gate,
                                         model.config.top_k, model.config.gating);
        return {std::move(logits), std::move(decision)};
    }
};

class RouterPFPredictor final : public Predictor {
public:
    explicit RouterPFPredictor(std::shared_ptr<const DefaultVectorTable> table)
        : table_(std::move(table)) {
        if (!table_) throw std::invalid_argument("router-pf: missing default-vector table");
    }
    std::string_view name() const override { return "router-pf"; }
    Prediction predict_next(const Model& model, const Context& ctx) override {
        check_context(ctx, model.config.layers);
        const Vec d = layer_default(*table_, *ctx.executed, ctx.layer);
        const Vec q = quasi_hidden(*ctx.r, d, model.layers[ctx.layer + 1].moe_norm_gain,
                                   model.config.eps);
        auto [logits, decision] =
            router(q, model.layers[ctx.layer + 1].gate, model.config.top_k, model.config.gating);
        return {std::move(logits), std::move(decision)};
    }

private:
    std::shared_ptr<const DefaultVectorTable> table_;
};

class EstPFPredictor final : public Predictor {
public:
    EstPFPredictor(std::shared_ptr<const DefaultVectorTable> table,
                   std::shared_ptr<const EstimatorParams> estimator)
        : table_(std::move(table)), estimator_(std::move(estimator)) {
        if (!table_) throw std::invalid_argument("est-pf: missing default-vector table");
        if (!estimator_) throw std::invalid_argument("est-pf: missing estimator");
    }
    std::string_view name() const override { return "est-pf"; }
    Prediction predict_next(const Model& model, const Context& ctx) override {
        check_context(ctx, model.config.layers);
        const Vec d = layer_default(*table_, *ctx.executed, ctx.layer);
        const Vec q = quasi_hidden(*ctx.r, d, model.layers[ctx.layer + 1].moe_norm_gain,
                                   model.config.eps);
        Vec logits = estimator_logits(*estimator_, q, ctx.layer);
        RouterDecision decision = make_decision(logits, model.config.top_k, model.config.gating);
        return {std::move(logits), std::move(decision)};
    }

private:
    std::shared_ptr<const DefaultVectorTable> table_;
    std::shared_ptr<const EstimatorParams> estimator_;
};

class HybridPFPredictor final : public Predictor {
public:
    HybridPFPredictor(std::shared_ptr<const DefaultVectorTable> table,
                      std::shared_ptr<const EstimatorParams> estimator, HybridMap map)
        : map_(std::move(map)) {
        baseline_ = make_baseline_s();
        router_pf_ = make_router_pf(table);
        bool needs_estimator = false;
        for (PredictorKind k : map_)
            if (k == PredictorKind::kEstPF) needs_estimator = true;
        if (needs_estimator) est_pf_ = make_est_pf(std::move(table), std::move(estimator));
    }
    std::string_view name() const override { return "hybrid"; }
    Prediction predict_next(const Model& model, const Context& ctx) override {
        check_context(ctx, model.config.layers);
        if (map_.size() != static_cast<std::size_t>(model.config.layers - 1))
            throw std::invalid_argument("hybrid map does not cover layers 0..L-2");
        switch (map_[static_cast<std::size_t>(ctx.layer)]) {
        case PredictorKind::kBaselineS: return baseline_->predict_next(model, ctx);
        case PredictorKind::kEstPF: return est_pf_->predict_next(model, ctx);
        default: return router_pf_->predict_next(model, ctx);
        }
    }

private:
    HybridMap map_;
    std::unique_ptr<Predictor> baseline_, router_pf_, est_pf_;
};

// Replays the true forward pass one token ahead on a private shadow state
// and serves the recorded decisions. With recorded truth in the context
// (offline trace evaluation) the shadow pass is unnecessary.
class OraclePredictor final : public Predictor {
public:
    std::string_view name() const override { return "oracle"; }

    void observe_prompt_token(const Model& model, int token) override {
        ensure_state(model);
        forward_decode(model, shadow_, token);
    }

    void begin_token(const Model& model, int token) override {
        ensure_state(model);
        decisions_.assign(model.config.layers, {});
        TraceSink sink = [&](int layer, const LayerTraceRecord& rec) {
            decisions_[static_cast<std::size_t>(layer)] = rec.decision;
            logits_[static_cast<std::size_t>(layer)] = rec.router_logits;
        };
        logits_.assign(model.config.layers, {});
        forward_decode(model, shadow_, token, &sink);
    }

    Prediction predict_next(const Model& model, const Context& ctx) override {
        check_context(ctx, model.config.layers);
        if (ctx.true_next) {
            Prediction p;
            p.decision = *ctx.true_next;
            return p;
        }
        if (decisions_.size() != static_cast<std::size_t>(model.config.layers))
            throw std::runtime_error("oracle: begin_token was not called for this step");
        Prediction p;
        p.logits = logits_[static_cast<std::size_t>(ctx.layer + 1)];
        p.decision = decisions_[static_cast<std::size_t>(ctx.layer + 1)];
        return p;
    }

private:
    void ensure_state(const Model& model) {
        if (shadow_.layers.size() != static_cast<std::size_t>(model.config.layers))
            shadow_ = DecodeState(model.config.layers);
    }

    DecodeState shadow_{0};
    std::vector<RouterDecision> decisions_;
    std::vector<Vec> logits_;
};

} // namespace

std::unique_ptr<Predictor> make_baseline_s() { return std::make_unique<BaselineSPredictor>(); }

std::unique_ptr<Predictor> make_router_pf(std::shared_ptr<const DefaultVectorTable> table) {
    return std::make_unique<RouterPFPredictor>(std::move(table));
}

std::unique_ptr<Predictor> make_est_pf(std::shared_ptr<const DefaultVectorTable> table,
                                       std::shared_ptr<const EstimatorParams> estimator) {
    return std::make_unique<EstPFPredictor>(std::move(table), std::move(estimator));
}

std::unique_ptr<Predictor> make_hybrid_pf(std::shared_ptr<const DefaultVectorTable> table,
                                          std::shared_ptr<const EstimatorParams> estimator,
                                          HybridMap map) {
    return std::make_unique<HybridPFPredictor>(std::move(table), std::move(estimator),
                                               std::move(map));
}

std::unique_ptr<Predictor> make_oracle() { return std::make_unique<OraclePredictor>(); }

std::unique_ptr<Predictor> make_predictor(PredictorKind kind, const PredictorArtifacts& art,
                                          int layers) {
    switch (kind) {
    case PredictorKind::kBaselineS: return make_baseline_s();
    case PredictorKind::kRouterPF: return make_router_pf(art.table);
    case PredictorKind::kEstPF: return make_est_pf(art.table, art.estimator);
    case PredictorKind::kHybridPF: {
        HybridMap map = art.hybrid_map
                            ? *art.hybrid_map
                            : HybridMap(static_cast<std::size_t>(layers - 1),
                                        PredictorKind::kRouterPF);
        return make_hybrid_pf(art.table, art.estimator, std::move(map));
    }
    case PredictorKind::kOracle: return make_oracle();
    }
    throw std::invalid_argument("unknown predictor kind");
}

// --- speculative decode -----------------------------------------------------

Vec speculative_forward(const Model& model, DecodeState& state, int token,
                        Predictor& predictor, const TraceSink* sink) {
    const ModelConfig& cfg = model.config;
    if (token < 0 || token >= cfg.vocab)
        throw std::invalid_argument("speculative_forward: token out of vocab");
    predictor.begin_token(model, token);

    Vec x(model.embedding.row(token), model.embedding.row(token) + cfg.hidden);
    const int position = state.position;
    RouterDecision pending; // decision predicted for the upcoming layer
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& w = model.layers[l];
        const Vec attn_in = rms_norm(x, w.attn_norm_gain, cfg.eps);
        const Vec attn_out =
            attention_step(attn_in, state.layers[l], w, position, cfg.head_dim);
        const Vec r = add(x, attn_out);
        const Vec s = rms_norm(r, w.moe_norm_gain, cfg.eps);

        // True router on the actual stream; executed only at the cold-start
        // layer, logged for metrics everywhere else.
        auto [true_logits, true_decision] = router(s, w.gate, cfg.top_k, cfg.gating);
        const RouterDecision executed = (l == 0) ? std::move(true_decision) : pending;

        if (l < cfg.layers - 1) {
            Predictor::Context ctx;
            ctx.layer = l;
            ctx.s = &s;
            ctx.r = &r;
            ctx.executed = &executed;
            pending = predictor.predict_next(model, ctx).decision;
        }

        std::vector<Vec> raw;
        const Vec m = moe_block(s, executed, w.experts, sink ? &raw : nullptr);
        x = add(r, m);
        if (sink) {
            LayerTraceRecord rec;
            rec.s = s;
            rec.r = r;
            rec.m = m;
            rec.router_logits = std::move(true_logits);
            rec.decision = executed;
            rec.expert_outputs = std::move(raw);
            (*sink)(l, rec);
        }
    }
    state.position = position + 1;
    const Vec h = rms_norm(x, model.final_norm_gain, cfg.eps);
    return linear(model.unembed, h);
}

std::vector<int> generate(const Model& model, std::span<const int> prompt, int n_new,
                          Predictor* predictor) {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    DecodeState state(model.config.layers);
    Vec logits;
    for (int tok : prompt) {
        logits = forward_decode(model, state, tok);
        if (predictor) predictor->observe_prompt_token(model, tok);
    }
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n_new));
    int next = argmax_token(logits);
    for (int i = 0; i < n_new; ++i) {
        out.push_back(next);
        if (i + 1 == n_new) break;
        logits = predictor ? speculative_forward(model, state, next, *predictor)
                           : forward_decode(model, state, next);
        next = argmax_token(logits);
    }
    return out;
}

// --- offline evaluation / datasets -------------------------------------------

Predictor::Prediction predict_from_record(Predictor& predictor, const Model& model,
                                          const TraceToken& tok, int layer) {
    const LayerTraceRecord& rec = tok.layers[static_cast<std::size_t>(layer)];
    const LayerTraceRecord& next = tok.layers[static_cast<std::size_t>(layer) + 1];
    Predictor::Context ctx;
    ctx.layer = layer;
    ctx.s = &rec.s;
    ctx.r = &rec.r;
    ctx.executed = &rec.decision;
    ctx.true_next = &next.decision;
    return predictor.predict_next(model, ctx);
}

DistillDatasetBuilder::DistillDatasetBuilder(const Model& model, const DefaultVectorTable* table,
                                             DistillInput input, std::int64_t tokens_reserve)
    : model_(model), table_(table), input_(input) {
    if (input_ == DistillInput::kQuasiHidden && table_ == nullptr)
        throw std::invalid_argument("distill dataset: quasi-hidden inputs need a table");
    data_.d = model.config.hidden;
    data_.experts = model.config.experts;
    data_.layers_predicting = model.config.layers - 1;
    if (data_.layers_predicting < 1)
        throw std::invalid_argument("distill dataset: need at least 2 layers");
    if (tokens_reserve > 0) {
        data_.inputs.reserve(static_cast<std::size_t>(tokens_reserve) *
                             data_.layers_predicting * data_.d);
        data_.targets.reserve(static_cast<std::size_t>(tokens_reserve) *
                              data_.layers_predicting * data_.experts);
    }
}

void DistillDatasetBuilder::add_token(const TraceToken& tok) {
    for (int l = 0; l + 1 < model_.config.layers; ++l) {
        const LayerTraceRecord& rec = tok.layers[static_cast<std::size_t>(l)];
        const LayerTraceRecord& next = tok.layers[static_cast<std::size_t>(l) + 1];
        if (input_ == DistillInput::kQuasiHidden) {
            const Vec d = layer_default(*table_, rec.decision, l);
            const Vec q =
                quasi_hidden(rec.r, d, model_.layers[l + 1].moe_norm_gain, model_.config.eps);
            data_.inputs.insert(data_.inputs.end(), q.begin(), q.end());
        } else {
            data_.inputs.insert(data_.inputs.end(), next.s.begin(), next.s.end());
        }
        data_.targets.insert(data_.targets.end(), next.router_logits.begin(),
                             next.router_logits.end());
    }
    ++data_.tokens;
}

DistillDataset DistillDatasetBuilder::take() { return std::move(data_); }

DistillDataset build_distill_dataset(TraceReader& trace, const Model& model,
                                     const DefaultVectorTable* table, DistillInput input,
                                     std::int64_t max_tokens) {
    std::int64_t n = trace.tokens();
    if (max_tokens > 0) n = std::min(n, max_tokens);
    DistillDatasetBuilder builder(model, table, input, n);
    for (std::int64_t t = 0; t < n; ++t) builder.add_token(trace.read_token(t));
    return builder.take();
}

} // namespace specmoe
