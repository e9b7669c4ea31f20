#include "specmoe/model.hpp"

#include "specmoe/moet.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace specmoe {

using nlohmann::json;

std::string_view to_string(GatingOrder g) {
    return g == GatingOrder::kSoftmaxThenTopK ? "softmax-topk-renorm" : "topk-softmax";
}

GatingOrder gating_order_from_string(std::string_view s) {
    if (s == "softmax-topk-renorm") return GatingOrder::kSoftmaxThenTopK;
    if (s == "topk-softmax") return GatingOrder::kTopKThenSoftmax;
    throw std::invalid_argument("unknown gating order: " + std::string(s));
}

void ModelConfig::validate() const {
    if (layers < 1) throw std::invalid_argument("config: L must be >= 1");
    if (experts < 1) throw std::invalid_argument("config: E must be >= 1");
    if (top_k < 1 || top_k > experts)
        throw std::invalid_argument("config: k must satisfy 1 <= k <= E");
    if (hidden < 1) throw std::invalid_argument("config: H must be >= 1");
    if (expert_hidden < 1) throw std::invalid_argument("config: H_moe must be >= 1");
    if (vocab < 1) throw std::invalid_argument("config: vocab must be >= 1");
    if (head_dim < 1) throw std::invalid_argument("config: head_dim must be >= 1");
    if (head_dim % 2 != 0)
        throw std::invalid_argument("config: head_dim must be even for rotary pairs");
    if (!(eps > 0.0f)) throw std::invalid_argument("config: eps must be > 0");
}

std::uint64_t ModelConfig::expert_param_bytes() const {
    return static_cast<std::uint64_t>(layers) * experts * 3ull * hidden * expert_hidden *
           sizeof(float);
}

std::string ModelConfig::to_json() const {
    json j{{"layers", layers},
           {"experts", experts},
           {"top_k", top_k},
           {"hidden", hidden},
           {"expert_hidden", expert_hidden},
           {"vocab", vocab},
           {"head_dim", head_dim},
           {"eps", eps},
           {"seed", seed},
           {"gating", std::string(to_string(gating))}};
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.experts = j.at("experts").get<int>();
    c.top_k = j.at("top_k").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.expert_hidden = j.at("expert_hidden").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.eps = j.at("eps").get<float>();
    c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("gating"))
        c.gating = gating_order_from_string(j.at("gating").get<std::string>());
    return c;
}

ModelConfig preset_config(std::string_view name) {
    ModelConfig c;
    if (name == "toy") {
        c.layers = 8;
        c.experts = 16;
        c.top_k = 4;
        c.hidden = 64;
        c.expert_hidden = 128;
        c.vocab = 256;
        c.head_dim = 32;
    } else if (name == "toy-large") {
        c.layers = 12;
        c.experts = 32;
        c.top_k = 4;
        c.hidden = 128;
        c.expert_hidden = 256;
        c.vocab = 256;
        c.head_dim = 64;
    } else {
        throw std::invalid_argument("unknown preset: " + std::string(name));
    }
    return c;
}

// --- construction ----------------------------------------------------------

namespace {

// Every tensor draws from its own labeled stream, so layout changes never
// shift other tensors' values.
void init_matrix(Mat& m, std::uint64_t seed, const std::string& label, float stddev) {
    Rng rng(derive_seed(seed, label));
    rng.fill_gaussian(m.data, stddev);
}

} // namespace

Model build_model(const ModelConfig& config) {
    config.validate();
    Model model;
    model.config = config;
    const float stddev = 0.4f / std::sqrt(static_cast<float>(config.hidden));
    const auto H = static_cast<std::size_t>(config.hidden);
    const auto D = static_cast<std::size_t>(config.head_dim);
    const auto Hm = static_cast<std::size_t>(config.expert_hidden);

    model.embedding = Mat(config.vocab, H);
    init_matrix(model.embedding, config.seed, "embedding", stddev);
    model.unembed = Mat(config.vocab, H);
    init_matrix(model.unembed, config.seed, "unembed", stddev);
    // Norm gains start at one; zero-mean gains would crush the stream the
    // norms are supposed to keep at unit RMS.
    model.final_norm_gain.assign(H, 1.0f);

    model.layers.resize(config.layers);
    for (int l = 0; l < config.layers; ++l) {
        LayerWeights& w = model.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        w.attn_norm_gain.assign(H, 1.0f);
        w.moe_norm_gain.assign(H, 1.0f);
        w.wq = Mat(D, H);
        w.wk = Mat(D, H);
        w.wv = Mat(D, H);
        w.wo = Mat(H, D);
        init_matrix(w.wq, config.seed, p + "wq", stddev);
        init_matrix(w.wk, config.seed, p + "wk", stddev);
        init_matrix(w.wv, config.seed, p + "wv", stddev);
        init_matrix(w.wo, config.seed, p + "wo", stddev);
        w.gate = Mat(config.experts, H);
        init_matrix(w.gate, config.seed, p + "gate", stddev);
        w.experts.resize(config.experts);
        for (int e = 0; e < config.experts; ++e) {
            const std::string ep = p + "expert" + std::to_string(e) + ".";
            ExpertWeights& x = w.experts[e];
            x.w_gate = Mat(Hm, H);
            x.w_up = Mat(Hm, H);
            x.w_down = Mat(H, Hm);
            init_matrix(x.w_gate, config.seed, ep + "w_gate", stddev);
            init_matrix(x.w_up, config.seed, ep + "w_up", stddev);
            init_matrix(x.w_down, config.seed, ep + "w_down", stddev);
        }
    }
    return model;
}

// --- bundle I/O -------------------------------------------------------------

namespace {

namespace fs = std::filesystem;

void write_mat(const fs::path& dir, const std::string& name, const Mat& m) {
    const std::uint64_t dims[2] = {m.rows, m.cols};
    moet::write(dir / (name + ".moet"), dims, m.data);
}

void write_vec(const fs::path& dir, const std::string& name, const Vec& v) {
    const std::uint64_t dims[1] = {v.size()};
    moet::write(dir / (name + ".moet"), dims, v);
}

Mat read_mat(const fs::path& dir, const std::string& name) {
    moet::Tensor t = moet::read(dir / (name + ".moet"));
    if (t.dims.size() != 2)
        throw std::runtime_error("model bundle: " + name + " is not a matrix");
    Mat m(t.dims[0], t.dims[1]);
    m.data = std::move(t.data);
    return m;
}

Vec read_vec(const fs::path& dir, const std::string& name) {
    moet::Tensor t = moet::read(dir / (name + ".moet"));
    if (t.dims.size() != 1)
        throw std::runtime_error("model bundle: " + name + " is not a vector");
    return t.data;
}

} // namespace

void save_model(const Model& model, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream cfg(dir / "config.json");
    if (!cfg) throw std::runtime_error("cannot write " + (dir / "config.json").string());
    cfg << model.config.to_json() << '\n';
    cfg.close();

    write_mat(dir, "embedding", model.embedding);
    write_mat(dir, "unembed", model.unembed);
    write_vec(dir, "final_norm_gain", model.final_norm_gain);
    for (int l = 0; l < model.config.layers; ++l) {
        const LayerWeights& w = model.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        write_vec(dir, p + "attn_norm_gain", w.attn_norm_gain);
        write_vec(dir, p + "moe_norm_gain", w.moe_norm_gain);
        write_mat(dir, p + "wq", w.wq);
        write_mat(dir, p + "wk", w.wk);
        write_mat(dir, p + "wv", w.wv);
        write_mat(dir, p + "wo", w.wo);
        write_mat(dir, p + "gate", w.gate);
        for (int e = 0; e < model.config.experts; ++e) {
            const std::string ep = p + "expert" + std::to_string(e) + ".";
            write_mat(dir, ep + "w_gate", w.experts[e].w_gate);
            write_mat(dir, ep + "w_up", w.experts[e].w_up);
            write_mat(dir, ep + "w_down", w.experts[e].w_down);
        }
    }
}

Model load_model(const std::filesystem::path& dir) {
    std::ifstream cfg(dir / "config.json");
    if (!cfg) throw std::runtime_error("cannot read " + (dir / "config.json").string());
    std::string text((std::istreambuf_iterator<char>(cfg)), std::istreambuf_iterator<char>());
    Model model;
    model.config = ModelConfig::from_json(text);
    model.config.validate();

    model.embedding = read_mat(dir, "embedding");
    model.unembed = read_mat(dir, "unembed");
    model.final_norm_gain = read_vec(dir, "final_norm_gain");
    model.layers.resize(model.config.layers);
    for (int l = 0; l < model.config.layers; ++l) {
        LayerWeights& w = model.layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        w.attn_norm_gain = read_vec(dir, p + "attn_norm_gain");
        w.moe_norm_gain = read_vec(dir, p + "moe_norm_gain");
        w.wq = read_mat(dir, p + "wq");
        w.wk = read_mat(dir, p + "wk");
        w.wv = read_mat(dir, p + "wv");
        w.wo = read_mat(dir, p + "wo");
        w.gate = read_mat(dir, p + "gate");
        w.experts.resize(model.config.experts);
        for (int e = 0; e < model.config.experts; ++e) {
            const std::string ep = p + "expert" + std::to_string(e) + ".";
            w.experts[e].w_gate = read_mat(dir, ep + "w_gate");
            w.experts[e].w_up = read_mat(dir, ep + "w_up");
            w.experts[e].w_down = read_mat(dir, ep + "w_down");
        }
    }
    return model;
}

// --- forward ops -------------------------------------------------------------

RouterDecision make_decision(const Vec& logits, int k, GatingOrder order) {
    RouterDecision d;
    if (order == GatingOrder::kSoftmaxThenTopK) {
        const Vec probs = softmax(logits);
        TopK t = top_k(probs, k);
        d.ids = std::move(t.indices);
        float total = 0.0f;
        for (float v : t.values) total += v;
        d.gates.resize(k);
        for (int i = 0; i < k; ++i) d.gates[i] = t.values[i] / total;
    } else {
        TopK t = top_k(logits, k);
        d.ids = std::move(t.indices);
        d.gates = softmax(t.values);
    }
    return d;
}

std::pair<Vec, RouterDecision> router(const Vec& x_norm, const Mat& gate, int k,
                                      GatingOrder order) {
    Vec logits = linear(gate, x_norm);
    RouterDecision d = make_decision(logits, k, order);
    return {std::move(logits), std::move(d)};
}

Vec expert_ffn(const Vec& x_norm, const ExpertWeights& w) {
    Vec g = linear(w.w_gate, x_norm);
    Vec u = linear(w.w_up, x_norm);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = silu(g[i]) * u[i];
    return linear(w.w_down, g);
}

Vec moe_block(const Vec& x_norm, const RouterDecision& decision,
              const std::vector<ExpertWeights>& experts, std::vector<Vec>* raw_outputs) {
    Vec out(x_norm.size(), 0.0f);
    if (raw_outputs) raw_outputs->clear();
    for (std::size_t i = 0; i < decision.ids.size(); ++i) {
        const int e = decision.ids[i];
        if (e < 0 || static_cast<std::size_t>(e) >= experts.size())
            throw std::invalid_argument("moe_block: expert index out of range");
        Vec y = expert_ffn(x_norm, experts[e]);
        const float g = decision.gates[i];
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += g * y[j];
        if (raw_outputs) raw_outputs->push_back(std::move(y));
    }
    return out;
}

namespace {

// Rotary embedding over (2i, 2i+1) pairs, base 10000.
void apply_rope(Vec& v, int position, int head_dim) {
    for (int i = 0; i < head_dim / 2; ++i) {
        const double theta =
            std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(position) * theta;
        const float c = static_cast<float>(std::cos(angle));
        const float s = static_cast<float>(std::sin(angle));
        const float x0 = v[2 * i];
        const float x1 = v[2 * i + 1];
        v[2 * i] = x0 * c - x1 * s;
        v[2 * i + 1] = x0 * s + x1 * c;
    }
}

} // namespace

Vec attention_step(const Vec& x_norm, DecodeState::LayerKV& kv, const LayerWeights& w,
                   int position, int head_dim) {
    if (kv.keys.size() != static_cast<std::size_t>(position))
        throw std::invalid_argument("attention_step: state inconsistent with position");
    Vec q = linear(w.wq, x_norm);
    Vec k = linear(w.wk, x_norm);
    Vec v = linear(w.wv, x_norm);
    apply_rope(q, position, head_dim);
    apply_rope(k, position, head_dim);
    kv.keys.push_back(std::move(k));
    kv.values.push_back(std::move(v));

    const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(head_dim));
    Vec scores(kv.keys.size());
    for (std::size_t j = 0; j < kv.keys.size(); ++j) {
        float acc = 0.0f;
        const Vec& kj = kv.keys[j];
        for (int i = 0; i < head_dim; ++i) acc += q[i] * kj[i];
        scores[j] = acc * inv_sqrt_d;
    }
    const Vec weights = softmax(scores);
    Vec ctx(head_dim, 0.0f);
    for (std::size_t j = 0; j < kv.values.size(); ++j) {
        const float a = weights[j];
        const Vec& vj = kv.values[j];
        for (int i = 0; i < head_dim; ++i) ctx[i] += a * vj[i];
    }
    return linear(w.wo, ctx);
}

Vec forward_decode(const Model& model, DecodeState& state, int token, const TraceSink* sink) {
    const ModelConfig& cfg = model.config;
    if (token < 0 || token >= cfg.vocab)
        throw std::invalid_argument("forward_decode: token out of vocab");
    if (state.layers.size() != static_cast<std::size_t>(cfg.layers))
        throw std::invalid_argument("forward_decode: state has wrong layer count");

    Vec x(model.embedding.row(token), model.embedding.row(token) + cfg.hidden);
    const int position = state.position;
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& w = model.layers[l];
        const Vec attn_in = rms_norm(x, w.attn_norm_gain, cfg.eps);
        const Vec attn_out =
            attention_step(attn_in, state.layers[l], w, position, cfg.head_dim);
        const Vec r = add(x, attn_out);
        const Vec s = rms_norm(r, w.moe_norm_gain, cfg.eps);
        auto [logits, decision] = router(s, w.gate, cfg.top_k, cfg.gating);
        std::vector<Vec> raw;
        const Vec m = moe_block(s, decision, w.experts, sink ? &raw : nullptr);
        x = add(r, m);
        if (sink) {
            LayerTraceRecord rec;
            rec.s = s;
            rec.r = r;
            rec.m = m;
            rec.router_logits = std::move(logits);
            rec.decision = std::move(decision);
            rec.expert_outputs = std::move(raw);
            (*sink)(l, rec);
        }
    }
    state.position = position + 1;
    const Vec h = rms_norm(x, model.final_norm_gain, cfg.eps);
    return linear(model.unembed, h);
}

int argmax_token(const Vec& logits) {
    int best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = static_cast<int>(i);
    return best;
}

} // namespace specmoe
