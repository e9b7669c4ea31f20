#include "specmoe/estimator.hpp"

#include "specmoe/moet.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace specmoe {

using nlohmann::json;
namespace fs = std::filesystem;

void EstimatorConfig::validate() const {
    if (d < 1) throw std::invalid_argument("estimator: d must be >= 1");
    if (m <= 1 || n <= 1) throw std::invalid_argument("estimator: m and n must be > 1");
    if (d % m != 0) throw std::invalid_argument("estimator: d must be divisible by m");
    if (latent() < 1) throw std::invalid_argument("estimator: latent width must be >= 1");
    if (experts < 1) throw std::invalid_argument("estimator: E must be >= 1");
    if (layers < 1) throw std::invalid_argument("estimator: L must be >= 1");
    if (!(eps > 0.0f)) throw std::invalid_argument("estimator: eps must be > 0");
}

std::uint64_t EstimatorConfig::param_count() const {
    const std::uint64_t dm = static_cast<std::uint64_t>(latent());
    return static_cast<std::uint64_t>(d) * dm + static_cast<std::uint64_t>(layers) * dm +
           2ull * n * dm * dm + 2ull * dm + dm * experts;
}

std::string EstimatorConfig::to_json() const {
    json j{{"d", d},       {"m", m},           {"n", n},    {"experts", experts},
           {"layers", layers}, {"eps", eps}, {"seed", seed}};
    return j.dump(2);
}

EstimatorConfig EstimatorConfig::from_json(const std::string& text) {
    json j = json::parse(text);
    EstimatorConfig c;
    c.d = j.at("d").get<int>();
    c.m = j.at("m").get<int>();
    c.n = j.at("n").get<int>();
    c.experts = j.at("experts").get<int>();
    c.layers = j.at("layers").get<int>();
    c.eps = j.at("eps").get<float>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

template <typename S>
EstimatorParamsT<S> init_estimator_params(const EstimatorConfig& config) {
    config.validate();
    EstimatorParamsT<S> p;
    p.config = config;
    p.flat.assign(p.total(), S(0));

    auto fill = [&](S* dst, std::size_t count, const char* label, double stddev) {
        Rng rng(derive_seed(config.seed, std::string("estimator.") + label));
        for (std::size_t i = 0; i < count; ++i)
            dst[i] = static_cast<S>(rng.next_gaussian() * stddev);
    };
    const auto dm = static_cast<std::size_t>(config.latent());
    const auto mlp = static_cast<std::size_t>(config.mlp_width());
    fill(p.a(), dm * config.d, "a", 1.0 / std::sqrt(static_cast<double>(config.d)));
    fill(p.pos(0), static_cast<std::size_t>(config.layers) * dm, "pos", 0.02);
    fill(p.b(), mlp * dm, "b", 1.0 / std::sqrt(static_cast<double>(dm)));
    fill(p.c(), dm * mlp, "c", 1.0 / std::sqrt(static_cast<double>(mlp)));
    fill(p.w_head(), static_cast<std::size_t>(config.experts) * dm, "w_head",
         1.0 / std::sqrt(static_cast<double>(dm)));
    for (std::size_t i = 0; i < dm; ++i) p.ln_gain()[i] = S(1);
    return p;
}

namespace {

template <typename S>
void softmax_inplace(std::vector<S>& v) {
    S mx = v[0];
    for (S x : v) mx = std::max(mx, x);
    S z = S(0);
    for (S& x : v) {
        x = std::exp(x - mx);
        z += x;
    }
    for (S& x : v) x /= z;
}

} // namespace

template <typename S>
void estimator_forward(const EstimatorParamsT<S>& params, std::span<const S> q, int layer,
                       EstimatorCache<S>& cache) {
    const EstimatorConfig& cfg = params.config;
    if (layer < 0 || layer >= cfg.layers)
        throw std::invalid_argument("estimator: layer out of range");
    if (q.size() != static_cast<std::size_t>(cfg.d))
        throw std::invalid_argument("estimator: input width mismatch");
    const int dm = cfg.latent();
    const int mlp = cfg.mlp_width();

    cache.layer = layer;
    cache.q.assign(q.begin(), q.end());
    cache.z.assign(dm, S(0));
    const S* pos = params.pos(layer);
    for (int j = 0; j < dm; ++j) {
        const S* row = params.a() + static_cast<std::size_t>(j) * cfg.d;
        S acc = S(0);
        for (int i = 0; i < cfg.d; ++i) acc += row[i] * q[i];
        cache.z[j] = acc + pos[j];
    }

    cache.u.assign(mlp, S(0));
    for (int pidx = 0; pidx < mlp; ++pidx) {
        const S* row = params.b() + static_cast<std::size_t>(pidx) * dm;
        S acc = S(0);
        for (int j = 0; j < dm; ++j) acc += row[j] * cache.z[j];
        cache.u[pidx] = acc;
    }
    cache.act.resize(mlp);
    for (int pidx = 0; pidx < mlp; ++pidx) {
        const S u = cache.u[pidx];
        cache.act[pidx] = u / (S(1) + std::exp(-u));
    }

    cache.h = cache.z;
    for (int j = 0; j < dm; ++j) {
        const S* row = params.c() + static_cast<std::size_t>(j) * mlp;
        S acc = S(0);
        for (int pidx = 0; pidx < mlp; ++pidx) acc += row[pidx] * cache.act[pidx];
        cache.h[j] += acc;
    }

    // Mean/variance layernorm (distinct from the model's RMS norm).
    S mean = S(0);
    for (int j = 0; j < dm; ++j) mean += cache.h[j];
    mean /= S(dm);
    S var = S(0);
    for (int j = 0; j < dm; ++j) {
        const S c = cache.h[j] - mean;
        var += c * c;
    }
    var /= S(dm);
    cache.inv_std = S(1) / std::sqrt(var + static_cast<S>(cfg.eps));
    cache.xhat.resize(dm);
    for (int j = 0; j < dm; ++j) cache.xhat[j] = (cache.h[j] - mean) * cache.inv_std;

    cache.logits.assign(cfg.experts, S(0));
    for (int e = 0; e < cfg.experts; ++e) {
        const S* row = params.w_head() + static_cast<std::size_t>(e) * dm;
        S acc = S(0);
        for (int j = 0; j < dm; ++j)
            acc += row[j] * (params.ln_gain()[j] * cache.xhat[j] + params.ln_bias()[j]);
        cache.logits[e] = acc;
    }
    cache.probs = cache.logits;
    softmax_inplace(cache.probs);
}

Vec estimator_logits(const EstimatorParams& params, const Vec& q, int layer) {
    EstimatorCache<float> cache;
    estimator_forward<float>(params, q, layer, cache);
    return Vec(cache.logits.begin(), cache.logits.end());
}

template <typename S>
S distill_loss(const EstimatorParamsT<S>& params, std::span<const S> q, int layer,
               std::span<const S> true_logits) {
    EstimatorCache<S> cache;
    estimator_forward(params, q, layer, cache);
    std::vector<S> t(true_logits.begin(), true_logits.end());
    softmax_inplace(t);
    S kl = S(0);
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] <= S(0)) continue;
        kl += t[i] * (std::log(t[i]) - std::log(cache.probs[i]));
    }
    return kl;
}

template <typename S>
void estimator_backward(const EstimatorParamsT<S>& params, const EstimatorCache<S>& cache,
                        std::span<const S> true_logits, std::span<S> grad, S weight) {
    const EstimatorConfig& cfg = params.config;
    if (grad.size() != params.total())
        throw std::invalid_argument("estimator: gradient buffer size mismatch");
    const int dm = cfg.latent();
    const int mlp = cfg.mlp_width();

    std::vector<S> t(true_logits.begin(), true_logits.end());
    softmax_inplace(t);

    // d KL / d logits = probs - targets.
    std::vector<S> g_logits(cfg.experts);
    for (int e = 0; e < cfg.experts; ++e) g_logits[e] = weight * (cache.probs[e] - t[e]);

    EstimatorParamsT<S> g; // offset helper over the caller's buffer
    g.config = cfg;

    std::vector<S> g_y(dm, S(0));
    S* grad_w_head = grad.data() + g.w_head_off();
    for (int e = 0; e < cfg.experts; ++e) {
        const S* row = params.w_head() + static_cast<std::size_t>(e) * dm;
        S* grow = grad_w_head + static_cast<std::size_t>(e) * dm;
        const S ge = g_logits[e];
        for (int j = 0; j < dm; ++j) {
            const S y = params.ln_gain()[j] * cache.xhat[j] + params.ln_bias()[j];
            grow[j] += ge * y;
            g_y[j] += row[j] * ge;
        }
    }

    S* grad_gain = grad.data() + g.ln_gain_off();
    S* grad_bias = grad.data() + g.ln_bias_off();
    std::vector<S> g_xhat(dm);
    for (int j = 0; j < dm; ++j) {
        grad_gain[j] += g_y[j] * cache.xhat[j];
        grad_bias[j] += g_y[j];
        g_xhat[j] = g_y[j] * params.ln_gain()[j];
    }

    // Layernorm backward.
    S mean_gx = S(0), mean_gx_xhat = S(0);
    for (int j = 0; j < dm; ++j) {
        mean_gx += g_xhat[j];
        mean_gx_xhat += g_xhat[j] * cache.xhat[j];
    }
    mean_gx /= S(dm);
    mean_gx_xhat /= S(dm);
    std::vector<S> g_h(dm);
    for (int j = 0; j < dm; ++j)
        g_h[j] = cache.inv_std * (g_xhat[j] - mean_gx - cache.xhat[j] * mean_gx_xhat);

    // h = z + C act
    std::vector<S> g_z = g_h;
    std::vector<S> g_act(mlp, S(0));
    S* grad_c = grad.data() + g.c_off();
    for (int j = 0; j < dm; ++j) {
        const S* row = params.c() + static_cast<std::size_t>(j) * mlp;
        S* grow = grad_c + static_cast<std::size_t>(j) * mlp;
        const S gh = g_h[j];
        for (int pidx = 0; pidx < mlp; ++pidx) {
            grow[pidx] += gh * cache.act[pidx];
            g_act[pidx] += row[pidx] * gh;
        }
    }

    // act = silu(u)
    std::vector<S> g_u(mlp);
    for (int pidx = 0; pidx < mlp; ++pidx) {
        const S u = cache.u[pidx];
        const S sig = S(1) / (S(1) + std::exp(-u));
        g_u[pidx] = g_act[pidx] * sig * (S(1) + u * (S(1) - sig));
    }

    // u = B z
    S* grad_b = grad.data() + g.b_off();
    for (int pidx = 0; pidx < mlp; ++pidx) {
        const S* row = params.b() + static_cast<std::size_t>(pidx) * dm;
        S* grow = grad_b + static_cast<std::size_t>(pidx) * dm;
        const S gu = g_u[pidx];
        for (int j = 0; j < dm; ++j) {
            grow[j] += gu * cache.z[j];
            g_z[j] += row[j] * gu;
        }
    }

    // z = A q + pos[layer]
    S* grad_pos = grad.data() + g.pos_off() + static_cast<std::size_t>(cache.layer) * dm;
    S* grad_a = grad.data() + g.a_off();
    for (int j = 0; j < dm; ++j) {
        grad_pos[j] += g_z[j];
        S* grow = grad_a + static_cast<std::size_t>(j) * cfg.d;
        const S gz = g_z[j];
        for (int i = 0; i < cfg.d; ++i) grow[i] += gz * cache.q[i];
    }
}

template EstimatorParamsT<float> init_estimator_params<float>(const EstimatorConfig&);
template EstimatorParamsT<double> init_estimator_params<double>(const EstimatorConfig&);
template void estimator_forward<float>(const EstimatorParamsT<float>&, std::span<const float>,
                                       int, EstimatorCache<float>&);
template void estimator_forward<double>(const EstimatorParamsT<double>&,
                                        std::span<const double>, int, EstimatorCache<double>&);
template float distill_loss<float>(const EstimatorParamsT<float>&, std::span<const float>, int,
                                   std::span<const float>);
template double distill_loss<double>(const EstimatorParamsT<double>&, std::span<const double>,
                                     int, std::span<const double>);
template void estimator_backward<float>(const EstimatorParamsT<float>&,
                                        const EstimatorCache<float>&, std::span<const float>,
                                        std::span<float>, float);
template void estimator_backward<double>(const EstimatorParamsT<double>&,
                                         const EstimatorCache<double>&, std::span<const double>,
                                         std::span<double>, double);

// --- training ----------------------------------------------------------------

void adam_step(EstimatorParams& params, std::span<const float> grad, AdamState& state,
               const AdamConfig& cfg) {
    if (grad.size() != params.flat.size())
        throw std::invalid_argument("adam: gradient size mismatch");
    if (state.m.empty()) {
        state.m.assign(grad.size(), 0.0f);
        state.v.assign(grad.size(), 0.0f);
    }
    ++state.step;
    const double b1 = cfg.beta1, b2 = cfg.beta2;
    const double b1c = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double b2c = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double gi = grad[i];
        const double m = b1 * state.m[i] + (1.0 - b1) * gi;
        const double v = b2 * state.v[i] + (1.0 - b2) * gi * gi;
        state.m[i] = static_cast<float>(m);
        state.v[i] = static_cast<float>(v);
        const double mhat = m / b1c;
        const double vhat = v / b2c;
        params.flat[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
}

namespace {

double recall_of_logits(const Vec& pred, const Vec& truth, int k) {
    TopK tp = top_k(pred, k);
    TopK tt = top_k(truth, k);
    int hits = 0;
    for (int a : tp.indices)
        for (int b : tt.indices)
            if (a == b) {
                ++hits;
                break;
            }
    return static_cast<double>(hits) / static_cast<double>(k);
}

} // namespace

HitRateReport eval_hit_rate(const EstimatorParams& params, const DistillDataset& data, int k,
                            std::int64_t begin_token, std::int64_t end_token) {
    HitRateReport rep;
    rep.per_layer.assign(data.layers_predicting, 0.0);
    std::vector<std::int64_t> counts(data.layers_predicting, 0);
    EstimatorCache<float> cache;
    double kl_sum = 0.0;
    std::int64_t n = 0;
    for (std::int64_t t = begin_token; t < end_token; ++t) {
        for (int l = 0; l < data.layers_predicting; ++l) {
            const std::int64_t sidx = t * data.layers_predicting + l;
            estimator_forward<float>(params, data.input(sidx), l, cache);
            Vec pred(cache.logits.begin(), cache.logits.end());
            Vec truth(data.target(sidx).begin(), data.target(sidx).end());
            rep.per_layer[l] += recall_of_logits(pred, truth, k);
            ++counts[l];
            Vec tprob = softmax(truth);
            Vec pprob(cache.probs.begin(), cache.probs.end());
            kl_sum += kl_divergence(tprob, pprob);
            ++n;
        }
    }
    double total = 0.0;
    for (int l = 0; l < data.layers_predicting; ++l) {
        if (counts[l] > 0) rep.per_layer[l] /= static_cast<double>(counts[l]);
        total += rep.per_layer[l];
    }
    rep.mean = data.layers_predicting > 0 ? total / data.layers_predicting : 0.0;
    rep.mean_kl = n > 0 ? kl_sum / static_cast<double>(n) : 0.0;
    return rep;
}

TrainResult train_estimator(const DistillDataset& data, const EstimatorConfig& config,
                            const TrainHyper& hyper) {
    config.validate();
    if (data.tokens < 1) throw std::invalid_argument("train: empty dataset");
    if (data.d != config.d || data.experts != config.experts ||
        data.layers_predicting != config.layers - 1)
        throw std::invalid_argument("train: dataset does not match estimator config");
    if (hyper.k < 1 || hyper.k > config.experts)
        throw std::invalid_argument("train: invalid k");

    const std::int64_t val_tokens =
        std::max<std::int64_t>(1, static_cast<std::int64_t>(
                                      static_cast<double>(data.tokens) * hyper.val_fraction));
    const std::int64_t train_tokens = data.tokens - val_tokens;
    if (train_tokens < 1) throw std::invalid_argument("train: no training tokens after split");

    TrainResult result;
    result.params = init_estimator_params<float>(config);
    AdamState adam;
    AdamConfig adam_cfg;
    adam_cfg.lr = hyper.lr;

    std::vector<float> grad(result.params.flat.size(), 0.0f);
    EstimatorCache<float> cache;
    std::vector<std::int64_t> order(static_cast<std::size_t>(train_tokens));
    std::iota(order.begin(), order.end(), 0);

    auto eval_point = [&](std::int64_t tokens_seen) {
        HitRateReport rep =
            eval_hit_rate(result.params, data, hyper.k, train_tokens, data.tokens);
        result.curve.push_back({tokens_seen, rep.mean_kl, rep.mean});
        return rep.mean;
    };

    double hit = eval_point(0);
    if (hyper.early_stop_hit_rate > 0.0 && hit >= hyper.early_stop_hit_rate)
        return result;

    std::int64_t cursor = 0;
    std::int64_t epoch = 0;
    std::int64_t tokens_seen = 0;
    auto reshuffle = [&]() {
        Rng rng(derive_seed(hyper.seed, "train-epoch-" + std::to_string(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(rng.next_u64() % i);
            std::swap(order[i - 1], order[j]);
        }
    };
    reshuffle();

    const float sample_weight =
        1.0f / static_cast<float>(hyper.batch_tokens * data.layers_predicting);
    for (std::int64_t step = 1; step <= hyper.max_steps; ++step) {
        std::fill(grad.begin(), grad.end(), 0.0f);
        for (int bt = 0; bt < hyper.batch_tokens; ++bt) {
            if (cursor >= train_tokens) {
                cursor = 0;
                ++epoch;
                reshuffle();
            }
            const std::int64_t tok = order[static_cast<std::size_t>(cursor++)];
            for (int l = 0; l < data.layers_predicting; ++l) {
                const std::int64_t sidx = tok * data.layers_predicting + l;
                estimator_forward<float>(result.params, data.input(sidx), l, cache);
                estimator_backward<float>(result.params, cache, data.target(sidx), grad,
                                          sample_weight);
            }
            tokens_seen += 1;
        }
        adam_step(result.params, grad, adam, adam_cfg);
        if (step % hyper.eval_every == 0 || step == hyper.max_steps) {
            hit = eval_point(tokens_seen);
            if (hyper.early_stop_hit_rate > 0.0 && hit >= hyper.early_stop_hit_rate) break;
        }
    }
    return result;
}

void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "tokens,val_kl,val_hit_rate\n";
    char buf[64];
    for (const CurvePoint& p : curve) {
        out << p.tokens_seen << ',';
        std::snprintf(buf, sizeof buf, "%.6g", p.val_kl);
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.6g", p.val_hit_rate);
        out << buf << '\n';
    }
}

void save_estimator(const EstimatorParams& params, const fs::path& dir) {
    fs::create_directories(dir);
    std::ofstream cfg(dir / "estimator.json");
    if (!cfg) throw std::runtime_error("cannot write estimator.json");
    cfg << params.config.to_json() << '\n';
    const EstimatorConfig& c = params.config;
    const auto dm = static_cast<std::uint64_t>(c.latent());
    const auto mlp = static_cast<std::uint64_t>(c.mlp_width());
    auto dump = [&](const char* name, const float* p, std::vector<std::uint64_t> dims) {
        std::uint64_t n = 1;
        for (auto d : dims) n *= d;
        moet::write(dir / (std::string(name) + ".moet"), dims, {p, n});
    };
    dump("a", params.a(), {dm, static_cast<std::uint64_t>(c.d)});
    dump("pos", params.pos(0), {static_cast<std::uint64_t>(c.layers), dm});
    dump("b", params.b(), {mlp, dm});
    dump("c", params.c(), {dm, mlp});
    dump("ln_gain", params.ln_gain(), {dm});
    dump("ln_bias", params.ln_bias(), {dm});
    dump("w_head", params.w_head(), {static_cast<std::uint64_t>(c.experts), dm});
}

EstimatorParams load_estimator(const fs::path& dir) {
    std::ifstream cfg(dir / "estimator.json");
    if (!cfg) throw std::runtime_error("cannot read " + (dir / "estimator.json").string());
    std::string text((std::istreambuf_iterator<char>(cfg)), std::istreambuf_iterator<char>());
    EstimatorParams params;
    params.config = EstimatorConfig::from_json(text);
    params.config.validate();
    params.flat.assign(params.total(), 0.0f);
    auto fetch = [&](const char* name, float* dst, std::uint64_t expect) {
        moet::Tensor t = moet::read(dir / (std::string(name) + ".moet"));
        if (t.elements() != expect)
            throw std::runtime_error("estimator checkpoint: bad shape for " +
                                     std::string(name));
        std::copy(t.data.begin(), t.data.end(), dst);
    };
    const EstimatorConfig& c = params.config;
    const auto dm = static_cast<std::uint64_t>(c.latent());
    const auto mlp = static_cast<std::uint64_t>(c.mlp_width());
    fetch("a", params.a(), dm * c.d);
    fetch("pos", params.pos(0), static_cast<std::uint64_t>(c.layers) * dm);
    fetch("b", params.b(), mlp * dm);
    fetch("c", params.c(), dm * mlp);
    fetch("ln_gain", params.ln_gain(), dm);
    fetch("ln_bias", params.ln_bias(), dm);
    fetch("w_head", params.w_head(), static_cast<std::uint64_t>(c.experts) * dm);
    return params;
}

} // namespace specmoe
