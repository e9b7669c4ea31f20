// estimator.hpp - lightweight next-layer router estimator:
//   q -> A -> (+pos[l]) -> [B -> silu -> C] residual -> layernorm -> W_head
// trained by KL distillation against the true router's softmax with
// hand-derived gradients and Adam.
//
// Math is templated on the scalar so the same graph runs in f32 for
// training and f64 for finite-difference verification.

#pragma once

#include "specmoe/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace specmoe {

struct EstimatorConfig {
    int d = 0;       // input width (model hidden size)
    int m = 0;       // reduction factor, latent = d/m
    int n = 0;       // expansion factor, mlp width = latent*n
    int experts = 0; // E
    int layers = 0;  // L (positional embeddings; predictions use 0..L-2)
    float eps = 1e-5f;
    std::uint64_t seed = 0;

    int latent() const { return d / m; }
    int mlp_width() const { return latent() * n; }

    void validate() const;

    // d*d/m + L*d/m + 2*n*(d/m)^2 + 2*d/m + (d/m)*E
    std::uint64_t param_count() const;

    std::string to_json() const;
    static EstimatorConfig from_json(const std::string& text);
};

// Flat parameter block with fixed tensor layout:
//   A (latent x d) | pos (L x latent) | B (mlp x latent) | C (latent x mlp)
//   | ln_gain (latent) | ln_bias (latent) | w_head (E x latent)
template <typename S>
struct EstimatorParamsT {
    EstimatorConfig config;
    std::vector<S> flat;

    std::size_t a_off() const { return 0; }
    std::size_t pos_off() const { return a_off() + static_cast<std::size_t>(config.latent()) * config.d; }
    std::size_t b_off() const { return pos_off() + static_cast<std::size_t>(config.layers) * config.latent(); }
    std::size_t c_off() const { return b_off() + static_cast<std::size_t>(config.mlp_width()) * config.latent(); }
    std::size_t ln_gain_off() const { return c_off() + static_cast<std::size_t>(config.latent()) * config.mlp_width(); }
    std::size_t ln_bias_off() const { return ln_gain_off() + config.latent(); }
    std::size_t w_head_off() const { return ln_bias_off() + config.latent(); }
    std::size_t total() const { return w_head_off() + static_cast<std::size_t>(config.experts) * config.latent(); }

    S* a() { return flat.data() + a_off(); }
    const S* a() const { return flat.data() + a_off(); }
    S* pos(int l) { return flat.data() + pos_off() + static_cast<std::size_t>(l) * config.latent(); }
    const S* pos(int l) const { return flat.data() + pos_off() + static_cast<std::size_t>(l) * config.latent(); }
    S* b() { return flat.data() + b_off(); }
    const S* b() const { return flat.data() + b_off(); }
    S* c() { return flat.data() + c_off(); }
    const S* c() const { return flat.data() + c_off(); }
    S* ln_gain() { return flat.data() + ln_gain_off(); }
    const S* ln_gain() const { return flat.data() + ln_gain_off(); }
    S* ln_bias() { return flat.data() + ln_bias_off(); }
    const S* ln_bias() const { return flat.data() + ln_bias_off(); }
    S* w_head() { return flat.data() + w_head_off(); }
    const S* w_head() const { return flat.data() + w_head_off(); }
};

using EstimatorParams = EstimatorParamsT<float>;

template <typename S>
EstimatorParamsT<S> init_estimator_params(const EstimatorConfig& config);

// Per-sample forward cache; reused across calls to avoid reallocation.
template <typename S>
struct EstimatorCache {
    std::vector<S> z;     // latent: A q + pos[l]
    std::vector<S> u;     // mlp: B z
    std::vector<S> act;   // mlp: silu(u)
    std::vector<S> h;     // latent: z + C act
    std::vector<S> xhat;  // layernorm normalized h
    S inv_std = S(0);
    std::vector<S> logits; // E
    std::vector<S> probs;  // E: softmax(logits)
    std::vector<S> q;      // copy of the input
    int layer = 0;
};

template <typename S>
void estimator_forward(const EstimatorParamsT<S>& params, std::span<const S> q, int layer,
                       EstimatorCache<S>& cache);

// Convenience f32 entry point.
Vec estimator_logits(const EstimatorParams& params, const Vec& q, int layer);

// KL(softmax(true_logits) || softmax(predicted)).
template <typename S>
S distill_loss(const EstimatorParamsT<S>& params, std::span<const S> q, int layer,
               std::span<const S> true_logits);

// Accumulates weight * d(loss)/d(param) into grad (same layout as flat).
// Requires the cache produced by estimator_forward on the same sample.
template <typename S>
void estimator_backward(const EstimatorParamsT<S>& params, const EstimatorCache<S>& cache,
                        std::span<const S> true_logits, std::span<S> grad, S weight);

// --- training ----------------------------------------------------------------

// Distillation samples grouped per token: for each token, one sample per
// predicting layer l in 0..L-2 (input paired with layer-(l+1) true logits).
struct DistillDataset {
    int d = 0;
    int experts = 0;
    int layers_predicting = 0; // L-1
    std::int64_t tokens = 0;
    std::vector<float> inputs;  // [tokens * layers_predicting, d]
    std::vector<float> targets; // [tokens * layers_predicting, experts]

    std::int64_t samples() const { return tokens * layers_predicting; }
    std::span<const float> input(std::int64_t sample) const {
        return {inputs.data() + sample * d, static_cast<std::size_t>(d)};
    }
    std::span<const float> target(std::int64_t sample) const {
        return {targets.data() + sample * experts, static_cast<std::size_t>(experts)};
    }
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<float> m, v;
    std::int64_t step = 0;
};

void adam_step(EstimatorParams& params, std::span<const float> grad, AdamState& state,
               const AdamConfig& cfg);

struct TrainHyper {
    double lr = 1e-3;
    int batch_tokens = 32;
    std::int64_t max_steps = 0;
    std::int64_t eval_every = 50;       // in steps; a point is also taken at step 0
    double val_fraction = 0.1;          // temporal tail split, never trained on
    std::uint64_t seed = 0;
    int k = 0;                          // top-k for hit-rate eval
    double early_stop_hit_rate = 0.0;   // 0 = train for max_steps
};

struct CurvePoint {
    std::int64_t tokens_seen = 0;
    double val_kl = 0.0;
    double val_hit_rate = 0.0;
};

struct TrainResult {
    EstimatorParams params;
    std::vector<CurvePoint> curve;
};

TrainResult train_estimator(const DistillDataset& data, const EstimatorConfig& config,
                            const TrainHyper& hyper);

// Mean recall@k of predicted vs true top-k over tokens [begin, end).
struct HitRateReport {
    std::vector<double> per_layer; // size layers_predicting
    double mean = 0.0;
    double mean_kl = 0.0;
};
HitRateReport eval_hit_rate(const EstimatorParams& params, const DistillDataset& data, int k,
                            std::int64_t begin_token, std::int64_t end_token);

void write_curve_csv(const std::filesystem::path& path, const std::vector<CurvePoint>& curve);

void save_estimator(const EstimatorParams& params, const std::filesystem::path& dir);
EstimatorParams load_estimator(const std::filesystem::path& dir);

} // namespace specmoe
