// model.hpp - seeded toy pre-norm MoE decoder with instrumentation hooks.
//
// Block structure per layer:
//   x -> rms_norm -> single-head RoPE attention -> (+x) = r
//   r -> rms_norm = s -> router -> top-k SwiGLU experts -> (+r) = next x
// followed by a final rms_norm and an unembedding projection.

#pragma once

#include "specmoe/numerics.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>

namespace specmoe {

enum class GatingOrder {
    kSoftmaxThenTopK, // softmax over all E logits, top-k, renormalize selection
    kTopKThenSoftmax, // top-k over logits, softmax over the selected k
};

std::string_view to_string(GatingOrder g);
GatingOrder gating_order_from_string(std::string_view s);

struct ModelConfig {
    int layers = 0;        // L
    int experts = 0;       // E per MoE layer
    int top_k = 0;         // active experts per token
    int hidden = 0;        // H
    int expert_hidden = 0; // H_moe
    int vocab = 0;
    int head_dim = 0;
    float eps = 1e-5f;
    std::uint64_t seed = 0;
    GatingOrder gating = GatingOrder::kSoftmaxThenTopK;

    void validate() const; // throws std::invalid_argument naming the violated invariant

    // L * E * 3 * H * H_moe * sizeof(f32)
    std::uint64_t expert_param_bytes() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

// Named config presets: "toy" and "toy-large".
ModelConfig preset_config(std::string_view name);

struct ExpertWeights {
    Mat w_gate; // H_moe x H
    Mat w_up;   // H_moe x H
    Mat w_down; // H x H_moe
};

struct LayerWeights {
    Vec attn_norm_gain; // H
    Vec moe_norm_gain;  // H
    Mat wq, wk, wv;     // head_dim x H
    Mat wo;             // H x head_dim
    Mat gate;           // E x H
    std::vector<ExpertWeights> experts; // E entries
};

struct Model {
    ModelConfig config;
    Mat embedding; // vocab x H
    std::vector<LayerWeights> layers;
    Vec final_norm_gain; // H
    Mat unembed; // vocab x H
};

// Selected expert ids sorted by descending gate weight; gates renormalized
// over the selection to sum to 1.
struct RouterDecision {
    std::vector<int> ids;
    Vec gates;
};

struct DecodeState {
    struct LayerKV {
        std::vector<Vec> keys;   // one head_dim vector per past position
        std::vector<Vec> values;
    };
    std::vector<LayerKV> layers;
    int position = 0;

    explicit DecodeState(int num_layers = 0) : layers(num_layers) {}
};

// Per-(token, layer) instrumentation record.
struct LayerTraceRecord {
    Vec s;                 // normalized router input, H
    Vec r;                 // post-attention residual, H
    Vec m;                 // MoE block output, H
    Vec router_logits;     // E, true router on the actual stream
    RouterDecision decision;           // decision that was executed
    std::vector<Vec> expert_outputs;   // raw (pre-gate) outputs, decision order
};

using TraceSink = std::function<void(int layer, const LayerTraceRecord&)>;

// --- construction ----------------------------------------------------------

Model build_model(const ModelConfig& config);

void save_model(const Model& model, const std::filesystem::path& dir);
Model load_model(const std::filesystem::path& dir);

// --- forward ops -------------------------------------------------------------

RouterDecision make_decision(const Vec& logits, int k, GatingOrder order);

// logits = gate * x_norm, decision per the gating order.
std::pair<Vec, RouterDecision> router(const Vec& x_norm, const Mat& gate, int k,
                                      GatingOrder order);

// W_down * (silu(W_gate x) . (W_up x))
Vec expert_ffn(const Vec& x_norm, const ExpertWeights& w);

// Gate-weighted mixture of the selected experts. If raw_outputs is non-null
// it receives each selected expert's unweighted output, in decision order.
Vec moe_block(const Vec& x_norm, const RouterDecision& decision,
              const std::vector<ExpertWeights>& experts,
              std::vector<Vec>* raw_outputs = nullptr);

// Single-head causal attention with rotary embeddings over the cached
// history; appends the current k/v to the cache.
Vec attention_step(const Vec& x_norm, DecodeState::LayerKV& kv, const LayerWeights& w,
                   int position, int head_dim);

// One decode step with true routing. The sink, when given, receives one
// record per layer.
Vec forward_decode(const Model& model, DecodeState& state, int token,
                   const TraceSink* sink = nullptr);

int argmax_token(const Vec& logits);

// --- speculative decision source -----------------------------------------

class Predictor {
public:
    virtual ~Predictor() = default;
    virtual std::string_view name() const = 0;

    struct Context {
        int layer = 0;                          // l; prediction targets l+1
        const Vec* s = nullptr;                 // s_l on the actual stream
        const Vec* r = nullptr;                 // r_l on the actual stream
        const RouterDecision* executed = nullptr; // decision executed at l
        // Recorded truth for layer l+1; set only by offline trace evaluation.
        const RouterDecision* true_next = nullptr;
    };

    struct Prediction {
        Vec logits; // E predicted next-layer logits
        RouterDecision decision;
    };

    virtual Prediction predict_next(const Model& model, const Context& ctx) = 0;

    // Hooks for stateful predictors (the oracle keeps a shadow decode state).
    virtual void observe_prompt_token(const Model&, int) {}
    virtual void begin_token(const Model&, int) {}
};

} // namespace specmoe
