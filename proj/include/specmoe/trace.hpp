// trace.hpp - decode trace bundles: one packed MOET array per field plus a
// JSON manifest. Written token-by-token so large traces never sit in RAM.

#pragma once

#include "specmoe/model.hpp"
#include "specmoe/moet.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace specmoe {

struct TraceManifest {
    ModelConfig config;
    std::int64_t tokens = 0;
    int seq_len = 0;      // decode state resets every seq_len tokens
    std::string source;   // human-readable workload description
    std::uint64_t seed = 0;
};

// Fields and shapes:
//   token_ids      [N]
//   s, r, m        [N, L, H]
//   router_logits  [N, L, E]
//   expert_ids     [N, L, k]   (ids stored as f32; values are small ints)
//   expert_gates   [N, L, k]
//   expert_outputs [N, L, k, H]
class TraceWriter {
public:
    TraceWriter(const std::filesystem::path& dir, const TraceManifest& manifest);

    // Must be called exactly manifest.tokens times, each with L records.
    void add_token(int token_id, const std::vector<LayerTraceRecord>& layers);
    void finish();

private:
    std::filesystem::path dir_;
    TraceManifest manifest_;
    std::int64_t written_ = 0;
    std::unique_ptr<moet::Writer> token_ids_, s_, r_, m_, logits_, ids_, gates_, outputs_;
};

struct TraceToken {
    int token_id = 0;
    std::vector<LayerTraceRecord> layers;
};

class TraceReader {
public:
    explicit TraceReader(const std::filesystem::path& dir);

    const TraceManifest& manifest() const { return manifest_; }
    std::int64_t tokens() const { return manifest_.tokens; }

    // Random access; sequential reads are cheap, seeks rewind the streams.
    TraceToken read_token(std::int64_t t);

private:
    TraceManifest manifest_;
    std::int64_t cursor_ = 0;
    std::unique_ptr<moet::Reader> token_ids_, s_, r_, m_, logits_, ids_, gates_, outputs_;
};

TraceManifest read_trace_manifest(const std::filesystem::path& dir);

// Runs the model over a token stream with per-token state resets every
// seq_len tokens, handing each traced token to the callback. This is the
// single workload driver behind trace capture and in-process evaluation.
void stream_decode_trace(const Model& model, std::span<const int> tokens, int seq_len,
                         const std::function<void(std::int64_t index, const TraceToken&)>& fn);

// Uniform-random token workload in [0, vocab).
std::vector<int> random_token_stream(std::int64_t n, int vocab, std::uint64_t seed);

} // namespace specmoe
