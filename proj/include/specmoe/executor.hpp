// executor.hpp - real two-lane offloaded decode: a compute thread runs the
// forward pass while a copy worker services a FIFO of expert-copy requests
// (each sleeping an injected latency, then staging the weights into one of
// two device-side buffers). Proves compute/copy overlap and double-buffer
// correctness with wall-clock event logs.

#pragma once

#include "specmoe/model.hpp"
#include "specmoe/schedule.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace specmoe {

enum class OffloadMode { kOnDemand, kPrefetch };

std::string_view to_string(OffloadMode m);
OffloadMode offload_mode_from_string(std::string_view s);

struct ExecutorOptions {
    OffloadMode mode = OffloadMode::kOnDemand;
    std::int64_t copy_latency_us = 0; // injected per copy request
    // Compute aborts when a readiness wait exceeds
    // max(deadlock_factor * copy_latency, 1s).
    double deadlock_factor = 100.0;
};

struct MeasuredEvent {
    Lane lane;
    EventKind kind;
    int layer;
    double start_us, end_us; // relative to the run start
    int token;               // decode step index; -1 during prefill
};

struct ExecutorResult {
    std::vector<int> tokens;            // generated tokens (first from prefill)
    std::vector<MeasuredEvent> events;  // prefill + decode, both lanes
    std::vector<double> per_token_us;   // wall-clock per decode step (n_new - 1)
    int max_resident_layers = 0;        // peak layers staged device-side
};

// Greedy offloaded generation. Prefill loads all experts per layer (the
// trivial strategy); decode copies the k selected sets per layer, either
// blocking after routing (on-demand) or one layer ahead via the predictor
// (prefetch; layer 0 cold-starts on the true router). Token output is
// independent of the injected latency.
ExecutorResult run_offloaded_decode(const Model& model, std::span<const int> prompt, int n_new,
                                    Predictor* predictor, const ExecutorOptions& options);

// Decode-phase events converted to a ScheduleReport per token for breakdown
// analysis; tpot is that token's wall-clock span.
std::vector<ScheduleReport> per_token_reports(const ExecutorResult& result);

// Max simultaneously resident layers implied by the event log, treating a
// layer as resident from its copy start to its expert end (per token).
int max_resident_from_events(const ExecutorResult& result);

std::string measured_timeline_json(const std::vector<MeasuredEvent>& events);

} // namespace specmoe
