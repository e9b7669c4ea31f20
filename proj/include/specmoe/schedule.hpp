// schedule.hpp - discrete-event model of one decode step on a two-lane
// machine (compute lane + serialized copy engine), its on-demand and
// prefetched schedules, and the closed-form overlap bound.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace specmoe {

// Per-layer durations in microseconds.
struct TimingModel {
    std::vector<double> t_attn, t_gate_topk, t_expert, t_copy;
    // Layer-0 blocking load; negative means "use t_copy[0]".
    double cold_start_copy = -1.0;

    int layers() const { return static_cast<int>(t_attn.size()); }
    double t_compute(int l) const { return t_attn[l] + t_gate_topk[l] + t_expert[l]; }
    double cold_copy() const { return cold_start_copy < 0.0 ? t_copy[0] : cold_start_copy; }

    void validate() const; // throws on negative durations or ragged arrays

    static TimingModel uniform(int layers, double attn, double gate, double expert,
                               double copy);

    std::string to_json() const;
    static TimingModel from_json(const std::string& text);
};

enum class Lane { kCompute, kCopy };
enum class EventKind { kAttn, kGate, kExpert, kCopy, kIdle };

std::string_view to_string(Lane l);
std::string_view to_string(EventKind k);

struct ScheduleEvent {
    Lane lane;
    EventKind kind;
    int layer;
    double start, end;
};

struct ScheduleReport {
    std::vector<ScheduleEvent> events;
    double tpot = 0.0;
};

// Fully serial baseline: attn, gate, blocking copy, expert per layer.
// tpot equals the closed-form sum of all durations.
ScheduleReport simulate_on_demand(const TimingModel& tm);

// Prefetched schedule: layer-0 copy blocks after gating; the copy for layer
// l+1 starts at max(copy_done_l, gate_done_l) on the FIFO copy lane; expert
// compute at l starts at max(gate_done_l, copy_done_l).
ScheduleReport simulate_prefetch(const TimingModel& tm);

// Closed-form improvement: sum over layers of min(t_copy, t_compute).
double analytic_improvement(const TimingModel& tm);

struct BreakdownFractions {
    double compute_frac = 0.0;
    double copy_frac = 0.0; // copy time on the critical path (compute lane idle)
    double idle_frac = 0.0; // neither lane busy
};

// Fractions of tpot; sums to 1.
BreakdownFractions breakdown(const ScheduleReport& report);

// Total gap time inside the compute lane (cold start included).
double compute_lane_idle(const ScheduleReport& report);

// True when no two copy-lane events overlap.
bool copy_lane_serialized(const std::vector<ScheduleEvent>& events);

std::string timeline_to_json(const std::vector<ScheduleEvent>& events);
void write_timeline_json(const std::filesystem::path& path,
                         const std::vector<ScheduleEvent>& events);

struct SummaryRow {
    std::string mode;
    double tpot_us;
    BreakdownFractions fracs;
};
void write_summary_csv(const std::filesystem::path& path, const std::vector<SummaryRow>& rows);

// --- timing presets -----------------------------------------------------------

// Published MoE geometries used to derive copy times from first principles.
struct GeometryPreset {
    std::string name;
    int layers;
    int experts;
    int hidden;
    int expert_hidden;
};

const std::vector<GeometryPreset>& geometry_presets();

// Uniform per-layer timing model for a geometry: copy time is
// k * 3*H*H_moe*bytes_per_param / bandwidth; compute time is chosen as
// compute_share of the serial per-layer total and split attn/gate/expert.
TimingModel timing_from_geometry(const GeometryPreset& g, int k,
                                 double bandwidth_bytes_per_s = 25e9,
                                 double bytes_per_param = 2.0,
                                 double compute_share = 0.13);

// Resolves --timing values: a known geometry preset name (requires k > 0)
// or a path to a timing-model JSON file.
TimingModel resolve_timing(const std::string& name_or_path, int k);

} // namespace specmoe
