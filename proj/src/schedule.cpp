#include "specmoe/schedule.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace specmoe {

using nlohmann::json;

void TimingModel::validate() const {
    const std::size_t L = t_attn.size();
    if (L == 0) throw std::invalid_argument("timing model: no layers");
    if (t_gate_topk.size() != L || t_expert.size() != L || t_copy.size() != L)
        throw std::invalid_argument("timing model: ragged duration arrays");
    auto check = [](const std::vector<double>& v, const char* name) {
        for (double x : v)
            if (!(x >= 0.0) || !std::isfinite(x))
                throw std::invalid_argument(std::string("timing model: negative ") + name);
    };
    check(t_attn, "t_attn");
    check(t_gate_topk, "t_gate_topk");
    check(t_expert, "t_expert");
    check(t_copy, "t_copy");
    if (cold_start_copy >= 0.0 && !std::isfinite(cold_start_copy))
        throw std::invalid_argument("timing model: bad cold_start_copy");
}

TimingModel TimingModel::uniform(int layers, double attn, double gate, double expert,
                                 double copy) {
    TimingModel tm;
    tm.t_attn.assign(layers, attn);
    tm.t_gate_topk.assign(layers, gate);
    tm.t_expert.assign(layers, expert);
    tm.t_copy.assign(layers, copy);
    return tm;
}

namespace {

std::vector<double> durations_from_json(const json& j, int layers) {
    if (j.is_number()) return std::vector<double>(layers, j.get<double>());
    auto v = j.get<std::vector<double>>();
    if (static_cast<int>(v.size()) != layers)
        throw std::invalid_argument("timing model: array length != layers");
    return v;
}

} // namespace

std::string TimingModel::to_json() const {
    json j{{"layers", layers()},
           {"t_attn_us", t_attn},
           {"t_gate_topk_us", t_gate_topk},
           {"t_expert_us", t_expert},
           {"t_copy_us", t_copy}};
    if (cold_start_copy >= 0.0) j["cold_start_copy_us"] = cold_start_copy;
    return j.dump(2);
}

TimingModel TimingModel::from_json(const std::string& text) {
    json j = json::parse(text);
    const int L = j.at("layers").get<int>();
    if (L < 1) throw std::invalid_argument("timing model: layers must be >= 1");
    TimingModel tm;
    tm.t_attn = durations_from_json(j.at("t_attn_us"), L);
    tm.t_gate_topk = durations_from_json(j.at("t_gate_topk_us"), L);
    tm.t_expert = durations_from_json(j.at("t_expert_us"), L);
    tm.t_copy = durations_from_json(j.at("t_copy_us"), L);
    if (j.contains("cold_start_copy_us"))
        tm.cold_start_copy = j.at("cold_start_copy_us").get<double>();
    tm.validate();
    return tm;
}

std::string_view to_string(Lane l) { return l == Lane::kCompute ? "compute" : "copy"; }

std::string_view to_string(EventKind k) {
    switch (k) {
    case EventKind::kAttn: return "attn";
    case EventKind::kGate: return "gate";
    case EventKind::kExpert: return "expert";
    case EventKind::kCopy: return "copy";
    case EventKind::kIdle: return "idle";
    }
    return "?";
}

ScheduleReport simulate_on_demand(const TimingModel& tm) {
    tm.validate();
    ScheduleReport rep;
    double t = 0.0;
    for (int l = 0; l < tm.layers(); ++l) {
        rep.events.push_back({Lane::kCompute, EventKind::kAttn, l, t, t + tm.t_attn[l]});
        t += tm.t_attn[l];
        rep.events.push_back({Lane::kCompute, EventKind::kGate, l, t, t + tm.t_gate_topk[l]});
        t += tm.t_gate_topk[l];
        const double copy = (l == 0) ? tm.cold_copy() : tm.t_copy[l];
        rep.events.push_back({Lane::kCopy, EventKind::kCopy, l, t, t + copy});
        t += copy;
        rep.events.push_back({Lane::kCompute, EventKind::kExpert, l, t, t + tm.t_expert[l]});
        t += tm.t_expert[l];
    }
    rep.tpot = t;
    return rep;
}

ScheduleReport simulate_prefetch(const TimingModel& tm) {
    tm.validate();
    const int L = tm.layers();
    ScheduleReport rep;
    std::vector<double> copy_start(L), copy_end(L);

    double cursor = 0.0; // compute lane
    double gate_end = 0.0;
    for (int l = 0; l < L; ++l) {
        rep.events.push_back({Lane::kCompute, EventKind::kAttn, l, cursor, cursor + tm.t_attn[l]});
        cursor += tm.t_attn[l];
        rep.events.push_back(
            {Lane::kCompute, EventKind::kGate, l, cursor, cursor + tm.t_gate_topk[l]});
        cursor += tm.t_gate_topk[l];
        gate_end = cursor;

        if (l == 0) {
            // Cold start: blocking copy issued after gating.
            copy_start[0] = gate_end;
            copy_end[0] = copy_start[0] + tm.cold_copy();
        }
        // Prefetch for l+1 is issued after layer-l gating; the single copy
        // engine serializes it behind the layer-l copy.
        if (l + 1 < L) {
            copy_start[l + 1] = std::max(copy_end[l], gate_end);
            copy_end[l + 1] = copy_start[l + 1] + tm.t_copy[l + 1];
        }

        const double expert_start = std::max(gate_end, copy_end[l]);
        rep.events.push_back(
            {Lane::kCompute, EventKind::kExpert, l, expert_start, expert_start + tm.t_expert[l]});
        cursor = expert_start + tm.t_expert[l];
    }
    for (int l = 0; l < L; ++l)
        rep.events.push_back({Lane::kCopy, EventKind::kCopy, l, copy_start[l], copy_end[l]});
    rep.tpot = cursor;
    return rep;
}

double analytic_improvement(const TimingModel& tm) {
    tm.validate();
    double sum = 0.0;
    for (int l = 0; l < tm.layers(); ++l) sum += std::min(tm.t_copy[l], tm.t_compute(l));
    return sum;
}

namespace {

struct Interval {
    double start, end;
};

std::vector<Interval> lane_busy(const std::vector<ScheduleEvent>& events, Lane lane) {
    std::vector<Interval> v;
    for (const ScheduleEvent& e : events)
        if (e.lane == lane && e.end > e.start) v.push_back({e.start, e.end});
    std::sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) {
        return a.start < b.start;
    });
    // merge
    std::vector<Interval> merged;
    for (const Interval& i : v) {
        if (!merged.empty() && i.start <= merged.back().end)
            merged.back().end = std::max(merged.back().end, i.end);
        else
            merged.push_back(i);
    }
    return merged;
}

double total_len(const std::vector<Interval>& v) {
    double s = 0.0;
    for (const Interval& i : v) s += i.end - i.start;
    return s;
}

// |a intersect b|
double intersect_len(const std::vector<Interval>& a, const std::vector<Interval>& b) {
    double s = 0.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() && j < b.size()) {
        const double lo = std::max(a[i].start, b[j].start);
        const double hi = std::min(a[i].end, b[j].end);
        if (hi > lo) s += hi - lo;
        if (a[i].end < b[j].end)
            ++i;
        else
            ++j;
    }
    return s;
}

} // namespace

BreakdownFractions breakdown(const ScheduleReport& report) {
    BreakdownFractions f;
    if (report.tpot <= 0.0) return f;
    const auto compute = lane_busy(report.events, Lane::kCompute);
    const auto copy = lane_busy(report.events, Lane::kCopy);
    const double compute_busy = total_len(compute);
    const double copy_overlapped = intersect_len(compute, copy);
    const double copy_critical = total_len(copy) - copy_overlapped;
    f.compute_frac = compute_busy / report.tpot;
    f.copy_frac = copy_critical / report.tpot;
    f.idle_frac = 1.0 - f.compute_frac - f.copy_frac;
    return f;
}

double compute_lane_idle(const ScheduleReport& report) {
    const auto compute = lane_busy(report.events, Lane::kCompute);
    return report.tpot - total_len(compute);
}

bool copy_lane_serialized(const std::vector<ScheduleEvent>& events) {
    std::vector<Interval> v;
    for (const ScheduleEvent& e : events)
        if (e.lane == Lane::kCopy && e.end > e.start) v.push_back({e.start, e.end});
    std::sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) {
        return a.start < b.start;
    });
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i].start < v[i - 1].end) return false;
    return true;
}

std::string timeline_to_json(const std::vector<ScheduleEvent>& events) {
    json arr = json::array();
    for (const ScheduleEvent& e : events)
        arr.push_back({{"lane", std::string(to_string(e.lane))},
                       {"kind", std::string(to_string(e.kind))},
                       {"layer", e.layer},
                       {"start_us", e.start},
                       {"end_us", e.end}});
    return arr.dump(2);
}

void write_timeline_json(const std::filesystem::path& path,
                         const std::vector<ScheduleEvent>& events) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << timeline_to_json(events) << '\n';
}

void write_summary_csv(const std::filesystem::path& path,
                       const std::vector<SummaryRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "mode,tpot_us,compute_frac,copy_frac,idle_frac\n";
    char buf[64];
    for (const SummaryRow& r : rows) {
        out << r.mode << ',';
        std::snprintf(buf, sizeof buf, "%.6g", r.tpot_us);
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.6g", r.fracs.compute_frac);
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.6g", r.fracs.copy_frac);
        out << buf << ',';
        std::snprintf(buf, sizeof buf, "%.6g", r.fracs.idle_frac);
        out << buf << '\n';
    }
}

const std::vector<GeometryPreset>& geometry_presets() {
    static const std::vector<GeometryPreset> presets = {
        {"qwen3-30b-a3b", 48, 128, 2048, 768},
        {"glm-4.7-flash", 47, 64, 2048, 1536},
        {"gpt-oss-120b", 24, 32, 2880, 2880},
        {"qwen3-235b-a22b", 94, 128, 4096, 1536},
    };
    return presets;
}

TimingModel timing_from_geometry(const GeometryPreset& g, int k, double bandwidth_bytes_per_s,
                                 double bytes_per_param, double compute_share) {
    if (k < 1 || k > g.experts)
        throw std::invalid_argument("timing preset: k must satisfy 1 <= k <= E");
    if (!(bandwidth_bytes_per_s > 0.0))
        throw std::invalid_argument("timing preset: bandwidth must be > 0");
    if (!(compute_share > 0.0 && compute_share < 1.0))
        throw std::invalid_argument("timing preset: compute_share must be in (0,1)");
    const double bytes_per_expert =
        3.0 * static_cast<double>(g.hidden) * static_cast<double>(g.expert_hidden) *
        bytes_per_param;
    const double t_copy_us = k * bytes_per_expert / bandwidth_bytes_per_s * 1e6;
    const double t_compute_us = t_copy_us * compute_share / (1.0 - compute_share);
    // Fixed split: attention dominates compute at decode, gating is tiny.
    return TimingModel::uniform(g.layers, 0.60 * t_compute_us, 0.04 * t_compute_us,
                                0.36 * t_compute_us, t_copy_us);
}

TimingModel resolve_timing(const std::string& name_or_path, int k) {
    for (const GeometryPreset& g : geometry_presets()) {
        if (g.name == name_or_path) {
            if (k < 1)
                throw std::invalid_argument(
                    "timing preset '" + g.name +
                    "' needs an explicit k (the source geometry does not pin it)");
            return timing_from_geometry(g, k);
        }
    }
    std::ifstream in(name_or_path);
    if (!in)
        throw std::invalid_argument("timing: no preset or file named '" + name_or_path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return TimingModel::from_json(text);
}

} // namespace specmoe
