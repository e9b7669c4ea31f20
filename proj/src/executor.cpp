#include "specmoe/executor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

namespace specmoe {

using Clock = std::chrono::steady_clock;

std::string_view to_string(OffloadMode m) {
    return m == OffloadMode::kOnDemand ? "on_demand" : "prefetch";
}

OffloadMode offload_mode_from_string(std::string_view s) {
    if (s == "on_demand") return OffloadMode::kOnDemand;
    if (s == "prefetch") return OffloadMode::kPrefetch;
    throw std::invalid_argument("unknown offload mode: " + std::string(s));
}

namespace {

struct CopyRequest {
    int layer;
    std::vector<int> ids;
};

// Two device-side expert buffers plus the copy worker that fills them.
// Synchronization contract: the worker claims a free buffer, sleeps the
// injected latency, stages the weights, and flips `ready` exactly once; the
// compute thread awaits readiness and releases the buffer after its expert
// reads. No other shared mutable state.
class TwoLaneEngine {
public:
    TwoLaneEngine(const Model& model, const ExecutorOptions& options,
                  std::vector<MeasuredEvent>& events, std::mutex& events_mu,
                  Clock::time_point t0)
        : model_(model), options_(options), events_(events), events_mu_(events_mu), t0_(t0) {
        worker_ = std::thread([this] { worker_loop(); });
    }

    ~TwoLaneEngine() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        worker_.join();
    }

    void set_token(int token) { current_token_ = token; }

    void submit(int layer, std::vector<int> ids) {
        {
            std::lock_guard lock(mu_);
            queue_.push_back({layer, std::move(ids)});
        }
        cv_.notify_all();
    }

    void wait_ready(int layer) {
        Buffer& buf = buffer_for(layer);
        std::unique_lock lock(mu_);
        const auto timeout = deadlock_timeout();
        if (!cv_.wait_for(lock, timeout, [&] {
                if (worker_error_) return true;
                return buf.layer == layer && buf.ready;
            }))
            throw std::runtime_error(
                "deadlock suspected: compute waited " +
                std::to_string(
                    std::chrono::duration_cast<std::chrono::milliseconds>(timeout).count()) +
                " ms for layer " + std::to_string(layer) + " expert copy");
        rethrow_worker_error();
    }

    // Readiness is revalidated on every expert read; a stale or unready
    // buffer is a hard failure.
    const ExpertWeights& read_expert(int layer, int expert_id) {
        Buffer& buf = buffer_for(layer);
        std::lock_guard lock(mu_);
        if (buf.layer != layer || !buf.ready)
            throw std::runtime_error("expert read before readiness at layer " +
                                     std::to_string(layer));
        for (std::size_t i = 0; i < buf.ids.size(); ++i)
            if (buf.ids[i] == expert_id) return buf.slots[i];
        throw std::runtime_error("expert " + std::to_string(expert_id) +
                                 " not staged for layer " + std::to_string(layer));
    }

    void release(int layer) {
        {
            std::lock_guard lock(mu_);
            Buffer& buf = buffer_for(layer);
            if (buf.layer != layer)
                throw std::runtime_error("release of a non-resident layer");
            buf.layer = -1;
            buf.ready = false;
            --resident_;
        }
        cv_.notify_all();
    }

    int max_resident() const { return max_resident_; }

private:
    struct Buffer {
        int layer = -1; // -1 = free
        bool ready = false;
        std::vector<int> ids;
        std::vector<ExpertWeights> slots;
    };

    Buffer& buffer_for(int layer) { return buffers_[layer % 2]; }

    std::chrono::microseconds deadlock_timeout() const {
        const auto scaled = static_cast<std::int64_t>(
            options_.deadlock_factor * static_cast<double>(options_.copy_latency_us));
        return std::chrono::microseconds(std::max<std::int64_t>(scaled, 1'000'000));
    }

    void rethrow_worker_error() {
        if (worker_error_) std::rethrow_exception(worker_error_);
    }

    double now_us() const {
        return std::chrono::duration<double, std::micro>(Clock::now() - t0_).count();
    }

    void worker_loop() {
        for (;;) {
            CopyRequest req;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] { return stop_ || !queue_.empty(); });
                if (stop_) return;
                req = std::move(queue_.front());
                queue_.pop_front();

                // Claim the target buffer; it must have been released by the
                // compute thread first (double buffering).
                Buffer& buf = buffers_[req.layer % 2];
                if (!cv_.wait_for(lock, deadlock_timeout(),
                                  [&] { return stop_ || buf.layer == -1; })) {
                    worker_error_ = std::make_exception_ptr(std::runtime_error(
                        "deadlock suspected: copy engine waited for a free buffer"));
                    cv_.notify_all();
                    return;
                }
                if (stop_) return;
                buf.layer = req.layer;
                buf.ready = false;
                ++resident_;
                max_resident_ = std::max(max_resident_, resident_);
            }

            const double start = now_us();
            if (options_.copy_latency_us > 0)
                std::this_thread::sleep_for(
                    std::chrono::microseconds(options_.copy_latency_us));
            try {
                Buffer& buf = buffers_[req.layer % 2];
                const auto& experts = model_.layers[req.layer].experts;
                buf.ids = req.ids;
                buf.slots.resize(req.ids.size());
                for (std::size_t i = 0; i < req.ids.size(); ++i) {
                    const int e = req.ids[i];
                    if (e < 0 || static_cast<std::size_t>(e) >= experts.size())
                        throw std::runtime_error("copy request with bad expert id");
                    buf.slots[i] = experts[static_cast<std::size_t>(e)];
                }
            } catch (...) {
                std::lock_guard lock(mu_);
                worker_error_ = std::current_exception();
                cv_.notify_all();
                return;
            }
            const double end = now_us();
            {
                std::lock_guard ev_lock(events_mu_);
                events_.push_back(
                    {Lane::kCopy, EventKind::kCopy, req.layer, start, end, current_token_});
            }
            {
                std::lock_guard lock(mu_);
                buffers_[req.layer % 2].ready = true;
            }
            cv_.notify_all();
        }
    }

    const Model& model_;
    ExecutorOptions options_;
    std::vector<MeasuredEvent>& events_;
    std::mutex& events_mu_;
    Clock::time_point t0_;

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<CopyRequest> queue_;
    Buffer buffers_[2];
    bool stop_ = false;
    std::exception_ptr worker_error_;
    int resident_ = 0;
    int max_resident_ = 0;
    std::thread worker_;
    std::atomic<int> current_token_{-1};
};

std::vector<int> all_expert_ids(int experts) {
    std::vector<int> ids(static_cast<std::size_t>(experts));
    for (int e = 0; e < experts; ++e) ids[static_cast<std::size_t>(e)] = e;
    return ids;
}

// Mirrors moe_block but reads the expert weights from the staged device
// buffer, preserving the accumulation order so outputs match in-memory
// execution bit for bit.
Vec moe_block_device(TwoLaneEngine& engine, int layer, const Vec& s,
                     const RouterDecision& decision) {
    Vec out(s.size(), 0.0f);
    for (std::size_t i = 0; i < decision.ids.size(); ++i) {
        const ExpertWeights& w = engine.read_expert(layer, decision.ids[i]);
        const Vec y = expert_ffn(s, w);
        const float g = decision.gates[i];
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += g * y[j];
    }
    return out;
}

class EventRecorder {
public:
    EventRecorder(std::vector<MeasuredEvent>& events, std::mutex& events_mu,
                  Clock::time_point t0)
        : events_(events), events_mu_(events_mu), t0_(t0) {}

    double now_us() const {
        return std::chrono::duration<double, std::micro>(Clock::now() - t0_).count();
    }

    void record(EventKind kind, int layer, double start, int token) {
        const double end = now_us();
        std::lock_guard lock(events_mu_);
        events_.push_back({Lane::kCompute, kind, layer, start, end, token});
    }

private:
    std::vector<MeasuredEvent>& events_;
    std::mutex& events_mu_;
    Clock::time_point t0_;
};

// One offloaded forward step. `token_index` is -1 for prefill tokens.
Vec offloaded_forward(const Model& model, DecodeState& state, int token, int token_index,
                      Predictor* predictor, OffloadMode mode, TwoLaneEngine& engine,
                      EventRecorder& rec) {
    const ModelConfig& cfg = model.config;
    const bool prefill = token_index < 0;
    engine.set_token(token_index);
    if (!prefill && mode == OffloadMode::kPrefetch && predictor)
        predictor->begin_token(model, token);
    if (prefill)
        engine.submit(0, all_expert_ids(cfg.experts));

    Vec x(model.embedding.row(token), model.embedding.row(token) + cfg.hidden);
    const int position = state.position;
    RouterDecision pending;
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerWeights& w = model.layers[l];
        double t = rec.now_us();
        const Vec attn_in = rms_norm(x, w.attn_norm_gain, cfg.eps);
        const Vec attn_out =
            attention_step(attn_in, state.layers[l], w, position, cfg.head_dim);
        const Vec r = add(x, attn_out);
        const Vec s = rms_norm(r, w.moe_norm_gain, cfg.eps);
        rec.record(EventKind::kAttn, l, t, token_index);

        // Routing / prediction work, all attributed to the gate slot.
        t = rec.now_us();
        RouterDecision executed;
        if (prefill || mode == OffloadMode::kOnDemand || l == 0) {
            executed = router(s, w.gate, cfg.top_k, cfg.gating).second;
            if (!prefill && (mode == OffloadMode::kOnDemand || l == 0))
                engine.submit(l, executed.ids);
        } else {
            executed = std::move(pending);
        }
        if (!prefill && mode == OffloadMode::kPrefetch && l + 1 < cfg.layers) {
            Predictor::Context ctx;
            ctx.layer = l;
            ctx.s = &s;
            ctx.r = &r;
            ctx.executed = &executed;
            pending = predictor->predict_next(model, ctx).decision;
        }
        rec.record(EventKind::kGate, l, t, token_index);

        engine.wait_ready(l);
        if (prefill) {
            if (l + 1 < cfg.layers) engine.submit(l + 1, all_expert_ids(cfg.experts));
        } else if (mode == OffloadMode::kPrefetch && l + 1 < cfg.layers) {
            engine.submit(l + 1, pending.ids);
        }

        t = rec.now_us();
        const Vec m = moe_block_device(engine, l, s, executed);
        x = add(r, m);
        rec.record(EventKind::kExpert, l, t, token_index);
        engine.release(l);
    }
    state.position = position + 1;
    const Vec h = rms_norm(x, model.final_norm_gain, cfg.eps);
    return linear(model.unembed, h);
}

} // namespace

ExecutorResult run_offloaded_decode(const Model& model, std::span<const int> prompt, int n_new,
                                    Predictor* predictor, const ExecutorOptions& options) {
    if (prompt.empty()) throw std::invalid_argument("offloaded decode: empty prompt");
    if (n_new < 1) throw std::invalid_argument("offloaded decode: n_new must be >= 1");
    if (options.mode == OffloadMode::kPrefetch && predictor == nullptr)
        throw std::invalid_argument("offloaded decode: prefetch mode needs a predictor");

    ExecutorResult result;
    const auto t0 = Clock::now();
    std::mutex events_mu;
    EventRecorder rec(result.events, events_mu, t0);
    TwoLaneEngine engine(model, options, result.events, events_mu, t0);

    DecodeState state(model.config.layers);
    Vec logits;
    for (int tok : prompt) {
        logits = offloaded_forward(model, state, tok, -1, predictor, options.mode, engine, rec);
        if (predictor && options.mode == OffloadMode::kPrefetch)
            predictor->observe_prompt_token(model, tok);
    }

    int next = argmax_token(logits);
    for (int i = 0; i < n_new; ++i) {
        result.tokens.push_back(next);
        if (i + 1 == n_new) break;
        const auto step_start = Clock::now();
        logits = offloaded_forward(model, state, next, i, predictor, options.mode, engine, rec);
        next = argmax_token(logits);
        result.per_token_us.push_back(
            std::chrono::duration<double, std::micro>(Clock::now() - step_start).count());
    }
    result.max_resident_layers = engine.max_resident();
    return result;
}

std::vector<ScheduleReport> per_token_reports(const ExecutorResult& result) {
    int max_token = -1;
    for (const MeasuredEvent& e : result.events) max_token = std::max(max_token, e.token);
    std::vector<ScheduleReport> reports(static_cast<std::size_t>(max_token + 1));
    std::vector<double> begin(static_cast<std::size_t>(max_token + 1), 1e300);
    for (const MeasuredEvent& e : result.events) {
        if (e.token < 0) continue;
        auto& rep = reports[static_cast<std::size_t>(e.token)];
        rep.events.push_back({e.lane, e.kind, e.layer, e.start_us, e.end_us});
        begin[static_cast<std::size_t>(e.token)] =
            std::min(begin[static_cast<std::size_t>(e.token)], e.start_us);
        rep.tpot = std::max(rep.tpot, e.end_us);
    }
    for (std::size_t t = 0; t < reports.size(); ++t) {
        for (auto& e : reports[t].events) {
            e.start -= begin[t];
            e.end -= begin[t];
        }
        reports[t].tpot -= begin[t];
    }
    return reports;
}

int max_resident_from_events(const ExecutorResult& result) {
    // Residency interval per (token, layer): copy start .. expert end.
    struct Span {
        double start = 1e300, end = -1e300;
    };
    std::map<std::pair<int, int>, Span> spans;
    for (const MeasuredEvent& e : result.events) {
        auto& sp = spans[{e.token, e.layer}];
        if (e.kind == EventKind::kCopy) sp.start = std::min(sp.start, e.start_us);
        if (e.kind == EventKind::kExpert) sp.end = std::max(sp.end, e.end_us);
    }
    std::vector<std::pair<double, int>> edges;
    for (const auto& [key, sp] : spans) {
        if (sp.end < sp.start) continue;
        edges.push_back({sp.start, +1});
        edges.push_back({sp.end, -1});
    }
    std::sort(edges.begin(), edges.end());
    int cur = 0, mx = 0;
    for (const auto& [t, delta] : edges) {
        cur += delta;
        mx = std::max(mx, cur);
    }
    return mx;
}

std::string measured_timeline_json(const std::vector<MeasuredEvent>& events) {
    nlohmann::json arr = nlohmann::json::array();
    for (const MeasuredEvent& e : events)
        arr.push_back({{"lane", std::string(to_string(e.lane))},
                       {"kind", std::string(to_string(e.kind))},
                       {"layer", e.layer},
                       {"start_us", e.start_us},
                       {"end_us", e.end_us},
                       {"token", e.token}});
    return arr.dump(2);
}

} // namespace specmoe
