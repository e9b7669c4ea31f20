// main.cpp - specmoe command line: model generation, trace capture, default
// vectors, predictor evaluation, estimator distillation, schedule simulation,
// and the measured offloaded-decode A/B.

#include "specmoe/executor.hpp"
#include "specmoe/manifest.hpp"
#include "specmoe/metrics.hpp"
#include "specmoe/schedule.hpp"
#include "specmoe/speculation.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace specmoe;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    }
};

// --- gen-model ----------------------------------------------------------------

struct GenModelArgs {
    std::string preset;
    std::string config_path;
    std::uint64_t seed = 1;
    std::string out;
};

int cmd_gen_model(const GenModelArgs& a) {
    Stopwatch sw;
    ModelConfig cfg;
    if (!a.preset.empty())
        cfg = preset_config(a.preset);
    else if (!a.config_path.empty())
        cfg = ModelConfig::from_json(read_file(a.config_path));
    else
        throw std::invalid_argument("gen-model: give --preset or --config");
    cfg.seed = a.seed;
    cfg.validate();

    const Model model = build_model(cfg);
    save_model(model, a.out);

    RunManifest man;
    man.subcommand = "gen-model";
    man.config_json = cfg.to_json();
    man.seed = a.seed;
    man.outputs.push_back((fs::path(a.out) / "config.json").string());
    man.wall_ms = sw.ms();
    man.write(a.out);
    std::cout << "model bundle written to " << a.out << " ("
              << cfg.expert_param_bytes() / (1024.0 * 1024.0) << " MiB of expert params)\n";
    return 0;
}

// --- trace --------------------------------------------------------------------

struct TraceArgs {
    std::string model_dir;
    std::string corpus;
    std::int64_t random_tokens = -1;
    int seq_len = 256;
    std::uint64_t seed = 1;
    std::string out;
};

int cmd_trace(const TraceArgs& a) {
    Stopwatch sw;
    const Model model = load_model(a.model_dir);
    std::vector<int> tokens;
    std::string source;
    if (!a.corpus.empty()) {
        std::ifstream in(a.corpus, std::ios::binary);
        if (!in) throw std::runtime_error("corpus unreadable: " + a.corpus);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        if (model.config.vocab < 256)
            throw std::invalid_argument("trace: byte corpus needs vocab >= 256");
        tokens.reserve(bytes.size());
        for (unsigned char c : bytes) tokens.push_back(static_cast<int>(c));
        source = "corpus:" + a.corpus;
    } else {
        if (a.random_tokens == 0) throw std::invalid_argument("trace: empty workload");
        if (a.random_tokens < 0)
            throw std::invalid_argument("trace: give --corpus or --random-tokens");
        tokens = random_token_stream(a.random_tokens, model.config.vocab, a.seed);
        source = "random:" + std::to_string(a.random_tokens);
    }
    if (tokens.empty()) throw std::invalid_argument("trace: empty workload");

    TraceManifest tm;
    tm.config = model.config;
    tm.tokens = static_cast<std::int64_t>(tokens.size());
    tm.seq_len = a.seq_len;
    tm.source = source;
    tm.seed = a.seed;
    TraceWriter writer(a.out, tm);
    stream_decode_trace(model, tokens, a.seq_len,
                        [&](std::int64_t, const TraceToken& tok) {
                            writer.add_token(tok.token_id, tok.layers);
                        });
    writer.finish();

    RunManifest man;
    man.subcommand = "trace";
    man.config_json = model.config.to_json();
    man.seed = a.seed;
    man.inputs.push_back(a.model_dir);
    for (const char* f : {"manifest.json", "token_ids.moet", "s.moet", "r.moet", "m.moet",
                          "router_logits.moet", "expert_ids.moet", "expert_gates.moet",
                          "expert_outputs.moet"})
        man.outputs.push_back((fs::path(a.out) / f).string());
    man.wall_ms = sw.ms();
    man.write(a.out);
    std::cout << "trace of " << tokens.size() << " tokens written to " << a.out << "\n";
    return 0;
}

// --- default-vectors -----------------------------------------------------------

struct DefaultVectorsArgs {
    std::string trace_dir;
    std::string out;
};

int cmd_default_vectors(const DefaultVectorsArgs& a) {
    Stopwatch sw;
    TraceReader trace(a.trace_dir);
    const DefaultVectorTable table = accumulate_default_vectors(trace);
    save_default_vectors(table, a.out);

    RunManifest man;
    man.subcommand = "default-vectors";
    man.config_json = trace.manifest().config.to_json();
    man.seed = trace.manifest().seed;
    man.inputs.push_back(a.trace_dir);
    man.outputs.push_back((fs::path(a.out) / "default_vectors.moet").string());
    man.outputs.push_back((fs::path(a.out) / "counts.json").string());
    man.wall_ms = sw.ms();
    man.write(a.out);
    std::cout << "default vectors written to " << a.out << "\n";
    return 0;
}

// --- speculate -----------------------------------------------------------------

struct SpeculateArgs {
    std::string model_dir, trace_dir, dv_dir, estimator_dir, hybrid_map_path, out;
    std::vector<std::string> predictors;
    int threads = 1;
};

PredictorArtifacts load_artifacts(const std::string& dv_dir, const std::string& estimator_dir,
                                  const std::string& hybrid_map_path, int layers) {
    PredictorArtifacts art;
    if (!dv_dir.empty())
        art.table = std::make_shared<DefaultVectorTable>(load_default_vectors(dv_dir));
    if (!estimator_dir.empty())
        art.estimator = std::make_shared<EstimatorParams>(load_estimator(estimator_dir));
    if (!hybrid_map_path.empty()) art.hybrid_map = load_hybrid_map(hybrid_map_path, layers);
    return art;
}

int cmd_speculate(const SpeculateArgs& a) {
    Stopwatch sw;
    const Model model = load_model(a.model_dir);
    const PredictorArtifacts art =
        load_artifacts(a.dv_dir, a.estimator_dir, a.hybrid_map_path, model.config.layers);
    if (!art.table) throw std::invalid_argument("speculate: --default-vectors is required");

    std::vector<PredictorKind> kinds;
    for (const std::string& name : a.predictors)
        kinds.push_back(predictor_kind_from_string(name));
    if (kinds.empty()) throw std::invalid_argument("speculate: give at least one --predictor");

    const TraceManifest tm = read_trace_manifest(a.trace_dir);
    const std::int64_t n = tm.tokens;
    const int threads = std::max(1, std::min<int>(a.threads, static_cast<int>(n)));

    auto run_range = [&](std::int64_t begin, std::int64_t end, TraceEvaluator& eval) {
        TraceReader trace(a.trace_dir);
        for (std::int64_t t = begin; t < end; ++t) {
            const TraceToken tok = trace.read_token(t);
            eval.add_token(tok);
        }
    };

    // Each worker owns its predictors and evaluator; partials merge in
    // chunk order so results are deterministic for a given --threads.
    std::vector<std::vector<std::unique_ptr<Predictor>>> owned(threads);
    std::vector<std::unique_ptr<TraceEvaluator>> evals;
    for (int w = 0; w < threads; ++w) {
        std::vector<std::pair<std::string, Predictor*>> preds;
        for (PredictorKind k : kinds) {
            owned[w].push_back(make_predictor(k, art, model.config.layers));
            preds.emplace_back(std::string(to_string(k)), owned[w].back().get());
        }
        evals.push_back(std::make_unique<TraceEvaluator>(model, *art.table, std::move(preds)));
    }
    if (threads == 1) {
        run_range(0, n, *evals[0]);
    } else {
        std::vector<std::thread> pool;
        const std::int64_t chunk = (n + threads - 1) / threads;
        for (int w = 0; w < threads; ++w) {
            const std::int64_t begin = w * chunk;
            const std::int64_t end = std::min<std::int64_t>(n, begin + chunk);
            if (begin >= end) break;
            pool.emplace_back(run_range, begin, end, std::ref(*evals[w]));
        }
        for (auto& th : pool) th.join();
        for (int w = 1; w < threads; ++w) evals[0]->merge(*evals[w]);
    }

    fs::create_directories(a.out);
    write_drift_csv(fs::path(a.out) / "drift.csv", evals[0]->drift());
    write_hit_rate_csv(fs::path(a.out) / "hit_rate.csv", evals[0]->hit_rate_rows());
    write_rank_align_csv(fs::path(a.out) / "rank_align.csv", evals[0]->rank_align_rows());

    RunManifest man;
    man.subcommand = "speculate";
    man.config_json = model.config.to_json();
    man.seed = tm.seed;
    man.inputs = {a.model_dir, a.trace_dir, a.dv_dir};
    for (const char* f : {"drift.csv", "hit_rate.csv", "rank_align.csv"})
        man.outputs.push_back((fs::path(a.out) / f).string());
    man.wall_ms = sw.ms();
    man.write(a.out);
    for (PredictorKind k : kinds)
        std::cout << "mean recall@k (" << to_string(k)
                  << "): " << format_sig6(evals[0]->mean_recall(std::string(to_string(k))))
                  << "\n";
    return 0;
}

// --- train-estimator -------------------------------------------------------------

struct TrainEstimatorArgs {
    std::string trace_dir, config_path, model_dir, dv_dir, out;
    std::string inputs = "quasi";
    int m = 2, n = 4;
    float eps = 1e-5f;
    std::int64_t steps = 0;
    double lr = 1e-3;
    int batch = 32;
    std::int64_t eval_every = 50;
    std::uint64_t seed = 1;
    std::int64_t max_tokens = 0;
    double early_stop_hit = 0.0;
};

int cmd_train_estimator(const TrainEstimatorArgs& a) {
    Stopwatch sw;
    TraceReader trace(a.trace_dir);
    const ModelConfig& mc = trace.manifest().config;

    EstimatorConfig cfg;
    if (!a.config_path.empty()) {
        cfg = EstimatorConfig::from_json(read_file(a.config_path));
    } else {
        cfg.m = a.m;
        cfg.n = a.n;
        cfg.eps = a.eps;
    }
    cfg.d = mc.hidden;
    cfg.experts = mc.experts;
    cfg.layers = mc.layers;
    cfg.seed = a.seed;
    cfg.validate();

    const DistillInput mode =
        a.inputs == "quasi" ? DistillInput::kQuasiHidden : DistillInput::kSNext;
    // Without an explicit bundle the traced model is rebuilt from the
    // manifest's config echo (weights are a pure function of config + seed).
    const Model model = a.model_dir.empty() ? build_model(mc) : load_model(a.model_dir);
    std::unique_ptr<DefaultVectorTable> table;
    if (mode == DistillInput::kQuasiHidden) {
        if (a.dv_dir.empty())
            throw std::invalid_argument("train-estimator: quasi inputs need --default-vectors");
        table = std::make_unique<DefaultVectorTable>(load_default_vectors(a.dv_dir));
    }
    const DistillDataset data =
        build_distill_dataset(trace, model, table.get(), mode, a.max_tokens);

    TrainHyper hyper;
    hyper.lr = a.lr;
    hyper.batch_tokens = a.batch;
    hyper.max_steps = a.steps;
    hyper.eval_every = a.eval_every;
    hyper.seed = a.seed;
    hyper.k = mc.top_k;
    hyper.early_stop_hit_rate = a.early_stop_hit;
    TrainResult result = train_estimator(data, cfg, hyper);

    save_estimator(result.params, a.out);
    write_curve_csv(fs::path(a.out) / "curve.csv", result.curve);

    RunManifest man;
    man.subcommand = "train-estimator";
    man.config_json = cfg.to_json();
    man.seed = a.seed;
    man.inputs = {a.trace_dir};
    if (!a.model_dir.empty()) man.inputs.push_back(a.model_dir);
    man.outputs.push_back((fs::path(a.out) / "estimator.json").string());
    man.outputs.push_back((fs::path(a.out) / "curve.csv").string());
    man.wall_ms = sw.ms();
    man.write(a.out);
    const CurvePoint& last = result.curve.back();
    std::cout << "trained on " << last.tokens_seen << " tokens; val hit rate "
              << format_sig6(last.val_hit_rate) << ", val KL " << format_sig6(last.val_kl)
              << "\n";
    return 0;
}

// --- simulate -----------------------------------------------------------------

struct SimulateArgs {
    std::string timing;
    int k = 0;
    std::string mode = "both";
    std::string out;
    std::string dump_timing;
};

int cmd_simulate(const SimulateArgs& a) {
    Stopwatch sw;
    const TimingModel tm = resolve_timing(a.timing, a.k);
    fs::create_directories(a.out);
    if (!a.dump_timing.empty()) {
        std::ofstream out(a.dump_timing);
        out << tm.to_json() << '\n';
    }

    std::vector<SummaryRow> rows;
    RunManifest man;
    man.subcommand = "simulate";
    man.config_json = tm.to_json();

    auto emit = [&](const char* mode, const ScheduleReport& rep) {
        rows.push_back({mode, rep.tpot, breakdown(rep)});
        const fs::path p = fs::path(a.out) / (std::string("timeline_") + mode + ".json");
        write_timeline_json(p, rep.events);
        man.outputs.push_back(p.string());
        std::cout << mode << ": tpot " << format_sig6(rep.tpot) << " us, copy_frac "
                  << format_sig6(rows.back().fracs.copy_frac) << "\n";
    };

    const bool both = a.mode == "both";
    if (a.mode == "on_demand" || both) emit("on_demand", simulate_on_demand(tm));
    if (a.mode == "prefetch" || both) emit("prefetch", simulate_prefetch(tm));
    if (a.mode == "analytic" || both) {
        const double dt = analytic_improvement(tm);
        double serial = 0.0;
        for (int l = 0; l < tm.layers(); ++l)
            serial += tm.t_compute(l) + (l == 0 ? tm.cold_copy() : tm.t_copy[l]);
        json j{{"delta_t_us", dt},
               {"t_on_demand_closed_form_us", serial},
               {"t_prefetch_bound_us", serial - dt}};
        std::ofstream out(fs::path(a.out) / "analytic.json");
        out << j.dump(2) << '\n';
        man.outputs.push_back((fs::path(a.out) / "analytic.json").string());
        std::cout << "analytic: delta_t " << format_sig6(dt) << " us\n";
    }
    if (both) {
        const double ond = rows[0].tpot_us, pf = rows[1].tpot_us;
        if (pf > ond)
            throw std::runtime_error("simulate: prefetch tpot exceeds on-demand tpot");
        std::cout << "simulated improvement: " << format_sig6(ond - pf) << " us vs analytic "
                  << format_sig6(analytic_improvement(tm)) << " us\n";
    }
    if (!rows.empty()) {
        write_summary_csv(fs::path(a.out) / "summary.csv", rows);
        man.outputs.push_back((fs::path(a.out) / "summary.csv").string());
    }
    man.wall_ms = sw.ms();
    man.write(a.out);
    return 0;
}

// --- e2e ----------------------------------------------------------------------

struct E2eArgs {
    std::string model_dir, dv_dir, estimator_dir, hybrid_map_path, out;
    std::string predictor = "oracle";
    std::string mode = "prefetch";
    std::int64_t copy_latency_us = 0;
    std::string prompt = "The quick brown fox jumps over the lazy dog";
    int new_tokens = 32;
    int runs = 1;
};

int cmd_e2e(const E2eArgs& a) {
    Stopwatch sw;
    const Model model = load_model(a.model_dir);
    if (a.prompt.empty()) throw std::invalid_argument("e2e: empty prompt");
    if (model.config.vocab < 256)
        throw std::invalid_argument("e2e: byte prompt needs vocab >= 256");
    std::vector<int> prompt;
    for (unsigned char c : a.prompt) prompt.push_back(static_cast<int>(c));

    const PredictorArtifacts art =
        load_artifacts(a.dv_dir, a.estimator_dir, a.hybrid_map_path, model.config.layers);
    ExecutorOptions opt;
    opt.mode = offload_mode_from_string(a.mode);
    opt.copy_latency_us = a.copy_latency_us;

    fs::create_directories(a.out);
    std::vector<double> token_means;
    ExecutorResult last;
    for (int run = 0; run < a.runs; ++run) {
        std::unique_ptr<Predictor> predictor;
        if (opt.mode == OffloadMode::kPrefetch)
            predictor = make_predictor(predictor_kind_from_string(a.predictor), art,
                                       model.config.layers);
        last = run_offloaded_decode(model, prompt, a.new_tokens, predictor.get(), opt);
        double sum = 0.0;
        for (double t : last.per_token_us) sum += t;
        token_means.push_back(last.per_token_us.empty()
                                  ? 0.0
                                  : sum / static_cast<double>(last.per_token_us.size()));
    }

    std::cout << "tokens:";
    for (int t : last.tokens) std::cout << ' ' << t;
    std::cout << "\n";
    std::string text;
    for (int t : last.tokens)
        text += (t >= 32 && t < 127) ? static_cast<char>(t) : '.';
    std::cout << "text: " << text << "\n";
    for (std::size_t run = 0; run < token_means.size(); ++run)
        std::cout << "run " << run << ": mean tpot " << format_sig6(token_means[run])
                  << " us over " << last.per_token_us.size() << " decode steps\n";

    // Aggregate decode-phase overlap statistics from the last run.
    const auto reports = per_token_reports(last);
    RunningMean compute_frac, copy_frac, idle_frac;
    for (const auto& rep : reports) {
        const BreakdownFractions f = breakdown(rep);
        compute_frac.add(f.compute_frac);
        copy_frac.add(f.copy_frac);
        idle_frac.add(f.idle_frac);
    }
    std::cout << "mean fractions: compute " << format_sig6(compute_frac.mean()) << ", copy "
              << format_sig6(copy_frac.mean()) << ", idle " << format_sig6(idle_frac.mean())
              << "\n";
    std::cout << "max resident layers: " << last.max_resident_layers << "\n";

    const fs::path timeline = fs::path(a.out) / "timeline_measured.json";
    std::ofstream tj(timeline);
    tj << measured_timeline_json(last.events) << '\n';
    tj.close();
    std::vector<SummaryRow> rows{{a.mode,
                                  token_means.empty() ? 0.0 : token_means.back(),
                                  {compute_frac.mean(), copy_frac.mean(), idle_frac.mean()}}};
    write_summary_csv(fs::path(a.out) / "summary.csv", rows);

    RunManifest man;
    man.subcommand = "e2e";
    man.config_json = model.config.to_json();
    man.seed = model.config.seed;
    man.inputs = {a.model_dir};
    man.outputs.push_back(timeline.string());
    man.outputs.push_back((fs::path(a.out) / "summary.csv").string());
    man.wall_ms = sw.ms();
    man.write(a.out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"specmoe - toy MoE decode engine with speculative expert prefetching"};
    app.require_subcommand(1);

    GenModelArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-model", "build a seeded model bundle");
    gen_cmd->add_option("--preset", gen.preset, "preset name: toy | toy-large");
    gen_cmd->add_option("--config", gen.config_path, "model config JSON path");
    gen_cmd->add_option("--seed", gen.seed, "weight seed");
    gen_cmd->add_option("--out", gen.out, "output bundle directory")->required();

    TraceArgs tr;
    auto* tr_cmd = app.add_subcommand("trace", "record a decode trace bundle");
    tr_cmd->add_option("--model", tr.model_dir, "model bundle directory")->required();
    tr_cmd->add_option("--corpus", tr.corpus, "byte corpus path");
    tr_cmd->add_option("--random-tokens", tr.random_tokens, "synthetic workload size");
    tr_cmd->add_option("--seq-len", tr.seq_len, "state reset period");
    tr_cmd->add_option("--seed", tr.seed, "workload seed");
    tr_cmd->add_option("--out", tr.out, "output trace directory")->required();

    DefaultVectorsArgs dv;
    auto* dv_cmd = app.add_subcommand("default-vectors", "aggregate per-expert mean outputs");
    dv_cmd->add_option("--trace", dv.trace_dir, "trace bundle directory")->required();
    dv_cmd->add_option("--out", dv.out, "output directory")->required();

    SpeculateArgs sp;
    auto* sp_cmd = app.add_subcommand("speculate", "evaluate predictors against a trace");
    sp_cmd->add_option("--model", sp.model_dir)->required();
    sp_cmd->add_option("--trace", sp.trace_dir)->required();
    sp_cmd->add_option("--default-vectors", sp.dv_dir)->required();
    sp_cmd->add_option("--predictor", sp.predictors,
                       "baseline-s | router-pf | est-pf | hybrid | oracle (repeatable)")
        ->required();
    sp_cmd->add_option("--estimator", sp.estimator_dir, "estimator checkpoint directory");
    sp_cmd->add_option("--hybrid-map", sp.hybrid_map_path, "JSON layer->variant map");
    sp_cmd->add_option("--threads", sp.threads, "parallel evaluation workers");
    sp_cmd->add_option("--out", sp.out)->required();

    TrainEstimatorArgs te;
    auto* te_cmd = app.add_subcommand("train-estimator", "distill the router estimator");
    te_cmd->add_option("--trace", te.trace_dir)->required();
    te_cmd->add_option("--config", te.config_path, "estimator config JSON (m, n, eps)");
    te_cmd->add_option("--model", te.model_dir, "model bundle (default: rebuild from trace)");
    te_cmd->add_option("--default-vectors", te.dv_dir);
    te_cmd->add_option("--inputs", te.inputs, "quasi | s-next");
    te_cmd->add_option("--m", te.m, "reduction factor");
    te_cmd->add_option("--n", te.n, "expansion factor");
    te_cmd->add_option("--steps", te.steps)->required();
    te_cmd->add_option("--lr", te.lr);
    te_cmd->add_option("--batch", te.batch, "tokens per step");
    te_cmd->add_option("--eval-every", te.eval_every, "steps between curve points");
    te_cmd->add_option("--seed", te.seed);
    te_cmd->add_option("--max-tokens", te.max_tokens, "cap on trace tokens used");
    te_cmd->add_option("--early-stop-hit", te.early_stop_hit, "stop at this val hit rate");
    te_cmd->add_option("--out", te.out)->required();

    SimulateArgs sim;
    auto* sim_cmd = app.add_subcommand("simulate", "schedule simulator and analytic model");
    sim_cmd->add_option("--timing", sim.timing, "geometry preset name or timing JSON path")
        ->required();
    sim_cmd->add_option("--k", sim.k, "active experts per token (geometry presets)");
    sim_cmd->add_option("--mode", sim.mode, "on_demand | prefetch | both | analytic");
    sim_cmd->add_option("--dump-timing", sim.dump_timing, "write resolved timing JSON here");
    sim_cmd->add_option("--out", sim.out)->required();

    E2eArgs e2e;
    auto* e2e_cmd = app.add_subcommand("e2e", "measured offloaded decode");
    e2e_cmd->add_option("--model", e2e.model_dir)->required();
    e2e_cmd->add_option("--predictor", e2e.predictor);
    e2e_cmd->add_option("--default-vectors", e2e.dv_dir);
    e2e_cmd->add_option("--estimator", e2e.estimator_dir);
    e2e_cmd->add_option("--hybrid-map", e2e.hybrid_map_path);
    e2e_cmd->add_option("--copy-latency-us", e2e.copy_latency_us, "injected per-copy latency");
    e2e_cmd->add_option("--mode", e2e.mode, "on_demand | prefetch");
    e2e_cmd->add_option("--prompt", e2e.prompt, "byte prompt");
    e2e_cmd->add_option("--new-tokens", e2e.new_tokens);
    e2e_cmd->add_option("--runs", e2e.runs);
    e2e_cmd->add_option("--out", e2e.out)->required();

    try {
        app.parse(argc, argv);
        if (gen_cmd->parsed()) return cmd_gen_model(gen);
        if (tr_cmd->parsed()) return cmd_trace(tr);
        if (dv_cmd->parsed()) return cmd_default_vectors(dv);
        if (sp_cmd->parsed()) return cmd_speculate(sp);
        if (te_cmd->parsed()) return cmd_train_estimator(te);
        if (sim_cmd->parsed()) return cmd_simulate(sim);
        if (e2e_cmd->parsed()) return cmd_e2e(e2e);
        std::cerr << "error: no subcommand\n";
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return 0; // --help
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
