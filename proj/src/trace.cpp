#include "specmoe/trace.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>

namespace specmoe {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kFieldNames[] = {"token_ids",  "s",          "r",
                                       "m",          "router_logits", "expert_ids",
                                       "expert_gates", "expert_outputs"};

json manifest_to_json(const TraceManifest& m) {
    json fields = json::array();
    const auto N = static_cast<std::uint64_t>(m.tokens);
    const auto L = static_cast<std::uint64_t>(m.config.layers);
    const auto H = static_cast<std::uint64_t>(m.config.hidden);
    const auto E = static_cast<std::uint64_t>(m.config.experts);
    const auto K = static_cast<std::uint64_t>(m.config.top_k);
    const std::vector<std::pair<std::string, std::vector<std::uint64_t>>> shapes = {
        {"token_ids", {N}},          {"s", {N, L, H}},
        {"r", {N, L, H}},            {"m", {N, L, H}},
        {"router_logits", {N, L, E}}, {"expert_ids", {N, L, K}},
        {"expert_gates", {N, L, K}}, {"expert_outputs", {N, L, K, H}}};
    for (const auto& [name, dims] : shapes)
        fields.push_back({{"name", name}, {"dims", dims}});
    return json{{"config", json::parse(m.config.to_json())},
                {"tokens", m.tokens},
                {"seq_len", m.seq_len},
                {"source", m.source},
                {"seed", m.seed},
                {"fields", fields}};
}

TraceManifest manifest_from_json(const json& j) {
    TraceManifest m;
    m.config = ModelConfig::from_json(j.at("config").dump());
    m.tokens = j.at("tokens").get<std::int64_t>();
    m.seq_len = j.at("seq_len").get<int>();
    m.source = j.value("source", std::string{});
    m.seed = j.value("seed", std::uint64_t{0});
    return m;
}

} // namespace

TraceManifest read_trace_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("trace: cannot read " + (dir / "manifest.json").string());
    json j = json::parse(in);
    return manifest_from_json(j);
}

TraceWriter::TraceWriter(const fs::path& dir, const TraceManifest& manifest)
    : dir_(dir), manifest_(manifest) {
    manifest_.config.validate();
    if (manifest_.tokens < 1) throw std::invalid_argument("trace: empty workload");
    fs::create_directories(dir);
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("trace: cannot write manifest");
    out << manifest_to_json(manifest_).dump(2) << '\n';

    const auto N = static_cast<std::uint64_t>(manifest_.tokens);
    const auto L = static_cast<std::uint64_t>(manifest_.config.layers);
    const auto H = static_cast<std::uint64_t>(manifest_.config.hidden);
    const auto E = static_cast<std::uint64_t>(manifest_.config.experts);
    const auto K = static_cast<std::uint64_t>(manifest_.config.top_k);
    token_ids_ = std::make_unique<moet::Writer>(dir / "token_ids.moet",
                                                std::vector<std::uint64_t>{N});
    s_ = std::make_unique<moet::Writer>(dir / "s.moet", std::vector<std::uint64_t>{N, L, H});
    r_ = std::make_unique<moet::Writer>(dir / "r.moet", std::vector<std::uint64_t>{N, L, H});
    m_ = std::make_unique<moet::Writer>(dir / "m.moet", std::vector<std::uint64_t>{N, L, H});
    logits_ = std::make_unique<moet::Writer>(dir / "router_logits.moet",
                                             std::vector<std::uint64_t>{N, L, E});
    ids_ = std::make_unique<moet::Writer>(dir / "expert_ids.moet",
                                          std::vector<std::uint64_t>{N, L, K});
    gates_ = std::make_unique<moet::Writer>(dir / "expert_gates.moet",
                                            std::vector<std::uint64_t>{N, L, K});
    outputs_ = std::make_unique<moet::Writer>(dir / "expert_outputs.moet",
                                              std::vector<std::uint64_t>{N, L, K, H});
}

void TraceWriter::add_token(int token_id, const std::vector<LayerTraceRecord>& layers) {
    const ModelConfig& cfg = manifest_.config;
    if (layers.size() != static_cast<std::size_t>(cfg.layers))
        throw std::invalid_argument("trace: wrong layer count in record");
    const float tok = static_cast<float>(token_id);
    token_ids_->append({&tok, 1});
    for (const LayerTraceRecord& rec : layers) {
        if (rec.s.size() != static_cast<std::size_t>(cfg.hidden) ||
            rec.decision.ids.size() != static_cast<std::size_t>(cfg.top_k) ||
            rec.expert_outputs.size() != static_cast<std::size_t>(cfg.top_k))
            throw std::invalid_argument("trace: malformed layer record");
        s_->append(rec.s);
        r_->append(rec.r);
        m_->append(rec.m);
        logits_->append(rec.router_logits);
        Vec idsf(cfg.top_k), gates(cfg.top_k);
        for (int i = 0; i < cfg.top_k; ++i) {
            idsf[i] = static_cast<float>(rec.decision.ids[i]);
            gates[i] = rec.decision.gates[i];
        }
        ids_->append(idsf);
        gates_->append(gates);
        for (const Vec& out : rec.expert_outputs) outputs_->append(out);
    }
    ++written_;
}

void TraceWriter::finish() {
    if (written_ != manifest_.tokens)
        throw std::runtime_error("trace: token count mismatch at finish");
    for (auto* w : {token_ids_.get(), s_.get(), r_.get(), m_.get(), logits_.get(), ids_.get(),
                    gates_.get(), outputs_.get()})
        w->close();
}

TraceReader::TraceReader(const fs::path& dir) : manifest_(read_trace_manifest(dir)) {
    for (const char* name : kFieldNames) {
        const fs::path p = dir / (std::string(name) + ".moet");
        if (!fs::exists(p)) throw std::runtime_error("trace: missing field file " + p.string());
    }
    token_ids_ = std::make_unique<moet::Reader>(dir / "token_ids.moet");
    s_ = std::make_unique<moet::Reader>(dir / "s.moet");
    r_ = std::make_unique<moet::Reader>(dir / "r.moet");
    m_ = std::make_unique<moet::Reader>(dir / "m.moet");
    logits_ = std::make_unique<moet::Reader>(dir / "router_logits.moet");
    ids_ = std::make_unique<moet::Reader>(dir / "expert_ids.moet");
    gates_ = std::make_unique<moet::Reader>(dir / "expert_gates.moet");
    outputs_ = std::make_unique<moet::Reader>(dir / "expert_outputs.moet");
}

TraceToken TraceReader::read_token(std::int64_t t) {
    const ModelConfig& cfg = manifest_.config;
    if (t < 0 || t >= manifest_.tokens)
        throw std::invalid_argument("trace: token index out of range");
    if (t != cursor_) {
        const auto L = static_cast<std::uint64_t>(cfg.layers);
        const auto H = static_cast<std::uint64_t>(cfg.hidden);
        const auto E = static_cast<std::uint64_t>(cfg.experts);
        const auto K = static_cast<std::uint64_t>(cfg.top_k);
        const auto u = static_cast<std::uint64_t>(t);
        token_ids_->seek_elements(u);
        s_->seek_elements(u * L * H);
        r_->seek_elements(u * L * H);
        m_->seek_elements(u * L * H);
        logits_->seek_elements(u * L * E);
        ids_->seek_elements(u * L * K);
        gates_->seek_elements(u * L * K);
        outputs_->seek_elements(u * L * K * H);
        cursor_ = t;
    }

    TraceToken out;
    float tok = 0.0f;
    token_ids_->read_chunk({&tok, 1});
    out.token_id = static_cast<int>(tok);
    out.layers.resize(cfg.layers);
    for (LayerTraceRecord& rec : out.layers) {
        rec.s.resize(cfg.hidden);
        rec.r.resize(cfg.hidden);
        rec.m.resize(cfg.hidden);
        rec.router_logits.resize(cfg.experts);
        s_->read_chunk(rec.s);
        r_->read_chunk(rec.r);
        m_->read_chunk(rec.m);
        logits_->read_chunk(rec.router_logits);
        Vec idsf(cfg.top_k);
        rec.decision.gates.resize(cfg.top_k);
        ids_->read_chunk(idsf);
        gates_->read_chunk(rec.decision.gates);
        rec.decision.ids.resize(cfg.top_k);
        for (int i = 0; i < cfg.top_k; ++i) rec.decision.ids[i] = static_cast<int>(idsf[i]);
        rec.expert_outputs.assign(cfg.top_k, Vec(cfg.hidden));
        for (Vec& v : rec.expert_outputs) outputs_->read_chunk(v);
    }
    cursor_ = t + 1;
    return out;
}

void stream_decode_trace(const Model& model, std::span<const int> tokens, int seq_len,
                         const std::function<void(std::int64_t, const TraceToken&)>& fn) {
    if (tokens.empty()) throw std::invalid_argument("trace: empty workload");
    if (seq_len < 1) throw std::invalid_argument("trace: seq_len must be >= 1");
    DecodeState state(model.config.layers);
    TraceToken current;
    TraceSink sink = [&](int layer, const LayerTraceRecord& rec) {
        current.layers[static_cast<std::size_t>(layer)] = rec;
    };
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(tokens.size()); ++i) {
        if (i % seq_len == 0) state = DecodeState(model.config.layers);
        current.token_id = tokens[static_cast<std::size_t>(i)];
        current.layers.assign(model.config.layers, {});
        forward_decode(model, state, current.token_id, &sink);
        fn(i, current);
    }
}

std::vector<int> random_token_stream(std::int64_t n, int vocab, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "token-stream"));
    std::vector<int> out(static_cast<std::size_t>(n));
    for (auto& t : out)
        t = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(vocab));
    return out;
}

} // namespace specmoe
