#include "specmoe/manifest.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <stdexcept>

namespace specmoe {

std::uint64_t fnv1a64_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot hash " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        const std::streamsize n = in.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void RunManifest::write(const std::filesystem::path& dir) const {
    nlohmann::json outs = nlohmann::json::array();
    for (const std::string& o : outputs) {
        const std::filesystem::path p(o);
        outs.push_back({{"path", p.filename().string()}, {"fnv1a64", hex64(fnv1a64_file(p))}});
    }
    nlohmann::json j{{"subcommand", subcommand},
                     {"config", nlohmann::json::parse(config_json.empty() ? "{}" : config_json)},
                     {"seed", seed},
                     {"inputs", inputs},
                     {"outputs", outs},
                     {"wall_ms", wall_ms}};
    std::ofstream out(dir / "run_manifest.json");
    if (!out) throw std::runtime_error("cannot write run_manifest.json in " + dir.string());
    out << j.dump(2) << '\n';
}

} // namespace specmoe
