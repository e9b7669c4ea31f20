// manifest.hpp - per-run provenance record written next to every CLI output.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace specmoe {

std::uint64_t fnv1a64_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

struct RunManifest {
    std::string subcommand;
    std::string config_json; // resolved configuration, JSON text
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs; // files; hashed at write time
    double wall_ms = 0.0;

    // Writes run_manifest.json into dir, hashing every listed output.
    void write(const std::filesystem::path& dir) const;
};

} // namespace specmoe
