// Shared helpers for the test suites.

#pragma once

#include "specmoe/model.hpp"
#include "specmoe/numerics.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace testutil {

inline specmoe::ModelConfig tiny_config(std::uint64_t seed = 11) {
    specmoe::ModelConfig c;
    c.layers = 3;
    c.experts = 6;
    c.top_k = 2;
    c.hidden = 16;
    c.expert_hidden = 24;
    c.vocab = 32;
    c.head_dim = 8;
    c.seed = seed;
    return c;
}

inline specmoe::Vec random_vec(specmoe::Rng& rng, std::size_t n, float scale = 1.0f) {
    specmoe::Vec v(n);
    for (float& x : v) x = static_cast<float>((rng.next_double() * 2.0 - 1.0) * scale);
    return v;
}

inline specmoe::Vec random_simplex(specmoe::Rng& rng, std::size_t n) {
    specmoe::Vec v(n);
    double sum = 0.0;
    for (float& x : v) {
        const double e = -std::log(1.0 - rng.next_double());
        x = static_cast<float>(e);
        sum += e;
    }
    for (float& x : v) x = static_cast<float>(x / sum);
    // nudge so the f32 values sum to 1 closely
    return v;
}

// Unique scratch directory, removed when the object dies.
class ScratchDir {
public:
    explicit ScratchDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        dir_ = std::filesystem::temp_directory_path() /
               ("specmoe_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter++));
        std::filesystem::create_directories(dir_);
    }
    ~ScratchDir() {
        std::error_code ec;
        std::filesystem::remove_all(dir_, ec);
    }
    const std::filesystem::path& path() const { return dir_; }

private:
    std::filesystem::path dir_;
};

} // namespace testutil
