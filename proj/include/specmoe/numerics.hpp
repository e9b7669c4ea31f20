// numerics.hpp - dense f32 vector/matrix kernels and the seeded PRNG used
// for all weight initialization.

#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace specmoe {

using Vec = std::vector<float>;

// Row-major single-precision matrix.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float* row(std::size_t r) { return data.data() + r * cols; }
    const float* row(std::size_t r) const { return data.data() + r * cols; }

    float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// splitmix64 stream. All randomness in the project flows through this
// generator so that a single 64-bit seed reproduces every artifact
// bit-for-bit. The gaussian path uses only IEEE adds/multiplies (no libm,
// no FMA), so streams are portable across conforming platforms.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Zero-mean, unit-variance sample via a 12-term uniform sum.
    // Pure additions keep the stream identical on every IEEE-754 platform;
    // the tails are clipped at +-6 sigma, which is irrelevant for init.
    double next_gaussian();

    float next_gaussian(float stddev) {
        return static_cast<float>(next_gaussian() * static_cast<double>(stddev));
    }

    void fill_gaussian(std::span<float> out, float stddev);

private:
    std::uint64_t state_;
};

// Labeled sub-seed derivation: hashing the label into the seed gives every
// tensor/stage an independent stream, so adding a consumer never shifts
// the draws of another.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view label);

// --- kernels -------------------------------------------------------------

// Max-subtracted softmax. Throws std::invalid_argument on empty or
// non-finite input.
Vec softmax(const Vec& v);

struct TopK {
    std::vector<int> indices; // sorted by descending value, ties lower index first
    Vec values;
};

// k largest entries of v. Throws std::invalid_argument if k is out of
// [1, len(v)].
TopK top_k(const Vec& v, int k);

// out[i] = v[i] / sqrt(mean(v^2) + eps) * gain[i]
Vec rms_norm(const Vec& v, const Vec& gain, float eps);

// x * sigmoid(x)
float silu(float x);

// dot(a,b) / (|a||b|), accumulated in double. Throws on zero-norm input.
double cosine_similarity(const Vec& a, const Vec& b);

// sum p_i * log(p_i / q_i) with 0*log(0) := 0. Both arguments must be
// probability vectors over the same support; q_i == 0 with p_i > 0 throws.
double kl_divergence(const Vec& p, const Vec& q);

// W x (+ b)
Vec linear(const Mat& w, const Vec& x);
Vec linear(const Mat& w, const Vec& x, const Vec& bias);

Vec add(const Vec& a, const Vec& b);

} // namespace specmoe
