#include "specmoe/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace specmoe {

double Rng::next_gaussian() {
    double s = 0.0;
    for (int i = 0; i < 12; ++i) s += next_double();
    return s - 6.0;
}

void Rng::fill_gaussian(std::span<float> out, float stddev) {
    for (float& x : out) x = next_gaussian(stddev);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
    // FNV-1a over the label, then two splitmix64 finalizer rounds.
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    std::uint64_t z = seed ^ h;
    for (int i = 0; i < 2; ++i) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        z = z ^ (z >> 31);
    }
    return z;
}

Vec softmax(const Vec& v) {
    if (v.empty()) throw std::invalid_argument("softmax: empty input");
    float mx = v[0];
    for (float x : v) {
        if (!std::isfinite(x)) throw std::invalid_argument("softmax: non-finite input");
        mx = std::max(mx, x);
    }
    std::vector<double> e(v.size());
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        e[i] = std::exp(static_cast<double>(v[i]) - static_cast<double>(mx));
        z += e[i];
    }
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<float>(e[i] / z);
    return out;
}

TopK top_k(const Vec& v, int k) {
    if (k < 1 || static_cast<std::size_t>(k) > v.size())
        throw std::invalid_argument("top_k: k out of range");
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b; // ties: lower index wins
    });
    TopK r;
    r.indices.assign(idx.begin(), idx.begin() + k);
    r.values.resize(k);
    for (int i = 0; i < k; ++i) r.values[i] = v[r.indices[i]];
    return r;
}

Vec rms_norm(const Vec& v, const Vec& gain, float eps) {
    if (v.size() != gain.size())
        throw std::invalid_argument("rms_norm: length mismatch");
    if (v.empty()) throw std::invalid_argument("rms_norm: empty input");
    double ss = 0.0;
    for (float x : v) ss += static_cast<double>(x) * static_cast<double>(x);
    const float scale =
        static_cast<float>(1.0 / std::sqrt(ss / static_cast<double>(v.size()) +
                                           static_cast<double>(eps)));
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * scale * gain[i];
    return out;
}

float silu(float x) {
    const double xd = static_cast<double>(x);
    return static_cast<float>(xd / (1.0 + std::exp(-xd)));
}

double cosine_similarity(const Vec& a, const Vec& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
        nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    if (na == 0.0 || nb == 0.0)
        throw std::invalid_argument("cosine_similarity: zero-norm input");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

static void check_distribution(const Vec& p, const char* name) {
    double sum = 0.0;
    for (float x : p) {
        if (!(x >= 0.0f) || x > 1.0f + 1e-5f)
            throw std::invalid_argument(std::string("kl_divergence: ") + name +
                                        " is not a distribution");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-4)
        throw std::invalid_argument(std::string("kl_divergence: ") + name +
                                    " does not sum to 1");
}

double kl_divergence(const Vec& p, const Vec& q) {
    if (p.size() != q.size())
        throw std::invalid_argument("kl_divergence: length mismatch");
    check_distribution(p, "p");
    check_distribution(q, "q");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0f) continue;
        if (q[i] == 0.0f)
            throw std::invalid_argument("kl_divergence: q has zero mass where p > 0");
        kl += static_cast<double>(p[i]) *
              std::log(static_cast<double>(p[i]) / static_cast<double>(q[i]));
    }
    // Rounding can leave a ~1e-16 negative residue when p ~= q.
    if (kl < 0.0 && kl > -1e-12) kl = 0.0;
    return kl;
}

Vec linear(const Mat& w, const Vec& x) {
    if (w.cols != x.size())
        throw std::invalid_argument("linear: dimension mismatch");
    Vec out(w.rows);
    for (std::size_t r = 0; r < w.rows; ++r) {
        const float* wr = w.row(r);
        float acc = 0.0f;
        for (std::size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
        out[r] = acc;
    }
    return out;
}

Vec linear(const Mat& w, const Vec& x, const Vec& bias) {
    if (w.rows != bias.size())
        throw std::invalid_argument("linear: bias dimension mismatch");
    Vec out = linear(w, x);
    for (std::size_t r = 0; r < out.size(); ++r) out[r] += bias[r];
    return out;
}

Vec add(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw std::invalid_argument("add: length mismatch");
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

} // namespace specmoe
