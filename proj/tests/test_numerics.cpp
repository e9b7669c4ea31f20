#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "specmoe/numerics.hpp"
#include "test_util.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace specmoe;

TEST_CASE("softmax basics") {
    const Vec u = softmax({0, 0, 0, 0});
    for (float p : u) CHECK(p == doctest::Approx(0.25).epsilon(1e-6));

    const Vec big = softmax({1000.0f, 0.0f});
    CHECK(big[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(big[1] == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(std::isfinite(big[0]));

    // double-precision reference for [2,1,0]
    const Vec v = softmax({2, 1, 0});
    double z = std::exp(2.0) + std::exp(1.0) + std::exp(0.0);
    for (int i = 0; i < 3; ++i)
        CHECK(v[i] == doctest::Approx(std::exp(2.0 - i) / z).epsilon(1e-6));

    CHECK_THROWS_AS(softmax({}), std::invalid_argument);
    CHECK_THROWS_AS(softmax({std::nanf("")}), std::invalid_argument);
}

TEST_CASE("softmax sums to one for magnitudes up to 1e4") {
    Rng rng(42);
    for (int it = 0; it < 1000; ++it) {
        const std::size_t n = 1 + rng.next_u64() % 128;
        const Vec v = testutil::random_vec(rng, n, 1e4f);
        const Vec p = softmax(v);
        double sum = 0.0;
        for (float x : p) {
            CHECK(x >= 0.0f);
            sum += x;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("top_k basics and ties") {
    const TopK a = top_k({5, 1, 9}, 1);
    CHECK(a.indices == std::vector<int>{2});
    CHECK(a.values == Vec{9});

    const TopK t = top_k({3, 3, 3}, 2);
    CHECK(t.indices == std::vector<int>{0, 1});
    CHECK(t.values == Vec{3, 3});

    CHECK_THROWS_AS(top_k({1, 2}, 0), std::invalid_argument);
    CHECK_THROWS_AS(top_k({1, 2}, 3), std::invalid_argument);
}

namespace {

std::vector<int> sort_oracle(const Vec& v, int k) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
    idx.resize(k);
    return idx;
}

} // namespace

TEST_CASE("top_k agrees with a full-sort oracle") {
    Rng rng(7);
    {
        const Vec v = testutil::random_vec(rng, 128);
        CHECK(top_k(v, 8).indices == sort_oracle(v, 8));
    }
    for (int it = 0; it < 1000; ++it) {
        const std::size_t n = 1 + rng.next_u64() % 64;
        const int k = 1 + static_cast<int>(rng.next_u64() % n);
        // coarse values force ties through the tie-break rule
        Vec v(n);
        for (float& x : v) x = static_cast<float>(rng.next_u64() % 8);
        const TopK got = top_k(v, k);
        CHECK(got.indices == sort_oracle(v, k));
        std::vector<int> uniq = got.indices;
        std::sort(uniq.begin(), uniq.end());
        CHECK(std::adjacent_find(uniq.begin(), uniq.end()) == uniq.end());
    }
}

TEST_CASE("rms_norm") {
    const Vec ones = rms_norm({1, 1, 1, 1}, {1, 1, 1, 1}, 1e-12f);
    for (float x : ones) CHECK(x == doctest::Approx(1.0).epsilon(1e-6));

    const Vec zero = rms_norm({0, 0, 0}, {2, 3, 4}, 1e-5f);
    for (float x : zero) CHECK(x == 0.0f);

    const Vec v = rms_norm({3, 4}, {1, 1}, 0.0f);
    CHECK(v[0] == doctest::Approx(3.0 / std::sqrt(12.5)).epsilon(1e-6));
    CHECK(v[1] == doctest::Approx(4.0 / std::sqrt(12.5)).epsilon(1e-6));

    CHECK_THROWS_AS(rms_norm({1, 2}, {1}, 1e-5f), std::invalid_argument);
}

TEST_CASE("silu") {
    CHECK(silu(0.0f) == 0.0f);
    CHECK(silu(30.0f) == doctest::Approx(30.0).epsilon(1e-6));
    CHECK(silu(1.0f) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-6));
}

TEST_CASE("cosine_similarity") {
    Rng rng(3);
    const Vec v = testutil::random_vec(rng, 9);
    CHECK(cosine_similarity(v, v) == doctest::Approx(1.0).epsilon(1e-12));
    Vec neg = v;
    for (float& x : neg) x = -x;
    CHECK(cosine_similarity(v, neg) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(cosine_similarity({1, 0}, {1, 1}) == doctest::Approx(1.0 / std::sqrt(2.0)));
    CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 1}), std::invalid_argument);
}

TEST_CASE("kl_divergence") {
    Rng rng(5);
    const Vec p = testutil::random_simplex(rng, 8);
    CHECK(kl_divergence(p, p) == 0.0);
    CHECK(kl_divergence({1, 0}, {0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // 16-way pair against a double-precision oracle
    const Vec a = testutil::random_simplex(rng, 16);
    const Vec b = testutil::random_simplex(rng, 16);
    double want = 0.0;
    for (int i = 0; i < 16; ++i)
        want += static_cast<double>(a[i]) *
                std::log(static_cast<double>(a[i]) / static_cast<double>(b[i]));
    CHECK(kl_divergence(a, b) == doctest::Approx(want).epsilon(1e-5));

    CHECK_THROWS_AS(kl_divergence({1, 0}, {0, 1}), std::invalid_argument);
    CHECK_THROWS_AS(kl_divergence({0.7f, 0.7f}, {0.5f, 0.5f}), std::invalid_argument);
}

TEST_CASE("kl is nonnegative and zero iff equal (random simplex pairs)") {
    Rng rng(9);
    for (int it = 0; it < 1000; ++it) {
        const std::size_t n = 2 + rng.next_u64() % 32;
        const Vec p = testutil::random_simplex(rng, n);
        const Vec q = testutil::random_simplex(rng, n);
        const double kl = kl_divergence(p, q);
        CHECK(kl >= 0.0);
        float maxdiff = 0.0f;
        for (std::size_t i = 0; i < n; ++i) maxdiff = std::max(maxdiff, std::abs(p[i] - q[i]));
        if (maxdiff >= 1e-7f)
            CHECK(kl > 0.0);
        else
            CHECK(kl == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(kl_divergence(p, p) == 0.0);
    }
}

TEST_CASE("linear") {
    Mat id(3, 3);
    for (int i = 0; i < 3; ++i) id.at(i, i) = 1.0f;
    const Vec x{1, 2, 3};
    CHECK(linear(id, x) == x);

    Mat zero(2, 3);
    CHECK(linear(zero, x, {5, 6}) == Vec{5, 6});

    Rng rng(13);
    Mat w(8, 4);
    for (float& f : w.data) f = static_cast<float>(rng.next_double() - 0.5);
    const Vec v = testutil::random_vec(rng, 4);
    const Vec got = linear(w, v);
    for (int r = 0; r < 8; ++r) {
        double acc = 0.0;
        for (int c = 0; c < 4; ++c)
            acc += static_cast<double>(w.at(r, c)) * static_cast<double>(v[c]);
        CHECK(got[r] == doctest::Approx(acc).epsilon(1e-5));
    }

    CHECK_THROWS_AS(linear(w, {1, 2}), std::invalid_argument);
    CHECK_THROWS_AS(linear(w, v, {1, 2}), std::invalid_argument);
}

TEST_CASE("rng streams are reproducible and label-separated") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Vec w1(64), w2(64);
    Rng g1(derive_seed(9, "layer0.wq")), g2(derive_seed(9, "layer0.wq"));
    g1.fill_gaussian(w1, 0.05f);
    g2.fill_gaussian(w2, 0.05f);
    CHECK(w1 == w2);

    CHECK(derive_seed(9, "layer0.wq") != derive_seed(9, "layer0.wk"));
    CHECK(derive_seed(9, "x") != derive_seed(10, "x"));
}

TEST_CASE("gaussian samples have roughly unit stats") {
    Rng rng(777);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.next_gaussian();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.03);
    CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}
