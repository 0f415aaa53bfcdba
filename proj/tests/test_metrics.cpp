#include <doctest.h>

#include <cmath>

#include "iinla/metrics.hpp"
#include "test_util.hpp"

using namespace iinla;

namespace {
constexpr double kPi = 3.14159265358979323846;

std::vector<std::vector<double>> gaussian_cloud(int n, int dim, double mean, double sd,
                                                std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::vector<double>> out(n, std::vector<double>(dim));
    for (auto& v : out)
        for (double& x : v) x = mean + sd * rng.normal();
    return out;
}
}  // namespace

TEST_CASE("rmse basics and properties") {
    CHECK(metrics::rmse({1.0, 2.0}, {1.0, 2.0}) == doctest::Approx(0.0));
    CHECK(metrics::rmse({2.0, 3.0, 4.0}, {1.0, 2.0, 3.0}) == doctest::Approx(1.0));
    CHECK(metrics::rmse({0.0, 0.0}, {3.0, 4.0}) == doctest::Approx(std::sqrt(12.5)));
    CHECK_THROWS_AS(metrics::rmse({1.0}, {1.0, 2.0}), DimensionMismatch);

    Rng rng(4);
    std::vector<double> a(20), b(20), c(20);
    for (int i = 0; i < 20; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal();
        c[i] = rng.normal();
    }
    CHECK(metrics::rmse(a, b) == doctest::Approx(metrics::rmse(b, a)));
    CHECK(metrics::rmse(a, c) <= metrics::rmse(a, b) + metrics::rmse(b, c) + 1e-12);
}

TEST_CASE("mnll closed forms") {
    SUBCASE("standard normal at its mean") {
        const MixtureMarginals m({1.0}, {{0.0}}, {{1.0}});
        CHECK(metrics::mnll(m, {0.0}) == doctest::Approx(0.5 * std::log(2.0 * kPi)));
    }

    SUBCASE("monotone in sigma beyond one") {
        double prev = -1e9;
        for (double sd : {1.0, 2.0, 5.0, 20.0}) {
            const MixtureMarginals m({1.0}, {{0.0}}, {{sd * sd}});
            const double v = metrics::mnll(m, {0.0});
            CHECK(v > prev);
            prev = v;
        }
    }

    SUBCASE("mixture density equals the direct sum") {
        const MixtureMarginals m({0.4, 0.6}, {{-1.0}, {2.0}}, {{0.5}, {1.5}});
        const double x = 0.7;
        auto comp = [&](double w, double mu, double v) {
            return w / std::sqrt(2.0 * kPi * v) * std::exp(-0.5 * (x - mu) * (x - mu) / v);
        };
        const double direct = -std::log(comp(0.4, -1.0, 0.5) + comp(0.6, 2.0, 1.5));
        CHECK(metrics::mnll(m, {x}) == doctest::Approx(direct).epsilon(1e-12));
    }

    SUBCASE("underflow saturates instead of overflowing") {
        const MixtureMarginals big({1.0}, {{0.0}}, {{1e-12}});
        const double v = metrics::mnll(big, {1e6});
        CHECK(std::isfinite(v));
        CHECK(v > 1e20);
        // a quadratic that overflows the exponent range hits the cap
        const MixtureMarginals extreme({1.0}, {{0.0}}, {{1e-12}});
        const double capped = metrics::mnll(extreme, {1e200});
        CHECK(capped == doctest::Approx(1e300));
    }

    SUBCASE("decreases as the mean approaches the truth") {
        double prev = 1e9;
        for (double mean : {3.0, 2.0, 1.0, 0.0}) {
            const MixtureMarginals m({1.0}, {{mean}}, {{1.0}});
            const double v = metrics::mnll(m, {0.0});
            CHECK(v < prev);
            prev = v;
        }
    }
}

TEST_CASE("mmd hand-expanded two-sample case") {
    // identical two-point sets: unbiased value is k(a,b) - 1 <= 0
    const std::vector<std::vector<double>> s{{0.0}, {1.0}};
    const double bw = 1.0;
    const double kab = std::exp(-0.5);
    CHECK(metrics::mmd(s, s, bw) == doctest::Approx(kab - 1.0).epsilon(1e-12));
    CHECK(metrics::mmd(s, s, bw) <= 0.0);
    CHECK_THROWS_AS(metrics::mmd({{0.0}}, s, bw), metrics::TooFewSamples);
}

TEST_CASE("mmd null behavior and separation") {
    const auto a = gaussian_cloud(300, 3, 0.0, 1.0, 11);
    const auto b = gaussian_cloud(300, 3, 0.0, 1.0, 12);

    // permutation null scale
    Rng rng(5);
    std::vector<std::vector<double>> pool(a);
    pool.insert(pool.end(), b.begin(), b.end());
    std::vector<double> null_vals;
    for (int rep = 0; rep < 20; ++rep) {
        const std::vector<int> perm = rng.permutation(static_cast<int>(pool.size()));
        std::vector<std::vector<double>> pa, pb;
        for (std::size_t i = 0; i < pool.size(); ++i)
            (i < a.size() ? pa : pb).push_back(pool[perm[i]]);
        null_vals.push_back(metrics::mmd(pa, pb, 1.0));
    }
    double nm = 0.0, nv = 0.0;
    for (double v : null_vals) nm += v;
    nm /= null_vals.size();
    for (double v : null_vals) nv += (v - nm) * (v - nm);
    const double null_sd = std::sqrt(nv / (null_vals.size() - 1.0));

    CHECK(std::abs(metrics::mmd(a, b, 1.0)) <= 3.0 * null_sd + 1e-12);

    const auto far = gaussian_cloud(300, 3, 3.0, 1.0, 13);
    CHECK(metrics::mmd(a, far, 1.0) > 10.0 * null_sd);
}

TEST_CASE("mmd symmetry and sample-order invariance") {
    const auto a = gaussian_cloud(40, 2, 0.0, 1.0, 21);
    auto b = gaussian_cloud(40, 2, 0.5, 1.2, 22);
    const double v1 = metrics::mmd(a, b, 0.8);
    CHECK(metrics::mmd(b, a, 0.8) == doctest::Approx(v1).epsilon(1e-12));
    std::reverse(b.begin(), b.end());
    CHECK(metrics::mmd(a, b, 0.8) == doctest::Approx(v1).epsilon(1e-12));
}

TEST_CASE("scramble removes cross-time correlation, keeps marginals") {
    // AR(1)-correlated trajectories
    Rng rng(31);
    const int nt = 50, np = 2000;
    oracle::ParticleEnsemble ens;
    ens.particles.assign(nt, std::vector<std::pair<double, double>>(np));
    for (int p = 0; p < np; ++p) {
        double x = rng.normal();
        for (int t = 0; t < nt; ++t) {
            ens.particles[t][p] = {x, 0.0};
            x = 0.95 * x + std::sqrt(1.0 - 0.95 * 0.95) * rng.normal();
        }
    }

    const auto scrambled = metrics::scramble(ens, 99);

    auto corr = [&](const std::vector<std::vector<double>>& samples, int t) {
        double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (int p = 0; p < np; ++p) {
            const double x = samples[p][t], y = samples[p][t + 1];
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        const double cx = sxx / np - sx / np * (sx / np);
        const double cy = syy / np - sy / np * (sy / np);
        const double cxy = sxy / np - sx / np * (sy / np);
        return cxy / std::sqrt(cx * cy);
    };
    for (int t : {10, 25, 40}) CHECK(std::abs(corr(scrambled, t)) < 0.1);

    // per-step means and variances unchanged by permutation
    for (int t : {0, 20, 49}) {
        double m0 = 0, m1 = 0, v0 = 0, v1 = 0;
        for (int p = 0; p < np; ++p) {
            m0 += ens.particles[t][p].first;
            m1 += scrambled[p][t];
        }
        m0 /= np;
        m1 /= np;
        for (int p = 0; p < np; ++p) {
            v0 += (ens.particles[t][p].first - m0) * (ens.particles[t][p].first - m0);
            v1 += (scrambled[p][t] - m1) * (scrambled[p][t] - m1);
        }
        CHECK(m1 == doctest::Approx(m0).epsilon(1e-9));
        CHECK(v1 == doctest::Approx(v0).epsilon(1e-9));
    }

    // single particle passes through unchanged
    oracle::ParticleEnsemble single;
    single.particles.assign(3, {{1.5, 0.0}});
    const auto s = metrics::scramble(single, 1);
    REQUIRE(s.size() == 1);
    for (double v : s[0]) CHECK(v == 1.5);
}
