#pragma once

#include <cmath>
#include <vector>

#include "iinla/hyper.hpp"
#include "iinla/oracle.hpp"
#include "iinla/rng.hpp"

namespace iinla::metrics {

struct TooFewSamples : std::runtime_error {
    explicit TooFewSamples(const std::string& what) : std::runtime_error(what) {}
};

inline double rmse(const std::vector<double>& estimate, const std::vector<double>& truth) {
    if (estimate.size() != truth.size()) throw DimensionMismatch("rmse: lengths differ");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double d = estimate[i] - truth[i];
        s += d * d;
    }
    return std::sqrt(s / truth.size());
}

// Mean negative log marginal density of the truth; underflowed densities are
// capped at 1e300 instead of overflowing to infinity.
inline double mnll(const MixtureMarginals& marginals, const std::vector<double>& truth) {
    if (marginals.dim() != static_cast<int>(truth.size()))
        throw DimensionMismatch("mnll: marginal count != truth length");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double lp = marginals.log_pdf(static_cast<int>(i), truth[i]);
        s += std::isfinite(lp) ? std::min(-lp, 1e300) : 1e300;
    }
    return s / truth.size();
}

inline double squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

// Median pairwise distance over the pooled samples (subsampled for large
// sets); the usual default bandwidth.
inline double median_heuristic_bandwidth(const std::vector<std::vector<double>>& a,
                                         const std::vector<std::vector<double>>& b) {
    std::vector<const std::vector<double>*> pool;
    for (const auto& v : a) pool.push_back(&v);
    for (const auto& v : b) pool.push_back(&v);
    const int cap = 400;
    const int stride = std::max<int>(1, static_cast<int>(pool.size()) / cap);
    std::vector<const std::vector<double>*> sub;
    for (std::size_t i = 0; i < pool.size(); i += stride) sub.push_back(pool[i]);
    std::vector<double> d2;
    for (std::size_t i = 0; i < sub.size(); ++i)
        for (std::size_t j = i + 1; j < sub.size(); ++j)
            d2.push_back(squared_distance(*sub[i], *sub[j]));
    if (d2.empty()) return 1.0;
    std::nth_element(d2.begin(), d2.begin() + d2.size() / 2, d2.end());
    const double med = std::sqrt(d2[d2.size() / 2]);
    return med > 0.0 ? med : 1.0;
}

// Unbiased squared maximum mean discrepancy with a squared-exponential
// kernel; diagonal terms are excluded, so small-sample values may be
// negative. bandwidth <= 0 selects the median heuristic.
inline double mmd(const std::vector<std::vector<double>>& a,
                  const std::vector<std::vector<double>>& b, double bandwidth = -1.0) {
    const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
    if (n < 2 || m < 2) throw TooFewSamples("mmd needs at least two samples per set");
    const double bw = bandwidth > 0.0 ? bandwidth : median_heuristic_bandwidth(a, b);
    const double inv = 1.0 / (2.0 * bw * bw);
    auto k = [&](const std::vector<double>& x, const std::vector<double>& y) {
        return std::exp(-squared_distance(x, y) * inv);
    };

    double kaa = 0.0, kbb = 0.0, kab = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) kaa += k(a[i], a[j]);
    for (int i = 0; i < m; ++i)
        for (int j = i + 1; j < m; ++j) kbb += k(b[i], b[j]);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) kab += k(a[i], b[j]);
    return 2.0 * kaa / (static_cast<double>(n) * (n - 1)) +
           2.0 * kbb / (static_cast<double>(m) * (m - 1)) -
           2.0 * kab / (static_cast<double>(n) * m);
}

// Independently permutes particle indices per time step, producing samples of
// the product of time marginals from joint trajectory samples. Expects
// uniform weights (resample first otherwise). Only the angle component is
// emitted.
inline std::vector<std::vector<double>> scramble(const oracle::ParticleEnsemble& ensemble,
                                                 std::uint64_t seed) {
    Rng rng(seed);
    const int nt = static_cast<int>(ensemble.particles.size());
    if (nt == 0) return {};
    const int np = static_cast<int>(ensemble.particles[0].size());
    std::vector<std::vector<double>> out(np, std::vector<double>(nt));
    for (int t = 0; t < nt; ++t) {
        const std::vector<int> perm = np > 1 ? rng.permutation(np) : std::vector<int>{0};
        for (int p = 0; p < np; ++p) out[p][t] = ensemble.particles[t][perm[p]].first;
    }
    return out;
}

// Independent per-index draws from mixture marginals, i.e. samples of the
// product of marginals.
inline std::vector<std::vector<double>> sample_product_marginals(const MixtureMarginals& mix,
                                                                 int n_samples,
                                                                 std::uint64_t seed) {
    Rng rng(seed);
    const int d = mix.dim();
    const int kc = mix.components();
    std::vector<std::vector<double>> out(n_samples, std::vector<double>(d));
    for (int s = 0; s < n_samples; ++s)
        for (int i = 0; i < d; ++i) {
            // choose a component by weight, then draw from its Gaussian
            const double r = rng.uniform();
            double acc = 0.0;
            int pick = kc - 1;
            for (int c = 0; c < kc; ++c) {
                acc += mix.weights()[c];
                if (r <= acc) {
                    pick = c;
                    break;
                }
            }
            out[s][i] = mix.component_means()[pick][i] +
                        std::sqrt(mix.component_variances()[pick][i]) * rng.normal();
        }
    return out;
}

}  // namespace iinla::metrics
