#pragma once

#include <vector>

#include "iinla/dense.hpp"
#include "iinla/rng.hpp"
#include "iinla/sparse.hpp"

namespace testutil {

// A = B^T B + I with B sparse random; SPD by construction.
inline iinla::SparseMatrix random_spd(int n, double density, std::uint64_t seed) {
    iinla::Rng rng(seed);
    std::vector<iinla::Triplet> t;
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i)
            if (rng.uniform() < density) t.push_back({i, j, rng.normal()});
    const iinla::SparseMatrix b = iinla::SparseMatrix::from_triplets(n, n, std::move(t));
    return iinla::add(iinla::multiply(b.transposed(), b), iinla::SparseMatrix::identity(n));
}

// Banded SPD: diagonally dominant with random band entries.
inline iinla::SparseMatrix banded_spd(int n, int bandwidth, std::uint64_t seed) {
    iinla::Rng rng(seed);
    std::vector<iinla::Triplet> t;
    std::vector<double> diag(n, 1.0);
    for (int j = 0; j < n; ++j)
        for (int i = j + 1; i <= j + bandwidth && i < n; ++i) {
            const double v = rng.normal();
            t.push_back({i, j, v});
            t.push_back({j, i, v});
            diag[i] += std::abs(v);
            diag[j] += std::abs(v);
        }
    for (int i = 0; i < n; ++i) t.push_back({i, i, diag[i]});
    return iinla::SparseMatrix::from_triplets(n, n, std::move(t));
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace testutil
