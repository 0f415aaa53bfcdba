#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iinla/sparse.hpp"

namespace iinla {

struct GridTooSmall : std::runtime_error {
    explicit GridTooSmall(const std::string& what) : std::runtime_error(what) {}
};

struct NonPositiveSigma : std::runtime_error {
    explicit NonPositiveSigma(const std::string& what) : std::runtime_error(what) {}
};

struct IndexOutOfRange : std::runtime_error {
    explicit IndexOutOfRange(const std::string& what) : std::runtime_error(what) {}
};

enum class SpatialBoundary { Periodic, None };

// Regular (t, x) lattice, time-major flattening: index = i_t * nx + i_x.
// nx = 1 for time-only problems, in which case dx plays no role and is 1.
struct SpaceTimeGrid {
    int nt = 0;
    int nx = 1;
    double dt = 0.0;
    double dx = 1.0;
    double t0 = 0.0;
    double x0 = 0.0;
    SpatialBoundary boundary = SpatialBoundary::None;

    int size() const { return nt * nx; }
    int flat(int it, int ix) const { return it * nx + ix; }
    double time(int it) const { return t0 + it * dt; }
    double space(int ix) const { return x0 + ix * dx; }

    void validate() const {
        if (nt < 3) throw GridTooSmall("nt must be at least 3");
        if (nx < 1) throw GridTooSmall("nx must be at least 1");
        if (dt <= 0.0 || dx <= 0.0) throw GridTooSmall("grid spacings must be positive");
    }

    // cell volume entering the white-noise discretisation; dx collapses to 1
    // for time-only grids
    double cell_volume() const { return nx > 1 ? dt * dx : dt; }
};

// One differential term: coefficient * d^a/dt^a d^b/dx^b with a scalar or
// per-grid-point coefficient.
struct StencilTerm {
    int dt_order = 0;
    int dx_order = 0;
    double coefficient = 1.0;
    std::vector<double> coefficient_field;  // empty -> scalar coefficient

    static StencilTerm scalar(int dt_order, int dx_order, double c) {
        return StencilTerm{dt_order, dx_order, c, {}};
    }
    static StencilTerm field(int dt_order, int dx_order, std::vector<double> c) {
        return StencilTerm{dt_order, dx_order, 1.0, std::move(c)};
    }
};

struct Observation {
    int index = 0;
    double value = 0.0;
    double noise_std = -1.0;  // <= 0: use the set-level default
};

// Correlated Gaussian constraint on the t = 0 slice: u(0, .) ~ N(mean, P^-1).
// Carries the spatial structure of the background field, which a diagonal
// pseudo-observation set cannot express.
struct InitialSliceGaussian {
    std::vector<double> mean;
    std::vector<std::vector<double>> precision;  // dense nx-by-nx, symmetric
    bool empty() const { return mean.empty(); }
};

struct ObservationSet {
    std::vector<Observation> entries;
    double sigma_y = 0.1;  // default noise std

    int size() const { return static_cast<int>(entries.size()); }
};

namespace detail {

struct StencilPoint {
    int offset;
    double weight;
};

// One-dimensional second-order interior stencils with low-order one-sided
// rows at open boundaries (forward at the start, backward at the end).
inline std::vector<StencilPoint> axis_stencil(int order, int i, int n, double h, bool periodic) {
    const double h1 = 1.0 / h, h2 = 1.0 / (h * h), h3 = 1.0 / (h * h * h);
    switch (order) {
        case 0:
            return {{0, 1.0}};
        case 1:
            if (n < 2) throw GridTooSmall("first derivative needs at least 2 points");
            if (!periodic && i == 0) return {{0, -h1}, {1, h1}};
            if (!periodic && i == n - 1) return {{-1, -h1}, {0, h1}};
            if (n < 3) throw GridTooSmall("central first derivative needs 3 points");
            return {{-1, -0.5 * h1}, {1, 0.5 * h1}};
        case 2:
            if (n < 3) throw GridTooSmall("second derivative needs at least 3 points");
            if (!periodic && i == 0) return {{0, h2}, {1, -2.0 * h2}, {2, h2}};
            if (!periodic && i == n - 1) return {{-2, h2}, {-1, -2.0 * h2}, {0, h2}};
            return {{-1, h2}, {0, -2.0 * h2}, {1, h2}};
        case 3:
            if (!periodic) throw GridTooSmall("third derivative implemented for periodic axes");
            if (n < 5) throw GridTooSmall("third derivative needs at least 5 points");
            return {{-2, -0.5 * h3}, {-1, h3}, {1, -h3}, {2, 0.5 * h3}};
        default:
            throw GridTooSmall("derivative order not supported");
    }
}

}  // namespace detail

// Assembles the square finite-difference matrix of sum_k terms[k] on the
// flattened grid. Spatial stencils wrap under periodic boundaries; temporal
// boundary rows are one-sided.
inline SparseMatrix build_operator(const SpaceTimeGrid& grid,
                                   const std::vector<StencilTerm>& terms) {
    grid.validate();
    const int n = grid.size();
    const bool periodic = grid.boundary == SpatialBoundary::Periodic;
    std::vector<Triplet> trip;
    for (const StencilTerm& term : terms) {
        if (!term.coefficient_field.empty() &&
            static_cast<int>(term.coefficient_field.size()) != n)
            throw DimensionMismatch("coefficient field length != grid size");
        for (int it = 0; it < grid.nt; ++it) {
            const auto ts = detail::axis_stencil(term.dt_order, it, grid.nt, grid.dt, false);
            for (int ix = 0; ix < grid.nx; ++ix) {
                const int row = grid.flat(it, ix);
                const double c = term.coefficient_field.empty() ? term.coefficient
                                                                : term.coefficient_field[row];
                if (c == 0.0) continue;
                const auto xs =
                    detail::axis_stencil(term.dx_order, ix, grid.nx, grid.dx, periodic);
                for (const auto& tp : ts) {
                    for (const auto& xp : xs) {
                        int jx = ix + xp.offset;
                        if (periodic) {
                            jx = ((jx % grid.nx) + grid.nx) % grid.nx;
                        } else if (jx < 0 || jx >= grid.nx) {
                            throw GridTooSmall("spatial stencil leaves the grid");
                        }
                        const int jt = it + tp.offset;
                        trip.push_back({row, grid.flat(jt, jx), c * tp.weight * xp.weight});
                    }
                }
            }
        }
    }
    return SparseMatrix::from_triplets(n, n, std::move(trip));
}

// Inverse covariance of the discretised space-time white noise:
// (dt*dx / sigma_u^2) * I, with dx treated as 1 on time-only grids.
inline SparseMatrix white_noise_precision(const SpaceTimeGrid& grid, double sigma_u) {
    grid.validate();
    if (sigma_u <= 0.0) throw NonPositiveSigma("sigma_u must be positive");
    const double q = grid.cell_volume() / (sigma_u * sigma_u);
    return SparseMatrix::diagonal(std::vector<double>(grid.size(), q));
}

struct ObservationMatrices {
    SparseMatrix h;      // one row per observation, single unit entry
    SparseMatrix r_inv;  // diagonal
    std::vector<double> y;
    std::vector<double> noise_std;  // resolved per row
};

// sigma_y_override replaces the set-level default (used when the observation
// noise is a learned parameter); per-entry stds are kept as stored.
inline ObservationMatrices build_observation_matrix(const SpaceTimeGrid& grid,
                                                    const ObservationSet& obs,
                                                    double sigma_y_override = -1.0) {
    grid.validate();
    if (obs.entries.empty()) throw DimensionMismatch("observation set is empty");
    const int m = obs.size();
    const int n = grid.size();
    std::vector<Triplet> ht;
    std::vector<double> rdiag(m), y(m), stds(m);
    const double default_std = sigma_y_override > 0.0 ? sigma_y_override : obs.sigma_y;
    for (int r = 0; r < m; ++r) {
        const Observation& o = obs.entries[r];
        if (o.index < 0 || o.index >= n) throw IndexOutOfRange("observation index out of range");
        const double s = o.noise_std > 0.0 ? o.noise_std : default_std;
        if (s <= 0.0) throw NonPositiveSigma("observation noise std must be positive");
        ht.push_back({r, o.index, 1.0});
        rdiag[r] = 1.0 / (s * s);
        y[r] = o.value;
        stds[r] = s;
    }
    return ObservationMatrices{SparseMatrix::from_triplets(m, n, std::move(ht)),
                               SparseMatrix::diagonal(rdiag), std::move(y), std::move(stds)};
}

// Appends per-point pseudo-observations of the background field at the t = 0
// slice; their stds are pinned and do not follow a learned sigma_y.
inline ObservationSet inject_initial_condition(const ObservationSet& obs,
                                               const std::vector<double>& u_b,
                                               const std::vector<double>& c_std) {
    if (u_b.size() != c_std.size())
        throw DimensionMismatch("background field and std lengths differ");
    ObservationSet out = obs;
    for (std::size_t ix = 0; ix < u_b.size(); ++ix) {
        if (c_std[ix] <= 0.0) throw NonPositiveSigma("pseudo-observation std must be positive");
        out.entries.push_back({static_cast<int>(ix), u_b[ix], c_std[ix]});
    }
    return out;
}

inline ObservationSet inject_initial_condition(const ObservationSet& obs,
                                               const std::vector<double>& u_b, double c_std) {
    return inject_initial_condition(obs, u_b, std::vector<double>(u_b.size(), c_std));
}

}  // namespace iinla
