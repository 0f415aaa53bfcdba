#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "iinla/dense.hpp"
#include "iinla/grid.hpp"
#include "iinla/model.hpp"
#include "iinla/rng.hpp"
#include "iinla/sparse.hpp"

namespace iinla::oracle {

struct CFLViolation : std::runtime_error {
    explicit CFLViolation(const std::string& what) : std::runtime_error(what) {}
};

struct WeightCollapse : std::runtime_error {
    explicit WeightCollapse(const std::string& what) : std::runtime_error(what) {}
};

struct NoInitialData : std::runtime_error {
    explicit NoInitialData(const std::string& what) : std::runtime_error(what) {}
};

// Dense evaluation of the conditioning formulas, used as the reference for
// the sparse path. Intended for small systems only.
struct DensePosterior {
    std::vector<double> mean;
    DenseMatrix covariance;
    std::vector<double> prior_mean;
    DenseMatrix prior_precision;
};

inline DensePosterior dense_reference_posterior(const SparseMatrix& l,
                                                const std::vector<double>& r,
                                                const SparseMatrix& qbar_inv,
                                                const SparseMatrix& h, const SparseMatrix& r_inv,
                                                const std::vector<double>& y) {
    const int n = l.ncols();
    if (n > 500) throw DimensionMismatch("dense reference posterior limited to dimension 500");
    const DenseMatrix ld = DenseMatrix::from_sparse(l);
    const DenseMatrix qd = DenseMatrix::from_sparse(qbar_inv);
    const DenseMatrix hd = DenseMatrix::from_sparse(h);
    const DenseMatrix rd = DenseMatrix::from_sparse(r_inv);

    const DenseMatrix lt = ld.transposed();
    const DenseMatrix p_prior = lt.multiply(qd).multiply(ld);

    // prior mean via the normal equations (L^T L) mu = L^T r
    std::vector<double> mu_prior;
    try {
        mu_prior = dense_solve_spd(lt.multiply(ld), lt.multiply(r));
    } catch (const NotPositiveDefinite&) {
        throw SingularMatrix("dense reference posterior: singular operator");
    }

    DenseMatrix p_post = p_prior;
    const DenseMatrix ht_rinv = hd.transposed().multiply(rd);
    const DenseMatrix hth = ht_rinv.multiply(hd);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) p_post(i, j) += hth(i, j);

    const DenseMatrix cov = dense_inverse_spd(p_post);
    std::vector<double> innov(y);
    const std::vector<double> hmu = hd.multiply(mu_prior);
    for (std::size_t i = 0; i < innov.size(); ++i) innov[i] -= hmu[i];
    const std::vector<double> update = cov.multiply(ht_rinv.multiply(innov));
    std::vector<double> mean(mu_prior);
    for (int i = 0; i < n; ++i) mean[i] += update[i];
    return DensePosterior{std::move(mean), cov, std::move(mu_prior), p_prior};
}

struct SingularPreconditioner : std::runtime_error {
    explicit SingularPreconditioner(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline double resolved_std(const Observation& o, double sigma_y) {
    return o.noise_std > 0.0 ? o.noise_std : sigma_y;
}

inline double observation_sigma(const Model& model, const Params& theta,
                                const ObservationSet& obs) {
    for (const ParamSpec& p : model.params())
        if (p.role == ParamRole::ObservationNoise && theta.has(p.name))
            return theta.get(p.name);
    return obs.sigma_y;
}

}  // namespace detail

// Weak-constraint space-time cost: 1/2 ||y - H u||^2_{R^-1} plus
// 1/2 L[u]^T Qbar^-1 L[u] with the discrete residual from the shared model
// operator; the quadratic forms are accumulated directly, with no sparse
// machinery involved.
inline double fourdvar_cost(const std::vector<double>& u, const Params& theta, const Model& model,
                            const SpaceTimeGrid& grid, const ObservationSet& obs) {
    const double sigma_u = theta.get(model.param("sigma_u").name);
    const double q = grid.cell_volume() / (sigma_u * sigma_u);
    const std::vector<double> lu = apply_nonlinear(model, u, theta, grid);
    double cost = 0.0;
    for (double v : lu) cost += 0.5 * q * v * v;
    const double sigma_y = detail::observation_sigma(model, theta, obs);
    for (const Observation& o : obs.entries) {
        const double s = detail::resolved_std(o, sigma_y);
        const double r = o.value - u[o.index];
        cost += 0.5 * r * r / (s * s);
    }
    return cost;
}

// Central finite-difference gradient of a scalar functional of the state.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& u, double h = 1e-6) {
    std::vector<double> g(u.size());
    std::vector<double> up(u), um(u);
    for (std::size_t i = 0; i < u.size(); ++i) {
        up[i] += h;
        um[i] -= h;
        g[i] = (f(up) - f(um)) / (2.0 * h);
        up[i] = u[i];
        um[i] = u[i];
    }
    return g;
}

// Dense Jacobian of the discrete operator by central differences; exact for
// the polynomial nonlinearities and accurate to ~1e-12 otherwise.
inline DenseMatrix dense_operator_jacobian(const Model& model, const std::vector<double>& u0,
                                           const Params& theta, const SpaceTimeGrid& grid,
                                           double h = 1e-6) {
    const int n = grid.size();
    DenseMatrix jac(n, n);
    std::vector<double> up(u0), um(u0);
    for (int k = 0; k < n; ++k) {
        up[k] += h;
        um[k] -= h;
        const std::vector<double> fp = apply_nonlinear(model, up, theta, grid);
        const std::vector<double> fm = apply_nonlinear(model, um, theta, grid);
        for (int i = 0; i < n; ++i) jac(i, k) = (fp[i] - fm[i]) / (2.0 * h);
        up[k] = u0[k];
        um[k] = u0[k];
    }
    return jac;
}

// One damped Gauss-Newton step on the space-time cost, assembled densely and
// independently of the sparse pipeline.
inline std::vector<double> gauss_newton_step(const std::vector<double>& u0, double gamma,
                                             const Params& theta, const Model& model,
                                             const SpaceTimeGrid& grid,
                                             const ObservationSet& obs) {
    const int n = grid.size();
    if (n > 500) throw DimensionMismatch("dense Gauss-Newton limited to dimension 500");
    const double sigma_u = theta.get(model.param("sigma_u").name);
    const double q = grid.cell_volume() / (sigma_u * sigma_u);
    const double sigma_y = detail::observation_sigma(model, theta, obs);

    const DenseMatrix jac = dense_operator_jacobian(model, u0, theta, grid);
    DenseMatrix b = jac.transposed().multiply(jac);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) b(i, j) *= q;
    for (const Observation& o : obs.entries) {
        const double s = detail::resolved_std(o, sigma_y);
        b(o.index, o.index) += 1.0 / (s * s);
    }

    // rhs = q J^T (J u0 - L[u0]) + H^T R^-1 y
    const std::vector<double> lu = apply_nonlinear(model, u0, theta, grid);
    std::vector<double> m = jac.multiply(u0);
    for (int i = 0; i < n; ++i) m[i] = q * (m[i] - lu[i]);
    std::vector<double> rhs = jac.transposed().multiply(m);
    for (const Observation& o : obs.entries) {
        const double s = detail::resolved_std(o, sigma_y);
        rhs[o.index] += o.value / (s * s);
    }

    std::vector<double> step;
    try {
        step = dense_solve_spd(b, rhs);
    } catch (const NotPositiveDefinite&) {
        throw SingularPreconditioner("Gauss-Newton preconditioner is singular");
    }
    std::vector<double> u_next(n);
    for (int i = 0; i < n; ++i) u_next[i] = (1.0 - gamma) * u0[i] + gamma * step[i];
    return u_next;
}

// --- stochastic pendulum simulation -----------------------------------------

struct Trajectory {
    std::vector<double> t;
    std::vector<double> u;      // angle
    std::vector<double> omega;  // angular velocity
    std::uint64_t seed = 0;
};

// Euler-Maruyama on the coupled first-order system
//   du = omega dt,  domega = -(b omega + c sin u) dt + sigma_u dW.
inline Trajectory simulate_pendulum(double b, double c, double sigma_u, double u0, double omega0,
                                    double dt, int steps, std::uint64_t seed) {
    if (dt <= 0.0) throw GridTooSmall("time step must be positive");
    Rng rng(seed);
    Trajectory tr;
    tr.seed = seed;
    tr.t.resize(steps + 1);
    tr.u.resize(steps + 1);
    tr.omega.resize(steps + 1);
    tr.u[0] = u0;
    tr.omega[0] = omega0;
    tr.t[0] = 0.0;
    const double root_dt = std::sqrt(dt);
    for (int k = 0; k < steps; ++k) {
        const double uk = tr.u[k], wk = tr.omega[k];
        tr.u[k + 1] = uk + wk * dt;
        tr.omega[k + 1] = wk - (b * wk + c * std::sin(uk)) * dt + sigma_u * root_dt * rng.normal();
        tr.t[k + 1] = (k + 1) * dt;
    }
    return tr;
}

// --- deterministic PDE ground truth ------------------------------------------

// Method of lines: second-order central differences in space on a refined
// periodic grid, classical Runge-Kutta in time with a stability-limited step,
// sampled back onto the assimilation grid. The refinement factor must make
// the fine nodes a superset of the coarse ones.
inline std::vector<double> solve_pde_ground_truth(const Model& model, const Params& theta,
                                                  const SpaceTimeGrid& grid,
                                                  const std::vector<double>& u_initial,
                                                  int refine = 4, double dt_cap = 1e-3) {
    if (grid.boundary != SpatialBoundary::Periodic)
        throw GridTooSmall("PDE ground truth requires a periodic spatial grid");
    const int nxf = grid.nx * refine;
    const double dxf = grid.dx / refine;
    if (static_cast<int>(u_initial.size()) != grid.nx)
        throw DimensionMismatch("initial state length != nx");

    // upsample the initial state by trigonometric-free linear interpolation
    std::vector<double> u(nxf);
    for (int i = 0; i < nxf; ++i) {
        const double pos = static_cast<double>(i) / refine;
        const int lo = static_cast<int>(pos) % grid.nx;
        const int hi = (lo + 1) % grid.nx;
        const double w = pos - static_cast<int>(pos);
        u[i] = (1.0 - w) * u_initial[lo] + w * u_initial[hi];
    }

    // spatial right-hand side du/dt = -(L[u] - du/dt) on the fine grid
    const double inv2dx = 1.0 / (2.0 * dxf);
    const double invdx2 = 1.0 / (dxf * dxf);
    const double invdx3 = 1.0 / (dxf * dxf * dxf);
    const std::string& name = model.name();
    double nu = 0.0, beta = 0.0, gamma_c = 0.0, l1 = 0.0, l2 = 0.0;
    if (name == "burgers") nu = theta.get("nu");
    if (name == "allen-cahn") {
        beta = theta.get("beta");
        gamma_c = theta.get("gamma");
    }
    if (name == "kdv") {
        l1 = theta.get("lambda1");
        l2 = theta.get("lambda2");
    }

    auto rhs = [&](const std::vector<double>& v, std::vector<double>& out) {
        const int n = nxf;
        for (int i = 0; i < n; ++i) {
            const int im1 = (i + n - 1) % n, ip1 = (i + 1) % n;
            const int im2 = (i + n - 2) % n, ip2 = (i + 2) % n;
            const double vx = (v[ip1] - v[im1]) * inv2dx;
            const double vxx = (v[ip1] - 2.0 * v[i] + v[im1]) * invdx2;
            if (name == "burgers") {
                out[i] = -v[i] * vx + nu * vxx;
            } else if (name == "allen-cahn") {
                out[i] = gamma_c * vxx - beta * (v[i] * v[i] * v[i] - v[i]);
            } else if (name == "kdv") {
                const double vxxx = (-0.5 * v[im2] + v[im1] - v[ip1] + 0.5 * v[ip2]) * invdx3;
                out[i] = -l1 * v[i] * vx - l2 * vxxx;
            } else {
                throw UnknownModel("no ground-truth solver for model " + name);
            }
        }
    };

    // stability-limited step aligned with the assimilation slices
    double dt_limit = dt_cap;
    if (name == "burgers") dt_limit = std::min(dt_limit, 0.6 / (4.0 * nu * invdx2 + 2.0 * inv2dx));
    if (name == "allen-cahn")
        dt_limit = std::min(dt_limit, 0.6 / (4.0 * gamma_c * invdx2 + 4.0 * beta));
    if (name == "kdv")
        dt_limit = std::min(dt_limit, 2.5 / (2.598 * l2 * invdx3 + 2.0 * l1 * inv2dx));
    const int substeps = std::max(1, static_cast<int>(std::ceil(grid.dt / dt_limit)));
    const double h = grid.dt / substeps;

    std::vector<double> out(grid.size());
    std::vector<double> k1(nxf), k2(nxf), k3(nxf), k4(nxf), tmp(nxf);
    auto store_slice = [&](int it) {
        for (int ix = 0; ix < grid.nx; ++ix) out[grid.flat(it, ix)] = u[ix * refine];
    };
    store_slice(0);
    for (int it = 1; it < grid.nt; ++it) {
        for (int s = 0; s < substeps; ++s) {
            rhs(u, k1);
            for (int i = 0; i < nxf; ++i) tmp[i] = u[i] + 0.5 * h * k1[i];
            rhs(tmp, k2);
            for (int i = 0; i < nxf; ++i) tmp[i] = u[i] + 0.5 * h * k2[i];
            rhs(tmp, k3);
            for (int i = 0; i < nxf; ++i) tmp[i] = u[i] + h * k3[i];
            rhs(tmp, k4);
            for (int i = 0; i < nxf; ++i)
                u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        for (double v : u)
            if (!std::isfinite(v) || std::abs(v) > 1e6)
                throw CFLViolation("PDE solution blew up at t index " + std::to_string(it));
        store_slice(it);
    }
    return out;
}

// --- bootstrap particle filter / smoother and PMMH ---------------------------

struct ParticleEnsemble {
    // particles[t][p] = (u, omega) at time index t
    std::vector<std::vector<std::pair<double, double>>> particles;
    std::vector<double> ess;  // effective sample size per assimilated step
    std::uint64_t seed = 0;
};

struct PendulumSmootherProblem {
    double b = 0.3, c = 1.0, sigma_u = 0.2, sigma_y = 0.1;
    double u0_mean = 0.0, omega0_mean = 0.0, init_std = 0.1;
    double dt = 0.01;
    int steps = 0;                     // time indices 0..steps
    std::vector<std::vector<std::pair<int, double>>> obs_at;  // per index: (row, value); value only
    bool linearized = false;           // replace sin(u) by u (for the Kalman cross-check)
};

inline PendulumSmootherProblem make_smoother_problem(double b, double c, double sigma_u,
                                                     double sigma_y, double u0_mean,
                                                     double omega0_mean, double dt, int steps,
                                                     const std::vector<std::pair<int, double>>& obs) {
    PendulumSmootherProblem pr;
    pr.b = b;
    pr.c = c;
    pr.sigma_u = sigma_u;
    pr.sigma_y = sigma_y;
    pr.u0_mean = u0_mean;
    pr.omega0_mean = omega0_mean;
    pr.dt = dt;
    pr.steps = steps;
    pr.obs_at.assign(steps + 1, {});
    for (const auto& [idx, val] : obs) {
        if (idx < 0 || idx > steps) throw IndexOutOfRange("observation index out of range");
        pr.obs_at[idx].push_back({idx, val});
    }
    return pr;
}

namespace detail {

inline double pendulum_drift_u(double u, double w) {
    (void)u;
    return w;
}

inline double pendulum_drift_omega(const PendulumSmootherProblem& pr, double u, double w) {
    const double restoring = pr.linearized ? u : std::sin(u);
    return -(pr.b * w + pr.c * restoring);
}

}  // namespace detail

// Bootstrap filter with multinomial resampling at ESS < n/2; returns filtered
// particles per step, the log marginal likelihood estimate, and ancestor
// indices for smoothing.
struct FilterOutput {
    std::vector<std::vector<std::pair<double, double>>> particles;
    std::vector<std::vector<double>> logweights;
    double log_likelihood = 0.0;
    std::vector<double> ess;
};

inline FilterOutput bootstrap_filter(const PendulumSmootherProblem& pr, int n_particles,
                                     Rng& rng) {
    FilterOutput out;
    const int nt = pr.steps + 1;
    out.particles.assign(nt, std::vector<std::pair<double, double>>(n_particles));
    out.logweights.assign(nt, std::vector<double>(n_particles, 0.0));

    std::vector<double> logw(n_particles, 0.0);
    for (int p = 0; p < n_particles; ++p)
        out.particles[0][p] = {pr.u0_mean + pr.init_std * rng.normal(),
                               pr.omega0_mean + pr.init_std * rng.normal()};

    const double root_dt = std::sqrt(pr.dt);
    auto weight_obs = [&](int t) {
        for (const auto& [row, val] : pr.obs_at[t])
            for (int p = 0; p < n_particles; ++p) {
                const double r = val - out.particles[t][p].first;
                logw[p] += -0.5 * r * r / (pr.sigma_y * pr.sigma_y);
            }
    };
    auto normalize_and_maybe_resample = [&](int t) {
        double best = logw[0];
        for (double v : logw) best = std::max(best, v);
        if (!std::isfinite(best)) throw WeightCollapse("all particle weights vanished");
        double sum = 0.0, sumsq = 0.0;
        std::vector<double> w(n_particles);
        for (int p = 0; p < n_particles; ++p) {
            w[p] = std::exp(logw[p] - best);
            sum += w[p];
        }
        for (int p = 0; p < n_particles; ++p) {
            w[p] /= sum;
            sumsq += w[p] * w[p];
        }
        const double ess = 1.0 / sumsq;
        out.ess.push_back(ess);
        out.logweights[t] = logw;
        if (ess < 0.5 * n_particles) {
            // multinomial resampling
            std::vector<double> cdf(n_particles);
            double acc = 0.0;
            for (int p = 0; p < n_particles; ++p) {
                acc += w[p];
                cdf[p] = acc;
            }
            std::vector<std::pair<double, double>> res(n_particles);
            for (int p = 0; p < n_particles; ++p) {
                const double r = rng.uniform();
                const auto it = std::lower_bound(cdf.begin(), cdf.end(), r);
                res[p] = out.particles[t][std::min<std::size_t>(it - cdf.begin(),
                                                                n_particles - 1)];
            }
            out.particles[t] = std::move(res);
            std::fill(logw.begin(), logw.end(), 0.0);
            out.logweights[t].assign(n_particles, 0.0);
        }
        return best + std::log(sum / n_particles);
    };

    // time 0 observations
    weight_obs(0);
    if (!pr.obs_at[0].empty()) out.log_likelihood += normalize_and_maybe_resample(0);

    for (int t = 1; t < nt; ++t) {
        for (int p = 0; p < n_particles; ++p) {
            auto [u, w] = out.particles[t - 1][p];
            const double un = u + detail::pendulum_drift_u(u, w) * pr.dt;
            const double wn = w + detail::pendulum_drift_omega(pr, u, w) * pr.dt +
                              pr.sigma_u * root_dt * rng.normal();
            out.particles[t][p] = {un, wn};
        }
        weight_obs(t);
        if (!pr.obs_at[t].empty()) {
            out.log_likelihood += normalize_and_maybe_resample(t);
        } else {
            out.logweights[t] = logw;
        }
    }
    return out;
}

// Backward-simulation smoother: draws joint trajectories from the filtered
// particle system. The returned ensemble has uniform weights.
inline ParticleEnsemble bootstrap_smoother(const PendulumSmootherProblem& pr, int n_particles,
                                           int n_draws, std::uint64_t seed) {
    Rng rng(seed);
    const FilterOutput f = bootstrap_filter(pr, n_particles, rng);
    const int nt = pr.steps + 1;

    ParticleEnsemble out;
    out.seed = seed;
    out.ess = f.ess;
    out.particles.assign(nt, std::vector<std::pair<double, double>>(n_draws));

    // The Euler step moves the angle deterministically, which makes the
    // one-step transition density singular. Backward weights instead use the
    // small-noise covariance of the integrated Wiener path over one step,
    //   Cov = sigma_u^2 [[dt^3/3, dt^2/2], [dt^2/2, dt]],
    // which is the exact one-step covariance of the linearised diffusion.
    const double s2 = pr.sigma_u * pr.sigma_u;
    const double c_uu = s2 * pr.dt * pr.dt * pr.dt / 3.0;
    const double c_uw = s2 * pr.dt * pr.dt / 2.0;
    const double c_ww = s2 * pr.dt;
    const double det = c_uu * c_ww - c_uw * c_uw;
    const double i_uu = c_ww / det, i_uw = -c_uw / det, i_ww = c_uu / det;

    std::vector<double> logp(n_particles);
    for (int d = 0; d < n_draws; ++d) {
        // terminal draw from the final weights
        int idx;
        {
            const std::vector<double>& lw = f.logweights[nt - 1];
            double best = lw[0];
            for (double v : lw) best = std::max(best, v);
            std::vector<double> cdf(n_particles);
            double acc = 0.0;
            for (int p = 0; p < n_particles; ++p) {
                acc += std::exp(lw[p] - best);
                cdf[p] = acc;
            }
            const double r = rng.uniform() * acc;
            idx = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
            idx = std::min(idx, n_particles - 1);
        }
        out.particles[nt - 1][d] = f.particles[nt - 1][idx];
        for (int t = nt - 2; t >= 0; --t) {
            const auto [u_next, w_next] = out.particles[t + 1][d];
            double best = -std::numeric_limits<double>::infinity();
            for (int p = 0; p < n_particles; ++p) {
                const auto [u, w] = f.particles[t][p];
                const double du = u_next - (u + detail::pendulum_drift_u(u, w) * pr.dt);
                const double dw =
                    w_next - (w + detail::pendulum_drift_omega(pr, u, w) * pr.dt);
                logp[p] = f.logweights[t][p] -
                          0.5 * (i_uu * du * du + 2.0 * i_uw * du * dw + i_ww * dw * dw);
                best = std::max(best, logp[p]);
            }
            if (!std::isfinite(best)) throw WeightCollapse("backward smoother weights vanished");
            double acc = 0.0;
            std::vector<double> cdf(n_particles);
            for (int p = 0; p < n_particles; ++p) {
                acc += std::exp(logp[p] - best);
                cdf[p] = acc;
            }
            const double r = rng.uniform() * acc;
            int pick = static_cast<int>(std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
            pick = std::min(pick, n_particles - 1);
            out.particles[t][d] = f.particles[t][pick];
        }
    }
    return out;
}

// Particle marginal Metropolis-Hastings over log-parameters with the
// bootstrap-filter likelihood estimate. Returns post-burn-in samples.
struct PmmhOptions {
    int n_iters = 2000;
    int n_particles = 300;
    double burn_in_fraction = 0.1;
    double proposal_std = 0.12;  // random-walk std in log-space
};

inline std::vector<Params> pmmh(const PendulumSmootherProblem& problem_template,
                                const std::vector<ParamSpec>& learned, PmmhOptions opt,
                                std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::string> names;
    std::vector<double> x;
    for (const ParamSpec& p : learned) {
        names.push_back(p.name);
        x.push_back(std::log(p.prior.mode()));
    }
    const int d = static_cast<int>(x.size());

    auto apply_params = [&](const std::vector<double>& xs) {
        PendulumSmootherProblem pr = problem_template;
        Params th;
        for (int i = 0; i < d; ++i) th.set(names[i], std::exp(xs[i]));
        if (th.has("b")) pr.b = th.get("b");
        if (th.has("c")) pr.c = th.get("c");
        if (th.has("sigma_u")) pr.sigma_u = th.get("sigma_u");
        if (th.has("sigma_y")) pr.sigma_y = th.get("sigma_y");
        return std::make_pair(pr, th);
    };
    auto log_prior = [&](const std::vector<double>& xs) {
        double lp = 0.0;
        for (int i = 0; i < d; ++i) lp += learned[i].prior.log_density_of_log(xs[i]);
        return lp;
    };
    std::uint64_t lik_counter = 0;
    auto log_lik = [&](const std::vector<double>& xs) {
        auto [pr, th] = apply_params(xs);
        Rng prng(seed * 6364136223846793005ULL + (++lik_counter));
        try {
            return bootstrap_filter(pr, opt.n_particles, prng).log_likelihood;
        } catch (const WeightCollapse&) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    double cur_post = log_prior(x) + log_lik(x);
    std::vector<Params> samples;
    const int burn = static_cast<int>(opt.burn_in_fraction * opt.n_iters);
    for (int it = 0; it < opt.n_iters; ++it) {
        std::vector<double> prop(x);
        for (int i = 0; i < d; ++i) prop[i] += opt.proposal_std * rng.normal();
        const double prop_post = log_prior(prop) + log_lik(prop);
        if (std::log(rng.uniform() + 1e-300) < prop_post - cur_post) {
            x = prop;
            cur_post = prop_post;
        }
        if (it >= burn) samples.push_back(apply_params(x).second);
    }
    return samples;
}

// --- background field fit -----------------------------------------------------

// Gaussian-process regression over x with a squared-exponential kernel and
// noise variance sigma^2; the lengthscale is chosen by leave-one-out error
// over a small grid and the amplitude from the sample variance. On periodic
// domains (period > 0) the kernel wraps. Returns the posterior mean plus the
// latent and noisy predictive stds on the requested grid.
struct BackgroundFit {
    std::vector<double> mean;
    std::vector<double> std_dev;         // includes the noise floor
    std::vector<double> latent_std_dev;  // uncertainty of the field itself
    DenseMatrix latent_cov;              // posterior covariance on the grid
    DenseMatrix prior_cov;               // kernel matrix on the grid
    double lengthscale = 0.0;
    double amplitude = 1.0;
};

inline BackgroundFit background_fit(const std::vector<std::pair<double, double>>& points,
                                    double sigma, const std::vector<double>& x_grid,
                                    double period = -1.0) {
    if (points.empty()) throw NoInitialData("no observations near the initial time");
    const int m = static_cast<int>(points.size());

    double amp2 = 0.0;
    {
        double mean_y = 0.0;
        for (const auto& [x, y] : points) mean_y += y;
        mean_y /= m;
        for (const auto& [x, y] : points) amp2 += (y - mean_y) * (y - mean_y);
        amp2 = std::max(amp2 / std::max(1, m - 1), sigma * sigma);
    }

    auto kernel = [&](double a, double b, double ls) {
        const double d = a - b;
        if (period > 0.0) {
            // wraps around the domain; matches the plain kernel for d << period
            const double pi = 3.14159265358979323846;
            const double s = std::sin(pi * d / period);
            const double lt = 2.0 * pi * ls / period;
            return amp2 * std::exp(-2.0 * s * s / (lt * lt));
        }
        const double r = d / ls;
        return amp2 * std::exp(-0.5 * r * r);
    };

    // leave-one-out predictive log-density via the closed-form identities
    // mu_{-i} = y_i - alpha_i / Kinv_ii, var_{-i} = 1 / Kinv_ii
    auto loo_score = [&](double ls) {
        DenseMatrix k(m, m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j)
                k(i, j) = kernel(points[i].first, points[j].first, ls) +
                          (i == j ? sigma * sigma + 1e-10 : 0.0);
        std::vector<double> yv(m);
        for (int i = 0; i < m; ++i) yv[i] = points[i].second;
        try {
            const std::vector<double> alpha = dense_solve_spd(k, yv);
            const DenseMatrix kinv = dense_inverse_spd(k);
            double score = 0.0;
            for (int i = 0; i < m; ++i) {
                const double var = 1.0 / kinv(i, i);
                const double resid = alpha[i] * var;
                score += -0.5 * std::log(var) - 0.5 * resid * resid / var;
            }
            return score;
        } catch (const NotPositiveDefinite&) {
            return -std::numeric_limits<double>::infinity();
        }
    };

    double best_ls = 1.0, best_score = -std::numeric_limits<double>::infinity();
    for (const double ls : {0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0}) {
        const double e = m > 1 ? loo_score(ls) : 0.0;
        if (e >= best_score) {
            best_score = e;
            best_ls = ls;
        }
    }

    DenseMatrix k(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            k(i, j) = kernel(points[i].first, points[j].first, best_ls) +
                      (i == j ? sigma * sigma + 1e-10 : 0.0);
    std::vector<double> yv(m);
    for (int i = 0; i < m; ++i) yv[i] = points[i].second;
    const std::vector<double> alpha = dense_solve_spd(k, yv);
    const DenseMatrix kinv = dense_inverse_spd(k);

    BackgroundFit fit;
    fit.lengthscale = best_ls;
    fit.amplitude = std::sqrt(amp2);
    const int ng = static_cast<int>(x_grid.size());
    fit.mean.resize(ng);
    fit.std_dev.resize(ng);
    fit.latent_std_dev.resize(ng);
    DenseMatrix kxg(ng, m);
    for (int g = 0; g < ng; ++g) {
        double mean = 0.0;
        for (int i = 0; i < m; ++i) {
            kxg(g, i) = kernel(x_grid[g], points[i].first, best_ls);
            mean += kxg(g, i) * alpha[i];
        }
        fit.mean[g] = mean;
    }
    fit.prior_cov = DenseMatrix(ng, ng);
    fit.latent_cov = DenseMatrix(ng, ng);
    for (int g = 0; g < ng; ++g)
        for (int h = 0; h < ng; ++h) {
            fit.prior_cov(g, h) = kernel(x_grid[g], x_grid[h], best_ls);
            double c = fit.prior_cov(g, h);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < m; ++j) c -= kxg(g, i) * kinv(i, j) * kxg(h, j);
            fit.latent_cov(g, h) = c;
        }
    for (int g = 0; g < ng; ++g) {
        const double var = std::max(fit.latent_cov(g, g), 0.0);
        fit.latent_std_dev[g] = std::sqrt(var);
        fit.std_dev[g] = std::sqrt(var + sigma * sigma);
    }
    return fit;
}

}  // namespace iinla::oracle
