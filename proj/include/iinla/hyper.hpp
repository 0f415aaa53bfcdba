#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "iinla/dense.hpp"
#include "iinla/gmrf.hpp"
#include "iinla/grid.hpp"
#include "iinla/lu.hpp"
#include "iinla/model.hpp"

namespace iinla {

struct ModeSearchFailed : std::runtime_error {
    explicit ModeSearchFailed(const std::string& what) : std::runtime_error(what) {}
};

struct NotConcaveAtMode : std::runtime_error {
    explicit NotConcaveAtMode(const std::string& what) : std::runtime_error(what) {}
};

struct NodeBudgetExceeded : std::runtime_error {
    explicit NodeBudgetExceeded(const std::string& what) : std::runtime_error(what) {}
};

struct AllNodesInvalid : std::runtime_error {
    explicit AllNodesInvalid(const std::string& what) : std::runtime_error(what) {}
};

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// One hyperparameter quadrature point.
struct ThetaNode {
    Params theta;
    std::vector<double> z;         // coordinates in the rescaled mode frame
    double log_post = kNegInf;     // unnormalized log posterior
    double weight = 0.0;           // normalized; sums to one across a node set
    std::vector<double> post_mean; // posterior state mean at this theta
};

// Mode of the hyperparameter posterior with the local curvature frame:
// log-parameters follow x(z) = x* + V Lambda^{1/2} z.
struct ModeSummary {
    Params theta_star;
    std::vector<double> x_star;  // log parameters at the mode
    DenseMatrix v;               // orthonormal eigenvectors of (-H)^{-1}
    std::vector<double> lambda;  // its eigenvalues, all positive
    double log_post = kNegInf;
};

// Evaluator of the hyperparameter log posterior for one linearisation point.
//
// The linearised operator is L(theta) = sum_j s_j(theta) M_j with
// parameter-free matrices M_j, so L^T L collapses to a weighted sum of fixed
// Gram matrices and each evaluation costs two numeric factorizations on a
// symbolic analysis done once. All parameters are handled in log-space: the
// prior enters as the Gaussian density of log(theta).
class ThetaObjective {
  public:
    struct Eval {
        double log_post = kNegInf;
        std::vector<double> post_mean;
    };

    ThetaObjective(std::shared_ptr<const Model> model, const SpaceTimeGrid& grid,
                   const ObservationSet& obs, const std::vector<double>& u0,
                   const InitialSliceGaussian& init = {})
        : model_(std::move(model)), grid_(grid), n_(grid.size()) {
        grid.validate();
        const auto comps = model_->components(u0, grid);
        const auto applies = model_->component_applies(u0, grid);
        ncomp_ = static_cast<int>(comps.size());
        scale_params_.reserve(ncomp_);

        // component matrices on a shared pattern
        std::vector<SparseMatrix> mats;
        for (int j = 0; j < ncomp_; ++j) {
            scale_params_.push_back(comps[j].scale_param);
            mats.push_back(build_operator(grid, comps[j].terms));
        }
        SparseMatrix mpattern = mats[0];
        for (int j = 1; j < ncomp_; ++j) mpattern = add(mpattern, mats[j]);
        for (int j = 0; j < ncomp_; ++j) mats[j] = add(mpattern, mats[j], 0.0, 1.0);
        mshape_ = mats[0];

        for (int j = 0; j < ncomp_; ++j) {
            std::vector<double> d = mats[j].multiply(u0);
            const std::vector<double>& nj = applies[j];
            for (int i = 0; i < n_; ++i) d[i] -= nj[i];
            defects_.push_back(std::move(d));
            mvals_.push_back(mats[j].values());
        }

        // Gram matrices: L^T L = sum_j s_j^2 G_jj + sum_{j<k} s_j s_k G_jk
        std::vector<SparseMatrix> grams;
        for (int j = 0; j < ncomp_; ++j)
            for (int k = j; k < ncomp_; ++k) {
                const SparseMatrix p = multiply(mats[j].transposed(), mats[k]);
                grams.push_back(k == j ? symmetrized(p) : add(p, p.transposed()));
            }
        SparseMatrix gpattern = grams[0];
        for (std::size_t g = 1; g < grams.size(); ++g) gpattern = add(gpattern, grams[g]);
        // final precision pattern: Grams, observation diagonal, and the
        // initial-slice block when present
        std::vector<Triplet> extra;
        for (int i = 0; i < n_; ++i) extra.push_back({i, i, 0.0});
        if (!init.empty()) {
            const int nx = grid.nx;
            if (static_cast<int>(init.mean.size()) != nx ||
                static_cast<int>(init.precision.size()) != nx)
                throw DimensionMismatch("initial-slice constraint sized to nx");
            for (int i = 0; i < nx; ++i)
                for (int j = 0; j < nx; ++j)
                    if (init.precision[i][j] != 0.0) extra.push_back({i, j, 0.0});
        }
        pattern_ = add(gpattern, SparseMatrix::from_triplets(n_, n_, std::move(extra)));
        for (auto& g : grams) gvals_.push_back(add(pattern_, g, 0.0, 1.0).values());
        symbolic_ = analyze(pattern_, Ordering::MinimumDegree);

        if (!init.empty()) {
            const int nx = grid.nx;
            has_init_ = true;
            init_b_.assign(n_, 0.0);
            for (int i = 0; i < nx; ++i)
                for (int j = 0; j < nx; ++j) init_b_[i] += init.precision[i][j] * init.mean[j];
            // slot positions of the block inside the shared pattern
            for (int j = 0; j < nx; ++j)
                for (int i = 0; i < nx; ++i) {
                    const double v = init.precision[i][j];
                    if (v == 0.0) continue;
                    const int lo = pattern_.colptr()[j], hi = pattern_.colptr()[j + 1];
                    const auto begin = pattern_.rowind().begin() + lo;
                    const auto end = pattern_.rowind().begin() + hi;
                    const auto it = std::lower_bound(begin, end, i);
                    init_slots_.push_back({static_cast<int>(lo + (it - begin)), v});
                }
        }

        // v_jk = M_j^T d_k so that L^T r = sum_{j,k} s_j s_k v_jk
        for (int j = 0; j < ncomp_; ++j)
            for (int k = 0; k < ncomp_; ++k)
                ltr_parts_.push_back(mats[j].multiply_transposed(defects_[k]));

        // observation rows; data rows follow sigma_y, pseudo rows keep theirs
        for (const Observation& o : obs.entries) {
            if (o.index < 0 || o.index >= n_)
                throw IndexOutOfRange("observation index out of range");
            rows_.push_back({o.index, o.value, o.noise_std});
        }
        default_sigma_y_ = obs.sigma_y;
        for (const ParamSpec& p : model_->params()) {
            if (p.role == ParamRole::ProcessNoise) sigma_u_name_ = p.name;
            if (p.role == ParamRole::ObservationNoise) sigma_y_name_ = p.name;
        }
        diag_slot_.assign(n_, -1);
        for (int j = 0; j < n_; ++j)
            for (int p = pattern_.colptr()[j]; p < pattern_.colptr()[j + 1]; ++p)
                if (pattern_.rowind()[p] == j) diag_slot_[j] = p;
    }

    const Model& model() const { return *model_; }
    int state_dim() const { return n_; }

    std::vector<std::string> learned_names() const { return model_->learned_names(); }

    Params theta_from_log(const std::vector<double>& x) const {
        const auto names = learned_names();
        if (x.size() != names.size()) throw DimensionMismatch("log-parameter vector length");
        Params th = model_->default_params();
        for (std::size_t i = 0; i < names.size(); ++i) th.set(names[i], std::exp(x[i]));
        return th;
    }

    std::vector<double> log_from_theta(const Params& th) const {
        std::vector<double> x;
        for (const std::string& nm : learned_names()) x.push_back(std::log(th.get(nm)));
        return x;
    }

    double operator()(const Params& theta) const { return evaluate(theta).log_post; }

    Eval evaluate(const Params& theta) const {
        Eval out;
        const double sigma_u = theta.get(sigma_u_name_);
        const double sigma_y =
            sigma_y_name_.empty() ? default_sigma_y_ : theta.get(sigma_y_name_);
        if (sigma_u <= 0.0 || sigma_y <= 0.0) return out;
        const double q = grid_.cell_volume() / (sigma_u * sigma_u);

        const DynamicsEval* dyn = dynamics_eval(theta);
        if (dyn == nullptr) return out;  // singular operator for this theta

        // prior precision values q * (L^T L) (+ initial-slice block)
        SparseMatrix pu = pattern_;
        {
            std::vector<double>& pv = pu.values();
            for (std::size_t i = 0; i < pv.size(); ++i) pv[i] = q * dyn->ll_values[i];
            for (const auto& [slot, v] : init_slots_) pv[slot] += v;
        }

        // posterior adds the observation diagonal
        SparseMatrix p = pu;
        {
            std::vector<double>& pv = p.values();
            for (const Row& row : rows_) {
                const double s = row.fixed_std > 0.0 ? row.fixed_std : sigma_y;
                pv[diag_slot_[row.index]] += 1.0 / (s * s);
            }
        }
        CholeskyFactor post_factor;
        try {
            post_factor = factorize(symbolic_, p);
        } catch (const NotPositiveDefinite&) {
            return out;
        }

        std::vector<double> b_prior(n_);
        for (int i = 0; i < n_; ++i) b_prior[i] = q * dyn->ltr[i] + (has_init_ ? init_b_[i] : 0.0);
        std::vector<double> b(b_prior);
        for (const Row& row : rows_) {
            const double s = row.fixed_std > 0.0 ? row.fixed_std : sigma_y;
            b[row.index] += row.value / (s * s);
        }
        std::vector<double> mu = post_factor.solve(b);

        // log prior over the learned parameters, as Gaussians in log-space
        double lp = 0.0;
        for (const ParamSpec& ps : model_->params())
            if (ps.learned) lp += ps.prior.log_density_of_log(std::log(theta.get(ps.name)));

        // Prior term 1/2 log|P_u| - 1/2 (mu - mu_u)^T P_u (mu - mu_u).
        if (has_init_) {
            // the initial-slice block pins the operator's diffuse directions,
            // so P_u factors stably on the shared pattern
            try {
                const CholeskyFactor prior_factor = factorize(symbolic_, pu);
                lp += 0.5 * prior_factor.logdet();
                const std::vector<double> mu_u = prior_factor.solve(b_prior);
                std::vector<double> diff(n_);
                for (int i = 0; i < n_; ++i) diff[i] = mu[i] - mu_u[i];
                const std::vector<double> pd = pu.multiply(diff);
                lp -= 0.5 * dot(diff, pd);
            } catch (const NotPositiveDefinite&) {
                return out;
            }
        } else {
            // Without the block, log|P_u| = n log q + 2 log|det L| through a
            // pivoted LU of L, and since L mu_u = r the quadratic collapses to
            // q ||L mu - r||^2. The normal-equations route would square the
            // operator's condition number and does not survive doubles here.
            lp += 0.5 * n_ * std::log(q) + dyn->logabsdet_l;
            std::vector<double> lmu(n_, 0.0);
            const SparseMatrix& shape = mshape_;
            for (int j = 0; j < shape.ncols(); ++j) {
                const double xj = mu[j];
                if (xj == 0.0) continue;
                for (int pp = shape.colptr()[j]; pp < shape.colptr()[j + 1]; ++pp)
                    lmu[shape.rowind()[pp]] += dyn->l_values[pp] * xj;
            }
            double quad = 0.0;
            for (int i = 0; i < n_; ++i) {
                const double d = lmu[i] - dyn->r_values[i];
                quad += d * d;
            }
            lp -= 0.5 * q * quad;
        }

        // likelihood term: 1/2 log|R^-1| - 1/2 ||y - H mu||^2_{R^-1}
        for (const Row& row : rows_) {
            const double s = row.fixed_std > 0.0 ? row.fixed_std : sigma_y;
            const double resid = row.value - mu[row.index];
            lp -= std::log(s) + 0.5 * resid * resid / (s * s);
        }

        // Gaussian-denominator term: -1/2 log|P_{u|y}|
        lp -= 0.5 * post_factor.logdet();

        out.log_post = std::isfinite(lp) ? lp : kNegInf;
        out.post_mean = std::move(mu);
        return out;
    }

    // Posterior field at theta: precision and information vector assembled
    // from the precomputed Grams; no factorization happens until the field is
    // asked for one.
    GaussianField posterior_field(const Params& theta) const {
        const double sigma_u = theta.get(sigma_u_name_);
        const double sigma_y =
            sigma_y_name_.empty() ? default_sigma_y_ : theta.get(sigma_y_name_);
        const double q = grid_.cell_volume() / (sigma_u * sigma_u);
        const std::vector<double> s = dynamics_scales(theta);
        std::vector<double> ll, ltr;
        combine_gram_values(s, ll, ltr);
        SparseMatrix p = pattern_;
        std::vector<double>& pv = p.values();
        for (std::size_t i = 0; i < pv.size(); ++i) pv[i] = q * ll[i];
        for (const auto& [slot, v] : init_slots_) pv[slot] += v;
        std::vector<double> b(n_);
        for (int i = 0; i < n_; ++i) b[i] = q * ltr[i] + (has_init_ ? init_b_[i] : 0.0);
        for (const Row& row : rows_) {
            const double sd = row.fixed_std > 0.0 ? row.fixed_std : sigma_y;
            pv[diag_slot_[row.index]] += 1.0 / (sd * sd);
            b[row.index] += row.value / (sd * sd);
        }
        return GaussianField::from_information(std::move(p), std::move(b));
    }

  private:
    struct Row {
        int index;
        double value;
        double fixed_std;  // <= 0: follows sigma_y
    };

    struct DynamicsEval {
        std::vector<double> scales;
        std::vector<double> l_values;   // combined operator values on mshape_
        std::vector<double> ll_values;  // L^T L on pattern_
        std::vector<double> ltr;        // L^T r
        std::vector<double> r_values;   // r
        double logabsdet_l = 0.0;
    };

    std::vector<double> dynamics_scales(const Params& theta) const {
        std::vector<double> s(ncomp_);
        for (int j = 0; j < ncomp_; ++j)
            s[j] = scale_params_[j].empty() ? 1.0 : theta.get(scale_params_[j]);
        return s;
    }

    void combine_gram_values(const std::vector<double>& s, std::vector<double>& ll,
                             std::vector<double>& ltr) const {
        ll.assign(gvals_[0].size(), 0.0);
        int g = 0;
        for (int j = 0; j < ncomp_; ++j)
            for (int k = j; k < ncomp_; ++k, ++g) {
                const double c = s[j] * s[k];
                if (c == 0.0) continue;
                const std::vector<double>& gv = gvals_[g];
                for (std::size_t i = 0; i < gv.size(); ++i) ll[i] += c * gv[i];
            }
        ltr.assign(n_, 0.0);
        int v = 0;
        for (int j = 0; j < ncomp_; ++j)
            for (int k = 0; k < ncomp_; ++k, ++v) {
                const double c = s[j] * s[k];
                if (c == 0.0) continue;
                const std::vector<double>& vv = ltr_parts_[v];
                for (int i = 0; i < n_; ++i) ltr[i] += c * vv[i];
            }
    }

    // Factorization of L^T L, prior mean, and related values for the dynamics
    // parameters of theta; cached because the noise parameters move much more
    // often than the dynamics during mode search.
    const DynamicsEval* dynamics_eval(const Params& theta) const {
        const std::vector<double> s = dynamics_scales(theta);
        for (const auto& entry : cache_)
            if (entry->scales == s) return entry.get();

        auto e = std::make_unique<DynamicsEval>();
        e->scales = s;
        e->l_values.assign(mvals_[0].size(), 0.0);
        for (int j = 0; j < ncomp_; ++j)
            for (std::size_t i = 0; i < e->l_values.size(); ++i)
                e->l_values[i] += s[j] * mvals_[j][i];
        combine_gram_values(s, e->ll_values, e->ltr);
        e->r_values.assign(n_, 0.0);
        for (int j = 0; j < ncomp_; ++j) {
            if (s[j] == 0.0) continue;
            for (int i = 0; i < n_; ++i) e->r_values[i] += s[j] * defects_[j][i];
        }

        if (!has_init_) {
            SparseMatrix l = mshape_;
            l.values() = e->l_values;
            try {
                const SparseLUFactor lu(l, symbolic_.perm);
                e->logabsdet_l = lu.logabsdet();
            } catch (const NotPositiveDefinite&) {
                return nullptr;
            }
        }

        if (cache_.size() >= 16) cache_.pop_front();
        cache_.push_back(std::move(e));
        return cache_.back().get();
    }

    std::shared_ptr<const Model> model_;
    SpaceTimeGrid grid_;
    int n_ = 0;
    int ncomp_ = 0;
    std::vector<std::string> scale_params_;
    SparseMatrix mshape_;                         // shared component pattern
    std::vector<std::vector<double>> mvals_;      // component values on mshape_
    std::vector<std::vector<double>> defects_;    // d_j = M_j u0 - n_j(u0)
    SparseMatrix pattern_;                        // precision pattern
    std::vector<std::vector<double>> gvals_;      // Gram values on pattern_
    std::vector<std::vector<double>> ltr_parts_;  // M_j^T d_k
    CholeskySymbolic symbolic_;
    std::vector<int> diag_slot_;
    std::vector<Row> rows_;
    bool has_init_ = false;
    std::vector<double> init_b_;
    std::vector<std::pair<int, double>> init_slots_;
    double default_sigma_y_ = 0.1;
    std::string sigma_u_name_;
    std::string sigma_y_name_;
    mutable std::deque<std::unique_ptr<DynamicsEval>> cache_;
};

// Unnormalized hyperparameter log posterior for a given linearisation point;
// -inf when the precision is not positive definite at this theta.
inline double log_theta_posterior(std::shared_ptr<const Model> model, const SpaceTimeGrid& grid,
                                  const ObservationSet& obs, const std::vector<double>& u0,
                                  const Params& theta) {
    return ThetaObjective(std::move(model), grid, obs, u0)(theta);
}

// Derivative-free simplex maximization in log-parameter space. Stops when the
// simplex diameter drops below diameter_tol (log units) or after max_evals
// evaluations. The simplex is restarted around the incumbent with a fresh
// spread until restarts stop improving; a collapsed simplex otherwise stalls
// on strongly anisotropic objectives.
inline std::vector<double> find_mode(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x_init, int max_evals = 200,
                                     double diameter_tol = 1e-4, double init_step = 0.25) {
    const int d = static_cast<int>(x_init.size());
    int evals = 0;
    auto eval = [&](const std::vector<double>& x) {
        ++evals;
        const double v = f(x);
        return std::isfinite(v) ? v : kNegInf;
    };

    std::vector<std::vector<double>> xs(d + 1, x_init);
    std::vector<double> fs(d + 1);

    auto order = [&]() {
        for (int i = 0; i <= d; ++i)
            for (int j = i + 1; j <= d; ++j)
                if (fs[j] > fs[i]) {
                    std::swap(fs[i], fs[j]);
                    std::swap(xs[i], xs[j]);
                }
    };
    auto diameter = [&]() {
        double m = 0.0;
        for (int i = 1; i <= d; ++i)
            for (int k = 0; k < d; ++k) m = std::max(m, std::abs(xs[i][k] - xs[0][k]));
        return m;
    };
    auto sweep = [&](const std::vector<double>& start, double step) {
        xs.assign(d + 1, start);
        for (int i = 0; i < d; ++i) xs[i + 1][i] += step;
        for (int i = 0; i <= d; ++i) fs[i] = eval(xs[i]);
        order();
        while (evals < max_evals && diameter() > diameter_tol) {
            std::vector<double> centroid(d, 0.0);
            for (int i = 0; i < d; ++i)
                for (int k = 0; k < d; ++k) centroid[k] += xs[i][k] / d;
            auto blend = [&](double t) {
                std::vector<double> x(d);
                for (int k = 0; k < d; ++k) x[k] = centroid[k] + t * (centroid[k] - xs[d][k]);
                return x;
            };
            const std::vector<double> xr = blend(1.0);
            const double fr = eval(xr);
            if (fr > fs[0]) {
                const std::vector<double> xe = blend(2.0);
                const double fe = eval(xe);
                if (fe > fr) {
                    xs[d] = xe;
                    fs[d] = fe;
                } else {
                    xs[d] = xr;
                    fs[d] = fr;
                }
            } else if (fr > fs[d - 1]) {
                xs[d] = xr;
                fs[d] = fr;
            } else {
                const std::vector<double> xc = blend(-0.5);
                const double fc = eval(xc);
                if (fc > fs[d]) {
                    xs[d] = xc;
                    fs[d] = fc;
                } else {
                    for (int i = 1; i <= d; ++i) {
                        for (int k = 0; k < d; ++k)
                            xs[i][k] = xs[0][k] + 0.5 * (xs[i][k] - xs[0][k]);
                        fs[i] = eval(xs[i]);
                    }
                }
            }
            order();
        }
    };

    sweep(x_init, init_step);
    bool any_finite = false;
    for (double v : fs) any_finite |= std::isfinite(v);
    if (!any_finite) throw ModeSearchFailed("objective is -inf on the initial simplex");

    std::vector<double> best_x = xs[0];
    double best_f = fs[0];
    double step = 0.3 * init_step;
    while (evals < max_evals && step > 0.5 * diameter_tol) {
        sweep(best_x, step);
        if (fs[0] > best_f + 1e-12) {
            best_x = xs[0];
            best_f = fs[0];
        } else {
            step *= 0.3;
        }
    }
    if (!std::isfinite(best_f)) throw ModeSearchFailed("no finite objective value found");
    return best_x;
}

// Curvature frame at the mode: central-difference Hessian of the objective in
// log-space, eigendecomposition of (-H)^{-1}. Retries once with a smaller
// step before giving up on concavity.
inline ModeSummary reparametrize(const std::function<double(const std::vector<double>&)>& f,
                                 const std::vector<double>& x_star, double step = 1e-3) {
    const int d = static_cast<int>(x_star.size());
    const double f0 = f(x_star);

    auto hessian = [&](double h) {
        DenseMatrix hess(d, d);
        for (int i = 0; i < d; ++i) {
            std::vector<double> xp(x_star), xm(x_star);
            xp[i] += h;
            xm[i] -= h;
            hess(i, i) = (f(xp) - 2.0 * f0 + f(xm)) / (h * h);
        }
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
                std::vector<double> xpp(x_star), xpm(x_star), xmp(x_star), xmm(x_star);
                xpp[i] += h;
                xpp[j] += h;
                xpm[i] += h;
                xpm[j] -= h;
                xmp[i] -= h;
                xmp[j] += h;
                xmm[i] -= h;
                xmm[j] -= h;
                const double v = (f(xpp) - f(xpm) - f(xmp) + f(xmm)) / (4.0 * h * h);
                hess(i, j) = v;
                hess(j, i) = v;
            }
        return hess;
    };

    for (const double h : {step, 0.1 * step}) {
        DenseMatrix neg = hessian(h);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) neg(i, j) = -neg(i, j);
        std::vector<double> eig;
        DenseMatrix v;
        jacobi_eigen_symmetric(neg, eig, v);
        bool ok = true;
        for (double e : eig) ok &= e > 0.0 && std::isfinite(e);
        if (!ok) continue;
        ModeSummary s;
        s.x_star = x_star;
        s.v = v;
        s.lambda.resize(d);
        for (int i = 0; i < d; ++i) s.lambda[i] = 1.0 / eig[i];
        s.log_post = f0;
        return s;
    }
    throw NotConcaveAtMode("negative Hessian is not positive definite at the mode");
}

// Breadth-first sweep of the scaled integer lattice in z-space. A lattice
// point is evaluated only when every parent one step closer to the origin was
// accepted; axis rays therefore stop at the first rejection and diagonal
// combinations require all their parents. Keeps nodes whose log posterior is
// within delta of the mode. z = 0 is always kept.
template <typename Objective>
std::vector<ThetaNode> select_nodes(const Objective& objective, const ModeSummary& summary,
                                    double delta, double step = 1.0, int node_cap = 2000) {
    if (delta <= 0.0 || step <= 0.0) throw DimensionMismatch("delta and step must be positive");
    const int d = static_cast<int>(summary.x_star.size());

    auto theta_at = [&](const std::vector<int>& k) {
        std::vector<double> z(d), x(summary.x_star);
        for (int i = 0; i < d; ++i) z[i] = step * k[i];
        for (int r = 0; r < d; ++r) {
            double s = 0.0;
            for (int c = 0; c < d; ++c) s += summary.v(r, c) * std::sqrt(summary.lambda[c]) * z[c];
            x[r] += s;
        }
        return std::make_pair(z, objective.theta_from_log(x));
    };

    std::map<std::vector<int>, bool> status;  // evaluated -> accepted?
    std::vector<ThetaNode> nodes;
    std::deque<std::vector<int>> queue;
    std::map<std::vector<int>, bool> enqueued;

    const std::vector<int> origin(d, 0);
    queue.push_back(origin);
    enqueued[origin] = true;

    while (!queue.empty()) {
        const std::vector<int> k = queue.front();
        queue.pop_front();

        bool parents_ok = true;
        for (int i = 0; i < d && parents_ok; ++i) {
            if (k[i] == 0) continue;
            std::vector<int> parent(k);
            parent[i] -= k[i] > 0 ? 1 : -1;
            const auto it = status.find(parent);
            parents_ok = it != status.end() && it->second;
        }
        if (!parents_ok && k != origin) {
            status[k] = false;
            continue;
        }

        auto [z, theta] = theta_at(k);
        const auto ev = objective.evaluate(theta);
        const bool accept =
            k == origin || (std::isfinite(ev.log_post) &&
                            std::abs(summary.log_post - ev.log_post) < delta);
        status[k] = accept;
        if (!accept) continue;

        ThetaNode node;
        node.theta = theta;
        node.z = z;
        node.log_post = ev.log_post;
        node.post_mean = ev.post_mean;
        nodes.push_back(std::move(node));
        if (static_cast<int>(nodes.size()) > node_cap)
            throw NodeBudgetExceeded("node budget exceeded: " + std::to_string(nodes.size()));

        for (int i = 0; i < d; ++i)
            for (int dir : {-1, 1}) {
                std::vector<int> next(k);
                next[i] += dir;
                if (!enqueued[next]) {
                    enqueued[next] = true;
                    queue.push_back(next);
                }
            }
    }
    return nodes;
}

// Softmax over the unnormalized log posteriors; the uniform volume element
// cancels, so no normalization constant is needed.
inline void normalize_weights(std::vector<ThetaNode>& nodes) {
    double best = kNegInf;
    for (const ThetaNode& n : nodes) best = std::max(best, n.log_post);
    if (!std::isfinite(best)) throw AllNodesInvalid("no node has a finite log posterior");
    double total = 0.0;
    for (ThetaNode& n : nodes) {
        n.weight = std::isfinite(n.log_post) ? std::exp(n.log_post - best) : 0.0;
        total += n.weight;
    }
    for (ThetaNode& n : nodes) n.weight /= total;
}

// Per-index Gaussian mixtures over the quadrature nodes.
class MixtureMarginals {
  public:
    MixtureMarginals() = default;
    MixtureMarginals(std::vector<double> weights, std::vector<std::vector<double>> means,
                     std::vector<std::vector<double>> variances)
        : w_(std::move(weights)), mu_(std::move(means)), var_(std::move(variances)) {
        if (mu_.size() != w_.size() || var_.size() != w_.size())
            throw DimensionMismatch("mixture components misaligned");
    }

    int components() const { return static_cast<int>(w_.size()); }
    int dim() const { return w_.empty() ? 0 : static_cast<int>(mu_[0].size()); }
    const std::vector<double>& weights() const { return w_; }
    const std::vector<std::vector<double>>& component_means() const { return mu_; }
    const std::vector<std::vector<double>>& component_variances() const { return var_; }

    double mean(int i) const {
        double m = 0.0;
        for (int k = 0; k < components(); ++k) m += w_[k] * mu_[k][i];
        return m;
    }

    // law of total variance
    double variance(int i) const {
        const double m = mean(i);
        double v = 0.0;
        for (int k = 0; k < components(); ++k)
            v += w_[k] * (var_[k][i] + mu_[k][i] * mu_[k][i]);
        return v - m * m;
    }

    double log_pdf(int i, double x) const {
        double best = kNegInf;
        std::vector<double> terms(components());
        for (int k = 0; k < components(); ++k) {
            if (w_[k] <= 0.0) {
                terms[k] = kNegInf;
                continue;
            }
            const double v = var_[k][i];
            const double r = x - mu_[k][i];
            terms[k] = std::log(w_[k]) - 0.5 * std::log(2.0 * 3.14159265358979323846 * v) -
                       0.5 * r * r / v;
            best = std::max(best, terms[k]);
        }
        if (!std::isfinite(best)) return kNegInf;
        double s = 0.0;
        for (double t : terms) s += std::isfinite(t) ? std::exp(t - best) : 0.0;
        return best + std::log(s);
    }

    double pdf(int i, double x) const {
        const double lp = log_pdf(i, x);
        return std::isfinite(lp) ? std::exp(lp) : 0.0;
    }

  private:
    std::vector<double> w_;
    std::vector<std::vector<double>> mu_;
    std::vector<std::vector<double>> var_;
};

inline MixtureMarginals mix_marginals(const std::vector<ThetaNode>& nodes,
                                      const std::vector<std::vector<double>>& means,
                                      const std::vector<std::vector<double>>& variances) {
    std::vector<double> w;
    for (const ThetaNode& n : nodes) w.push_back(n.weight);
    return MixtureMarginals(std::move(w), means, variances);
}

}  // namespace iinla
