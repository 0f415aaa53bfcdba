#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "iinla/gmrf.hpp"
#include "iinla/hyper.hpp"
#include "iinla/model.hpp"

namespace iinla {

enum class UpdateRule { TypeI, TypeII };

struct IterationConfig {
    double gamma = 0.3;      // damping coefficient in (0, 1]
    int max_iters = 25;
    double tolerance = 1e-6; // relative inf-norm change of the linearisation point
    UpdateRule rule = UpdateRule::TypeII;
    double delta = 5.0;      // node acceptance threshold
    double z_step = 1.0;     // lattice spacing, one posterior std per step
    int node_cap = 2000;
    int mode_max_evals = 200;
    double mode_diameter_tol = 1e-4;  // simplex stopping diameter, log units
    double mode_init_step = 0.25;    // initial simplex edge, log units
    // Undamped passes with the final node set and weights frozen, run after
    // the main loop. The node set changes discretely as the linearisation
    // point moves, which limits how far the damped loop itself can settle;
    // freezing it turns the update into plain Gauss-Newton on the
    // node-weighted cost and polishes the fixed point.
    int fixed_point_refine = 0;
    std::vector<double> u_init;  // empty: zero field

    void validate() const {
        if (!(gamma > 0.0 && gamma <= 1.0))
            throw DimensionMismatch("damping gamma must lie in (0, 1]");
        if (tolerance <= 0.0) throw DimensionMismatch("tolerance must be positive");
        if (max_iters < 1) throw DimensionMismatch("need at least one iteration");
    }
};

struct IterationRecord {
    double delta_u = 0.0;       // relative inf-norm change
    Params theta_mode;          // mode of the hyperparameter posterior (unknown-theta)
    double mode_log_post = 0.0;
    int node_count = 0;
};

struct AssimilationResult {
    std::vector<double> u0;     // converged linearisation point
    bool converged = false;
    int iterations = 0;
    std::vector<ThetaNode> nodes;
    MixtureMarginals marginals;
    std::vector<IterationRecord> trace;
    ModeSummary mode;           // curvature frame of the final hyper posterior
    double wall_seconds = 0.0;
};

namespace detail {

inline double relative_change(const std::vector<double>& u_new, const std::vector<double>& u_old) {
    double num = 0.0, den = 1.0;
    for (std::size_t i = 0; i < u_old.size(); ++i) {
        num = std::max(num, std::abs(u_new[i] - u_old[i]));
        den = std::max(den, std::abs(u_old[i]));
    }
    return num / den;
}

}  // namespace detail

// Weighted natural-parameter combination: P_bar = sum_k w_k P_k,
// b_bar = sum_k w_k b_k, u_bar = P_bar^{-1} b_bar. Fields built by
// conditioning carry their information vector; fields without one fall back
// to P mu.
inline std::vector<double> combine_type2(const std::vector<double>& weights,
                                         const std::vector<GaussianField>& fields) {
    if (weights.empty() || weights.size() != fields.size())
        throw DimensionMismatch("combine_type2: weights and fields misaligned");
    SparseMatrix p_bar = fields[0].precision().scaled(weights[0]);
    std::vector<double> b_bar(fields[0].dim(), 0.0);
    for (std::size_t k = 0; k < fields.size(); ++k) {
        if (k > 0) p_bar = add(p_bar, fields[k].precision(), 1.0, weights[k]);
        const std::vector<double> bk = fields[k].has_information()
                                           ? fields[k].information()
                                           : fields[k].precision().multiply(fields[k].mean());
        for (std::size_t i = 0; i < b_bar.size(); ++i) b_bar[i] += weights[k] * bk[i];
    }
    return cholesky(p_bar).solve(b_bar);
}

inline std::vector<double> combine_type2(const std::vector<ThetaNode>& nodes,
                                         const std::vector<GaussianField>& fields) {
    std::vector<double> w;
    for (const ThetaNode& n : nodes) w.push_back(n.weight);
    return combine_type2(w, fields);
}

// Fixed-parameter assimilation: relinearize, build the prior, condition, and
// blend the posterior mean into the next linearisation point until the point
// stops moving. Marginal variances are computed once at the end.
inline AssimilationResult assimilate_known_theta(std::shared_ptr<const Model> model,
                                                 const SpaceTimeGrid& grid,
                                                 const ObservationSet& obs, const Params& theta,
                                                 const IterationConfig& cfg,
                                                 const InitialSliceGaussian& init = {}) {
    cfg.validate();
    grid.validate();
    const int n = grid.size();
    std::vector<double> u0 = cfg.u_init.empty() ? std::vector<double>(n, 0.0) : cfg.u_init;
    if (static_cast<int>(u0.size()) != n) throw DimensionMismatch("initial point length");

    const double sigma_u = theta.get(model->param("sigma_u").name);
    double sigma_y = obs.sigma_y;
    for (const ParamSpec& p : model->params())
        if (p.role == ParamRole::ObservationNoise && theta.has(p.name))
            sigma_y = theta.get(p.name);
    const SparseMatrix qinv = white_noise_precision(grid, sigma_u);
    const ObservationMatrices om = build_observation_matrix(grid, obs, sigma_y);

    // a correlated initial-slice constraint enters as whitened rows
    SparseMatrix h_init = SparseMatrix::from_triplets(0, n, {});
    SparseMatrix r_init = SparseMatrix::from_triplets(0, 0, {});
    std::vector<double> y_init;
    if (!init.empty()) {
        const int nx = grid.nx;
        DenseMatrix prec(nx, nx);
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < nx; ++j) prec(i, j) = init.precision[i][j];
        const DenseMatrix w = dense_cholesky(prec).transposed();  // W^T W = precision
        std::vector<Triplet> t;
        y_init.assign(nx, 0.0);
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < nx; ++j) {
                if (w(i, j) != 0.0) t.push_back({i, j, w(i, j)});
                y_init[i] += w(i, j) * init.mean[j];
            }
        h_init = SparseMatrix::from_triplets(nx, n, std::move(t));
        r_init = SparseMatrix::identity(nx);
    }

    AssimilationResult result;
    auto posterior_at = [&](const std::vector<double>& point) {
        const Linearization lin = linearize(*model, point, theta, grid);
        const SparseMatrix l = build_operator(grid, lin.terms);
        const std::vector<double> r = residual_from_identity(*model, point, theta, grid, l);
        GaussianField post = condition(build_prior(l, r, qinv), om.h, om.r_inv, om.y);
        if (!init.empty()) post = condition(post, h_init, r_init, y_init);
        return post;
    };

    for (int it = 0; it < cfg.max_iters; ++it) {
        const GaussianField post = posterior_at(u0);
        const std::vector<double>& mu = post.mean();
        std::vector<double> u_new(n);
        for (int i = 0; i < n; ++i) u_new[i] = (1.0 - cfg.gamma) * u0[i] + cfg.gamma * mu[i];
        const double change = detail::relative_change(u_new, u0);
        result.trace.push_back({change, theta, 0.0, 1});
        u0 = std::move(u_new);
        ++result.iterations;
        if (change < cfg.tolerance) {
            result.converged = true;
            break;
        }
    }

    const GaussianField final_post = posterior_at(u0);
    ThetaNode node;
    node.theta = theta;
    node.weight = 1.0;
    node.log_post = 0.0;
    node.post_mean = final_post.mean();
    result.nodes = {node};
    result.marginals = MixtureMarginals({1.0}, {final_post.mean()},
                                        {final_post.marginal_variances()});
    result.u0 = std::move(u0);
    return result;
}

// Joint state and parameter assimilation. Each pass relinearizes, locates the
// hyperparameter mode, lays out quadrature nodes in the curvature frame, and
// blends the combined posterior mean into the next linearisation point. State
// marginals are mixed over the final node set.
inline AssimilationResult assimilate_unknown_theta(std::shared_ptr<const Model> model,
                                                   const SpaceTimeGrid& grid,
                                                   const ObservationSet& obs,
                                                   const IterationConfig& cfg,
                                                   const InitialSliceGaussian& init = {}) {
    cfg.validate();
    grid.validate();
    const int n = grid.size();
    if (model->learned_names().empty())
        throw UnknownModel("no learned parameters in model " + model->name());
    std::vector<double> u0 = cfg.u_init.empty() ? std::vector<double>(n, 0.0) : cfg.u_init;
    if (static_cast<int>(u0.size()) != n) throw DimensionMismatch("initial point length");

    AssimilationResult result;
    std::vector<double> x_warm;
    {
        Params init = model->default_params();
        for (const std::string& nm : model->learned_names())
            x_warm.push_back(std::log(init.get(nm)));
    }

    auto hyper_pass = [&](const std::vector<double>& point) {
        auto obj = std::make_shared<ThetaObjective>(model, grid, obs, point, init);
        auto f = [obj](const std::vector<double>& x) {
            return (*obj)(obj->theta_from_log(x));
        };
        const std::vector<double> xstar =
            find_mode(f, x_warm, cfg.mode_max_evals, cfg.mode_diameter_tol, cfg.mode_init_step);
        ModeSummary summary = reparametrize(f, xstar);
        summary.theta_star = obj->theta_from_log(xstar);
        std::vector<ThetaNode> nodes =
            select_nodes(*obj, summary, cfg.delta, cfg.z_step, cfg.node_cap);
        normalize_weights(nodes);
        return std::make_tuple(obj, summary, std::move(nodes));
    };

    for (int it = 0; it < cfg.max_iters; ++it) {
        auto [obj, summary, nodes] = hyper_pass(u0);
        x_warm = summary.x_star;

        std::vector<double> u_bar(n, 0.0);
        if (cfg.rule == UpdateRule::TypeI) {
            for (const ThetaNode& node : nodes)
                for (int i = 0; i < n; ++i) u_bar[i] += node.weight * node.post_mean[i];
        } else {
            std::vector<double> w;
            std::vector<GaussianField> fields;
            for (const ThetaNode& node : nodes) {
                w.push_back(node.weight);
                fields.push_back(obj->posterior_field(node.theta));
            }
            u_bar = combine_type2(w, fields);
        }

        std::vector<double> u_new(n);
        for (int i = 0; i < n; ++i) u_new[i] = (1.0 - cfg.gamma) * u0[i] + cfg.gamma * u_bar[i];
        const double change = detail::relative_change(u_new, u0);
        result.trace.push_back({change, summary.theta_star, summary.log_post,
                                static_cast<int>(nodes.size())});
        u0 = std::move(u_new);
        ++result.iterations;
        if (change < cfg.tolerance) {
            result.converged = true;
            break;
        }
    }

    // final node set at the converged linearisation point
    auto [obj, summary, nodes] = hyper_pass(u0);

    for (int r = 0; r < cfg.fixed_point_refine; ++r) {
        std::vector<double> u_bar(n, 0.0);
        if (cfg.rule == UpdateRule::TypeI) {
            for (ThetaNode& node : nodes) {
                node.post_mean = obj->evaluate(node.theta).post_mean;
                for (int i = 0; i < n; ++i) u_bar[i] += node.weight * node.post_mean[i];
            }
        } else {
            std::vector<double> w;
            std::vector<GaussianField> fields;
            for (const ThetaNode& node : nodes) {
                w.push_back(node.weight);
                fields.push_back(obj->posterior_field(node.theta));
            }
            u_bar = combine_type2(w, fields);
        }
        u0 = std::move(u_bar);
        obj = std::make_shared<ThetaObjective>(model, grid, obs, u0, init);
    }

    std::vector<std::vector<double>> means, vars;
    for (ThetaNode& node : nodes) {
        if (cfg.fixed_point_refine > 0) node.post_mean = obj->evaluate(node.theta).post_mean;
        const GaussianField field = obj->posterior_field(node.theta);
        means.push_back(node.post_mean);
        vars.push_back(field.marginal_variances());
    }
    result.marginals = mix_marginals(nodes, means, vars);
    result.nodes = std::move(nodes);
    result.mode = summary;
    result.u0 = std::move(u0);
    return result;
}

}  // namespace iinla
