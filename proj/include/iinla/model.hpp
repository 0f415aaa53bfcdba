#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "iinla/grid.hpp"

namespace iinla {

struct UnknownModel : std::runtime_error {
    explicit UnknownModel(const std::string& what) : std::runtime_error(what) {}
};

struct LogNormalPrior {
    double mu = 0.0;
    double sigma = 1.0;

    double mode() const { return std::exp(mu - sigma * sigma); }

    // density of log(theta), i.e. the Gaussian over the log-parameter
    double log_density_of_log(double log_theta) const {
        const double z = (log_theta - mu) / sigma;
        return -0.5 * z * z - std::log(sigma) - 0.918938533204672741780329736406;
    }
};

enum class ParamRole { Dynamics, ProcessNoise, ObservationNoise };

struct ParamSpec {
    std::string name;
    ParamRole role = ParamRole::Dynamics;
    LogNormalPrior prior;
    bool learned = false;
    double value = 1.0;  // fixed value; prior mode for learned parameters
};

// Named positive parameter values.
class Params {
  public:
    Params() = default;
    Params(std::initializer_list<std::pair<const std::string, double>> init) : kv_(init) {}

    double get(const std::string& name) const {
        const auto it = kv_.find(name);
        if (it == kv_.end()) throw UnknownModel("parameter not set: " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return kv_.count(name) > 0; }
    void set(const std::string& name, double v) { kv_[name] = v; }
    const std::map<std::string, double>& map() const { return kv_; }

  private:
    std::map<std::string, double> kv_;
};

// One additive piece of the operator: scale(theta) * (linear stencil around
// u0, nonlinear application). scale_param empty means a unit scale.
struct OperatorComponent {
    std::string scale_param;
    std::vector<StencilTerm> terms;
};

struct Linearization {
    std::vector<StencilTerm> terms;      // parameter values baked in
    std::vector<double> analytic_residual;
    std::vector<double> u0;
};

class Model {
  public:
    virtual ~Model() = default;

    const std::string& name() const { return name_; }
    const std::vector<ParamSpec>& params() const { return params_; }
    SpatialBoundary spatial_boundary() const { return boundary_; }

    const ParamSpec& param(const std::string& n) const {
        for (const ParamSpec& p : params_)
            if (p.name == n) return p;
        throw UnknownModel("no parameter named " + n + " in model " + name_);
    }

    std::vector<std::string> learned_names() const {
        std::vector<std::string> out;
        for (const ParamSpec& p : params_)
            if (p.learned) out.push_back(p.name);
        return out;
    }

    // Fixed values plus prior modes for learned parameters.
    Params default_params() const {
        Params th;
        for (const ParamSpec& p : params_) th.set(p.name, p.learned ? p.prior.mode() : p.value);
        return th;
    }

    double component_scale(const OperatorComponent& c, const Params& theta) const {
        return c.scale_param.empty() ? 1.0 : theta.get(c.scale_param);
    }

    // Parameter-free linearised structure around u0, one entry per additive
    // operator piece.
    virtual std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                                      const SpaceTimeGrid& grid) const = 0;

    // Nonlinear application per component, aligned with components().
    virtual std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                               const SpaceTimeGrid& grid) const = 0;

    // Closed-form residual field of the linearisation (test oracle).
    virtual std::vector<double> analytic_residual(const std::vector<double>& u0,
                                                  const Params& theta,
                                                  const SpaceTimeGrid& grid) const = 0;

  protected:
    Model(std::string name, SpatialBoundary boundary, std::vector<ParamSpec> params)
        : name_(std::move(name)), boundary_(boundary), params_(std::move(params)) {
        int n_sigma_u = 0;
        for (const ParamSpec& p : params_)
            if (p.role == ParamRole::ProcessNoise) ++n_sigma_u;
        if (n_sigma_u != 1) throw UnknownModel("model must declare exactly one process-noise slot");
    }

    static std::vector<double> derivative(const std::vector<double>& u, int dt_order,
                                          int dx_order, const SpaceTimeGrid& grid) {
        return build_operator(grid, {StencilTerm::scalar(dt_order, dx_order, 1.0)}).multiply(u);
    }

  private:
    std::string name_;
    SpatialBoundary boundary_;
    std::vector<ParamSpec> params_;
};

// Discrete nonlinear operator value: sum_j scale_j(theta) * n_j(u).
inline std::vector<double> apply_nonlinear(const Model& model, const std::vector<double>& u,
                                           const Params& theta, const SpaceTimeGrid& grid) {
    const auto comps = model.components(u, grid);  // structure only; u0 fields unused here
    const auto applies = model.component_applies(u, grid);
    std::vector<double> out(grid.size(), 0.0);
    for (std::size_t j = 0; j < comps.size(); ++j) {
        const double s = model.component_scale(comps[j], theta);
        for (int i = 0; i < grid.size(); ++i) out[i] += s * applies[j][i];
    }
    return out;
}

// Linearisation with parameter values folded into the stencil coefficients.
inline Linearization linearize(const Model& model, const std::vector<double>& u0,
                               const Params& theta, const SpaceTimeGrid& grid) {
    Linearization lin;
    lin.u0 = u0;
    for (const OperatorComponent& c : model.components(u0, grid)) {
        const double s = model.component_scale(c, theta);
        for (StencilTerm t : c.terms) {
            if (t.coefficient_field.empty()) {
                t.coefficient *= s;
            } else {
                for (double& v : t.coefficient_field) v *= s;
            }
            lin.terms.push_back(std::move(t));
        }
    }
    lin.analytic_residual = model.analytic_residual(u0, theta, grid);
    return lin;
}

// Discrete residual r = L0 u0 - L[u0]; preferred over discretising the
// analytic form so that L u0 - r reproduces the discrete operator exactly.
inline std::vector<double> residual_from_identity(const Model& model,
                                                  const std::vector<double>& u0,
                                                  const Params& theta, const SpaceTimeGrid& grid,
                                                  const SparseMatrix& l0_matrix) {
    std::vector<double> r = l0_matrix.multiply(u0);
    const std::vector<double> lu = apply_nonlinear(model, u0, theta, grid);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= lu[i];
    return r;
}

// --- the four benchmark models ---------------------------------------------

// u'' + b u' + c sin(u), time-only grid.
class PendulumModel : public Model {
  public:
    PendulumModel()
        : Model("pendulum", SpatialBoundary::None,
                {{"b", ParamRole::Dynamics, {-1.36, 0.5}, true, 0.3},
                 {"c", ParamRole::Dynamics, {1.69, 1.0}, true, 1.0},
                 {"sigma_u", ParamRole::ProcessNoise, {-2.05, 0.5}, true, 0.2},
                 {"sigma_y", ParamRole::ObservationNoise, {-2.05, 0.5}, true, 0.1}}) {}

    std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                              const SpaceTimeGrid& grid) const override {
        (void)grid;
        std::vector<double> cosu0(u0.size());
        for (std::size_t i = 0; i < u0.size(); ++i) cosu0[i] = std::cos(u0[i]);
        return {{"", {StencilTerm::scalar(2, 0, 1.0)}},
                {"b", {StencilTerm::scalar(1, 0, 1.0)}},
                {"c", {StencilTerm::field(0, 0, std::move(cosu0))}}};
    }

    std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                       const SpaceTimeGrid& grid) const override {
        std::vector<double> sinu(u.size());
        for (std::size_t i = 0; i < u.size(); ++i) sinu[i] = std::sin(u[i]);
        return {derivative(u, 2, 0, grid), derivative(u, 1, 0, grid), std::move(sinu)};
    }

    std::vector<double> analytic_residual(const std::vector<double>& u0, const Params& theta,
                                          const SpaceTimeGrid& grid) const override {
        (void)grid;
        const double c = theta.get("c");
        std::vector<double> r(u0.size());
        for (std::size_t i = 0; i < u0.size(); ++i)
            r[i] = c * (u0[i] * std::cos(u0[i]) - std::sin(u0[i]));
        return r;
    }
};

// u_t + u u_x - nu u_xx, periodic in x.
class BurgersModel : public Model {
  public:
    BurgersModel()
        : Model("burgers", SpatialBoundary::Periodic,
                {{"nu", ParamRole::Dynamics, {-2.0, 1.0}, true, 0.02},
                 {"sigma_u", ParamRole::ProcessNoise, {-3.6, 1.0}, true, 0.01},
                 {"sigma_y", ParamRole::ObservationNoise, {}, false, 0.1}}) {}

    std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                              const SpaceTimeGrid& grid) const override {
        std::vector<double> u0x = derivative(u0, 0, 1, grid);
        return {{"", {StencilTerm::scalar(1, 0, 1.0)}},
                {"", {StencilTerm::field(0, 1, u0), StencilTerm::field(0, 0, std::move(u0x))}},
                {"nu", {StencilTerm::scalar(0, 2, -1.0)}}};
    }

    std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                       const SpaceTimeGrid& grid) const override {
        std::vector<double> adv = derivative(u, 0, 1, grid);
        for (std::size_t i = 0; i < u.size(); ++i) adv[i] *= u[i];
        std::vector<double> diff = derivative(u, 0, 2, grid);
        for (double& v : diff) v = -v;
        return {derivative(u, 1, 0, grid), std::move(adv), std::move(diff)};
    }

    std::vector<double> analytic_residual(const std::vector<double>& u0, const Params& theta,
                                          const SpaceTimeGrid& grid) const override {
        (void)theta;
        std::vector<double> r = derivative(u0, 0, 1, grid);
        for (std::size_t i = 0; i < u0.size(); ++i) r[i] *= u0[i];
        return r;
    }
};

// u_t - gamma u_xx + beta (u^3 - u), periodic in x.
class AllenCahnModel : public Model {
  public:
    AllenCahnModel()
        : Model("allen-cahn", SpatialBoundary::Periodic,
                {{"beta", ParamRole::Dynamics, {2.10, 1.0}, true, 5.0},
                 {"gamma", ParamRole::Dynamics, {}, false, 1e-4},
                 {"sigma_u", ParamRole::ProcessNoise, {-3.6, 1.0}, true, 0.01},
                 {"sigma_y", ParamRole::ObservationNoise, {}, false, 0.01}}) {}

    std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                              const SpaceTimeGrid& grid) const override {
        (void)grid;
        std::vector<double> reac(u0.size());
        for (std::size_t i = 0; i < u0.size(); ++i) reac[i] = 3.0 * u0[i] * u0[i] - 1.0;
        return {{"", {StencilTerm::scalar(1, 0, 1.0)}},
                {"gamma", {StencilTerm::scalar(0, 2, -1.0)}},
                {"beta", {StencilTerm::field(0, 0, std::move(reac))}}};
    }

    std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                       const SpaceTimeGrid& grid) const override {
        std::vector<double> diff = derivative(u, 0, 2, grid);
        for (double& v : diff) v = -v;
        std::vector<double> reac(u.size());
        for (std::size_t i = 0; i < u.size(); ++i) reac[i] = u[i] * u[i] * u[i] - u[i];
        return {derivative(u, 1, 0, grid), std::move(diff), std::move(reac)};
    }

    std::vector<double> analytic_residual(const std::vector<double>& u0, const Params& theta,
                                          const SpaceTimeGrid& grid) const override {
        (void)grid;
        const double beta = theta.get("beta");
        std::vector<double> r(u0.size());
        for (std::size_t i = 0; i < u0.size(); ++i) r[i] = 2.0 * beta * u0[i] * u0[i] * u0[i];
        return r;
    }
};

// u_t + lambda1 u u_x + lambda2 u_xxx, periodic in x.
class KdVModel : public Model {
  public:
    KdVModel()
        : Model("kdv", SpatialBoundary::Periodic,
                {{"lambda1", ParamRole::Dynamics, {0.31, 1.0}, true, 1.0},
                 {"lambda2", ParamRole::Dynamics, {}, false, 0.0025},
                 {"sigma_u", ParamRole::ProcessNoise, {-3.6, 1.0}, true, 0.01},
                 {"sigma_y", ParamRole::ObservationNoise, {}, false, 1e-3}}) {}

    std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                              const SpaceTimeGrid& grid) const override {
        std::vector<double> u0x = derivative(u0, 0, 1, grid);
        return {{"", {StencilTerm::scalar(1, 0, 1.0)}},
                {"lambda1", {StencilTerm::field(0, 1, u0), StencilTerm::field(0, 0, std::move(u0x))}},
                {"lambda2", {StencilTerm::scalar(0, 3, 1.0)}}};
    }

    std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                       const SpaceTimeGrid& grid) const override {
        std::vector<double> adv = derivative(u, 0, 1, grid);
        for (std::size_t i = 0; i < u.size(); ++i) adv[i] *= u[i];
        return {derivative(u, 1, 0, grid), std::move(adv), derivative(u, 0, 3, grid)};
    }

    std::vector<double> analytic_residual(const std::vector<double>& u0, const Params& theta,
                                          const SpaceTimeGrid& grid) const override {
        const double l1 = theta.get("lambda1");
        std::vector<double> r = derivative(u0, 0, 1, grid);
        for (std::size_t i = 0; i < u0.size(); ++i) r[i] *= l1 * u0[i];
        return r;
    }
};

inline std::shared_ptr<const Model> make_model(const std::string& name) {
    if (name == "pendulum") return std::make_shared<PendulumModel>();
    if (name == "burgers") return std::make_shared<BurgersModel>();
    if (name == "allen-cahn") return std::make_shared<AllenCahnModel>();
    if (name == "kdv") return std::make_shared<KdVModel>();
    throw UnknownModel("unknown model: " + name);
}

// Same operator structure with replaced parameter slots (priors, learned
// flags, fixed values).
class ModelWithParams : public Model {
  public:
    ModelWithParams(std::shared_ptr<const Model> inner, std::vector<ParamSpec> specs)
        : Model(inner->name(), inner->spatial_boundary(), std::move(specs)),
          inner_(std::move(inner)) {}

    std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                              const SpaceTimeGrid& grid) const override {
        return inner_->components(u0, grid);
    }
    std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                       const SpaceTimeGrid& grid) const override {
        return inner_->component_applies(u, grid);
    }
    std::vector<double> analytic_residual(const std::vector<double>& u0, const Params& theta,
                                          const SpaceTimeGrid& grid) const override {
        return inner_->analytic_residual(u0, theta, grid);
    }

  private:
    std::shared_ptr<const Model> inner_;
};

inline std::shared_ptr<const Model> with_params(std::shared_ptr<const Model> model,
                                                std::vector<ParamSpec> specs) {
    return std::make_shared<ModelWithParams>(std::move(model), std::move(specs));
}

}  // namespace iinla
