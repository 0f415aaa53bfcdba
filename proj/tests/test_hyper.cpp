#include <doctest.h>

#include <cmath>

#include "iinla/hyper.hpp"
#include "test_util.hpp"

using namespace iinla;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Affine scalar-per-node system L[u] = a*u - m on a tiny time grid: the
// conjugate structure gives closed forms for every quantity the
// hyperparameter layer produces.
class ToyModel : public Model {
  public:
    ToyModel(double m, bool learn_sigmas)
        : Model("toy", SpatialBoundary::None,
                {{"a", ParamRole::Dynamics, {0.0, 0.5}, true, 1.0},
                 {"sigma_u", ParamRole::ProcessNoise, {-1.0, 0.5}, learn_sigmas, 0.5},
                 {"sigma_y", ParamRole::ObservationNoise, {-1.5, 0.5}, learn_sigmas, 0.3}}),
          m_(m) {}

    std::vector<OperatorComponent> components(const std::vector<double>& u0,
                                              const SpaceTimeGrid& grid) const override {
        (void)u0;
        (void)grid;
        return {{"a", {StencilTerm::scalar(0, 0, 1.0)}}, {"", {StencilTerm::scalar(0, 0, 0.0)}}};
    }

    std::vector<std::vector<double>> component_applies(const std::vector<double>& u,
                                                       const SpaceTimeGrid& grid) const override {
        (void)grid;
        return {u, std::vector<double>(u.size(), -m_)};
    }

    std::vector<double> analytic_residual(const std::vector<double>& u0, const Params& theta,
                                          const SpaceTimeGrid& grid) const override {
        (void)u0;
        (void)theta;
        return std::vector<double>(grid.size(), m_);
    }

  private:
    double m_;
};

struct ToySetup {
    std::shared_ptr<const Model> model;
    SpaceTimeGrid grid{3, 1, 1.0, 1.0};
    ObservationSet obs;
    double m = 2.0;
    int obs_index = 1;

    explicit ToySetup(bool learn_sigmas = true) {
        model = std::make_shared<ToyModel>(m, learn_sigmas);
        obs.sigma_y = 0.3;
        obs.entries.push_back({obs_index, 1.4, -1.0});
    }

    // exact unnormalized log posterior: log p(theta) + log N(y; m/a, 1/(a^2 q) + sigma_y^2)
    double exact_log_post(const Params& th) const {
        const double a = th.get("a");
        const double sigma_u = th.get("sigma_u");
        const double sigma_y = th.get("sigma_y");
        const double q = grid.cell_volume() / (sigma_u * sigma_u);
        const double var = 1.0 / (a * a * q) + sigma_y * sigma_y;
        const double r = obs.entries[0].value - m_over_a(a);
        double lp = -0.5 * std::log(2.0 * kPi * var) - 0.5 * r * r / var;
        for (const ParamSpec& p : model->params())
            if (p.learned) lp += p.prior.log_density_of_log(std::log(th.get(p.name)));
        return lp;
    }

    double m_over_a(double a) const { return m / a; }

    // closed-form conditional posterior of the observed component
    std::pair<double, double> exact_conditional(const Params& th) const {
        const double a = th.get("a");
        const double sigma_u = th.get("sigma_u");
        const double sigma_y = th.get("sigma_y");
        const double q = grid.cell_volume() / (sigma_u * sigma_u);
        const double prec = a * a * q + 1.0 / (sigma_y * sigma_y);
        const double mean =
            (a * a * q * (m / a) + obs.entries[0].value / (sigma_y * sigma_y)) / prec;
        return {mean, 1.0 / prec};
    }
};

// synthetic objective for the node-selection unit tests
struct QuadraticObjective {
    std::vector<double> center;
    std::vector<double> scale;

    ThetaObjective::Eval evaluate(const Params& th) const {
        std::vector<double> x;
        for (std::size_t i = 0; i < center.size(); ++i)
            x.push_back(std::log(th.get("p" + std::to_string(i))));
        ThetaObjective::Eval ev;
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double z = (x[i] - center[i]) / scale[i];
            s += z * z;
        }
        ev.log_post = -0.5 * s;
        ev.post_mean = {0.0};
        return ev;
    }

    Params theta_from_log(const std::vector<double>& x) const {
        Params th;
        for (std::size_t i = 0; i < x.size(); ++i)
            th.set("p" + std::to_string(i), std::exp(x[i]));
        return th;
    }
};

}  // namespace

TEST_CASE("log_theta_posterior matches the conjugate closed form up to a constant") {
    const ToySetup toy;
    const ThetaObjective obj(toy.model, toy.grid, toy.obs, std::vector<double>(3, 0.0));

    // the two routes may differ by a theta-independent constant only
    const Params ref{{"a", 1.0}, {"sigma_u", 0.5}, {"sigma_y", 0.3}};
    const double offset = obj(ref) - toy.exact_log_post(ref);

    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const Params th{{"a", std::exp(rng.normal() * 0.4)},
                        {"sigma_u", std::exp(-1.0 + 0.3 * rng.normal())},
                        {"sigma_y", std::exp(-1.2 + 0.3 * rng.normal())}};
        const double got = obj(th);
        const double want = toy.exact_log_post(th) + offset;
        REQUIRE(std::isfinite(got));
        CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("log_theta_posterior conditional moments match the conjugate forms") {
    const ToySetup toy;
    const ThetaObjective obj(toy.model, toy.grid, toy.obs, std::vector<double>(3, 0.0));
    const Params th{{"a", 1.3}, {"sigma_u", 0.4}, {"sigma_y", 0.25}};
    const ThetaObjective::Eval ev = obj.evaluate(th);
    const auto [mean, var] = toy.exact_conditional(th);
    CHECK(ev.post_mean[toy.obs_index] == doctest::Approx(mean).epsilon(1e-10));
    const GaussianField field = obj.posterior_field(th);
    CHECK(field.marginal_variances()[toy.obs_index] == doctest::Approx(var).epsilon(1e-10));
    CHECK(testutil::max_abs_diff(field.mean(), ev.post_mean) < 1e-12);
}

TEST_CASE("log_theta_posterior returns -inf on degenerate noise") {
    const ToySetup toy;
    const ThetaObjective obj(toy.model, toy.grid, toy.obs, std::vector<double>(3, 0.0));
    const Params th{{"a", 1.0}, {"sigma_u", 1e-200}, {"sigma_y", 0.3}};
    CHECK(obj(th) == kNegInf);
    const Params singular{{"a", 0.0}, {"sigma_u", 0.5}, {"sigma_y", 0.3}};
    CHECK(obj(singular) == kNegInf);
}

TEST_CASE("find_mode on a separable quadratic") {
    const std::vector<double> m{0.3, -1.1, 0.7};
    auto f = [&](const std::vector<double>& x) {
        double s = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - m[i]) * (x[i] - m[i]);
        return -s;
    };
    const std::vector<double> x = find_mode(f, {0.0, 0.0, 0.0}, 400);
    for (int i = 0; i < 3; ++i) CHECK(std::exp(x[i]) == doctest::Approx(std::exp(m[i])).epsilon(1e-3));
}

TEST_CASE("find_mode on the log-space Rosenbrock") {
    auto f = [](const std::vector<double>& x) {
        const double a = 1.0 - x[0];
        const double b = x[1] - x[0] * x[0];
        return -(a * a + 100.0 * b * b);
    };
    const std::vector<double> x = find_mode(f, {0.8, 0.8}, 500, 1e-7);
    CHECK(x[0] == doctest::Approx(1.0).epsilon(1e-2));
    CHECK(x[1] == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("find_mode fails cleanly when nothing is finite") {
    auto f = [](const std::vector<double>&) { return kNegInf; };
    CHECK_THROWS_AS(find_mode(f, {0.0}), ModeSearchFailed);
}

TEST_CASE("reparametrize recovers analytic curvature") {
    SUBCASE("isotropic quadratic") {
        auto f = [](const std::vector<double>& x) {
            return -0.5 * (x[0] * x[0] + x[1] * x[1]);
        };
        const ModeSummary s = reparametrize(f, {0.0, 0.0});
        for (double l : s.lambda) CHECK(l == doctest::Approx(1.0).epsilon(1e-8));
        // orthonormal columns
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                double dotv = 0.0;
                for (int k = 0; k < 2; ++k) dotv += s.v(k, i) * s.v(k, j);
                CHECK(dotv == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-10));
            }
    }

    SUBCASE("anisotropic quadratic") {
        auto f = [](const std::vector<double>& x) {
            return -0.5 * (4.0 * x[0] * x[0] + x[1] * x[1]);
        };
        const ModeSummary s = reparametrize(f, {0.0, 0.0});
        std::vector<double> sorted = s.lambda;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted[0] == doctest::Approx(0.25).epsilon(1e-7));
        CHECK(sorted[1] == doctest::Approx(1.0).epsilon(1e-7));
    }

    SUBCASE("non-concave point is rejected") {
        auto f = [](const std::vector<double>& x) { return x[0] * x[0]; };
        CHECK_THROWS_AS(reparametrize(f, {0.0}), NotConcaveAtMode);
    }
}

TEST_CASE("select_nodes on an isotropic objective") {
    QuadraticObjective obj{{0.0}, {1.0}};
    ModeSummary s;
    s.theta_star = obj.theta_from_log({0.0});
    s.x_star = {0.0};
    s.v = DenseMatrix::identity(1);
    s.lambda = {1.0};
    s.log_post = 0.0;

    SUBCASE("delta = 5 keeps |z| <= 3") {
        const std::vector<ThetaNode> nodes = select_nodes(obj, s, 5.0, 1.0);
        CHECK(nodes.size() == 7);
        double zmin = 0.0, zmax = 0.0;
        for (const ThetaNode& n : nodes) {
            zmin = std::min(zmin, n.z[0]);
            zmax = std::max(zmax, n.z[0]);
        }
        CHECK(zmin == doctest::Approx(-3.0));
        CHECK(zmax == doctest::Approx(3.0));
    }

    SUBCASE("tiny delta keeps only the mode") {
        std::vector<ThetaNode> nodes = select_nodes(obj, s, 1e-12, 1.0);
        REQUIRE(nodes.size() == 1);
        normalize_weights(nodes);
        CHECK(nodes[0].weight == doctest::Approx(1.0));
    }

    SUBCASE("node budget is enforced") {
        CHECK_THROWS_AS(select_nodes(obj, s, 5.0, 1e-3, 100), NodeBudgetExceeded);
    }
}

TEST_CASE("select_nodes output is symmetric for an even objective") {
    QuadraticObjective obj{{0.0, 0.0}, {1.0, 0.7}};
    ModeSummary s;
    s.x_star = {0.0, 0.0};
    s.v = DenseMatrix::identity(2);
    s.lambda = {1.0, 0.49};
    s.log_post = 0.0;
    const std::vector<ThetaNode> nodes = select_nodes(obj, s, 4.0, 1.0);
    // closed under z -> -z
    for (const ThetaNode& n : nodes) {
        bool found = false;
        for (const ThetaNode& m : nodes)
            found |= std::abs(m.z[0] + n.z[0]) < 1e-12 && std::abs(m.z[1] + n.z[1]) < 1e-12;
        CHECK(found);
    }
}

TEST_CASE("normalize_weights") {
    auto mk = [](double lp) {
        ThetaNode n;
        n.log_post = lp;
        return n;
    };

    SUBCASE("single node") {
        std::vector<ThetaNode> nodes{mk(-3.7)};
        normalize_weights(nodes);
        CHECK(nodes[0].weight == doctest::Approx(1.0));
    }

    SUBCASE("two equal nodes") {
        std::vector<ThetaNode> nodes{mk(2.0), mk(2.0)};
        normalize_weights(nodes);
        CHECK(nodes[0].weight == doctest::Approx(0.5));
        CHECK(nodes[1].weight == doctest::Approx(0.5));
    }

    SUBCASE("hand softmax") {
        std::vector<ThetaNode> nodes{mk(0.0), mk(-std::log(3.0))};
        normalize_weights(nodes);
        CHECK(nodes[0].weight == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(nodes[1].weight == doctest::Approx(0.25).epsilon(1e-12));
    }

    SUBCASE("shift invariance") {
        std::vector<ThetaNode> a{mk(0.3), mk(-1.2), mk(2.2)};
        std::vector<ThetaNode> b{mk(0.3 + 777.0), mk(-1.2 + 777.0), mk(2.2 + 777.0)};
        normalize_weights(a);
        normalize_weights(b);
        for (int i = 0; i < 3; ++i) CHECK(std::abs(a[i].weight - b[i].weight) <= 1e-12);
    }

    SUBCASE("all invalid") {
        std::vector<ThetaNode> nodes{mk(kNegInf), mk(kNegInf)};
        CHECK_THROWS_AS(normalize_weights(nodes), AllNodesInvalid);
    }
}

TEST_CASE("mixture marginals") {
    SUBCASE("single component is the component") {
        const MixtureMarginals m({1.0}, {{0.7}}, {{2.0}});
        CHECK(m.mean(0) == doctest::Approx(0.7));
        CHECK(m.variance(0) == doctest::Approx(2.0));
        const double lp = m.log_pdf(0, 1.0);
        const double want = -0.5 * std::log(2.0 * kPi * 2.0) - 0.5 * 0.09 / 2.0;
        CHECK(lp == doctest::Approx(want).epsilon(1e-12));
    }

    SUBCASE("law of total variance") {
        const MixtureMarginals m({0.5, 0.5}, {{-1.0}, {1.0}}, {{1.0}, {1.0}});
        CHECK(m.mean(0) == doctest::Approx(0.0));
        CHECK(m.variance(0) == doctest::Approx(2.0));
    }

    SUBCASE("density equals the direct component sum") {
        const MixtureMarginals m({0.3, 0.7}, {{-0.5}, {0.8}}, {{0.4}, {1.3}});
        const double x = 0.33;
        auto comp = [&](double w, double mu, double v) {
            return w / std::sqrt(2.0 * kPi * v) * std::exp(-0.5 * (x - mu) * (x - mu) / v);
        };
        const double direct = comp(0.3, -0.5, 0.4) + comp(0.7, 0.8, 1.3);
        CHECK(m.pdf(0, x) == doctest::Approx(direct).epsilon(1e-12));
    }
}

TEST_CASE("property: mixture marginal converges to dense reference integration") {
    // conjugate toy with one learned parameter; reference by fine-grid
    // quadrature of the exact closed forms
    ToySetup toy(false);  // sigma_u, sigma_y fixed
    const ThetaObjective obj(toy.model, toy.grid, toy.obs, std::vector<double>(3, 0.0));

    const std::vector<double> x0{0.0};
    const std::vector<double> xstar = find_mode(
        [&](const std::vector<double>& x) { return obj(obj.theta_from_log(x)); }, x0, 200, 1e-6);
    const ModeSummary summary = reparametrize(
        [&](const std::vector<double>& x) { return obj(obj.theta_from_log(x)); }, xstar);
    ModeSummary s = summary;
    s.theta_star = obj.theta_from_log(xstar);

    std::vector<ThetaNode> nodes = select_nodes(obj, s, 5.0, 0.5);
    normalize_weights(nodes);
    std::vector<std::vector<double>> means, vars;
    for (const ThetaNode& n : nodes) {
        means.push_back(n.post_mean);
        vars.push_back(obj.posterior_field(n.theta).marginal_variances());
    }
    const MixtureMarginals mix = mix_marginals(nodes, means, vars);

    // reference: quadrature over a fine grid in log a
    const int ref_n = 4001;
    const double lo = xstar[0] - 8.0, hi = xstar[0] + 8.0;
    std::vector<double> lp(ref_n);
    double best = kNegInf;
    for (int i = 0; i < ref_n; ++i) {
        const double la = lo + (hi - lo) * i / (ref_n - 1.0);
        Params th = toy.model->default_params();
        th.set("a", std::exp(la));
        lp[i] = toy.exact_log_post(th);
        best = std::max(best, lp[i]);
    }
    std::vector<double> w(ref_n);
    double total = 0.0;
    for (int i = 0; i < ref_n; ++i) {
        w[i] = std::exp(lp[i] - best);
        total += w[i];
    }
    for (double& v : w) v /= total;

    // probe across the bulk of the marginal; the delta-truncated quadrature
    // is not expected to capture far tails
    const int idx = toy.obs_index;
    const double msd = std::sqrt(mix.variance(idx));
    for (const double t : {-2.0, -1.0, 0.0, 1.0, 2.0}) {
        const double u = mix.mean(idx) + t * msd;
        double ref_pdf = 0.0;
        for (int i = 0; i < ref_n; ++i) {
            if (w[i] < 1e-14) continue;
            const double la = lo + (hi - lo) * i / (ref_n - 1.0);
            Params th = toy.model->default_params();
            th.set("a", std::exp(la));
            const auto [mean, var] = toy.exact_conditional(th);
            ref_pdf +=
                w[i] / std::sqrt(2.0 * kPi * var) * std::exp(-0.5 * (u - mean) * (u - mean) / var);
        }
        const double gap = std::abs(mix.log_pdf(idx, u) - std::log(ref_pdf));
        INFO("u = ", u, " gap = ", gap);
        CHECK(gap <= 0.05);
    }
}

TEST_CASE("objective with an initial-slice block matches a dense reference") {
    const auto model = std::make_shared<BurgersModel>();
    SpaceTimeGrid g{6, 8, 0.05, 0.25, 0.0, -1.0, SpatialBoundary::Periodic};
    const int n = g.size(), nx = g.nx;
    Rng rng(17);
    std::vector<double> u0(n);
    for (int i = 0; i < n; ++i) u0[i] = 0.3 * std::sin(0.7 * i) + 0.05 * rng.normal();

    ObservationSet obs;
    obs.sigma_y = 0.1;
    for (int k = 0; k < 10; ++k)
        obs.entries.push_back({static_cast<int>(rng.uniform_index(n)), rng.normal(), -1.0});

    InitialSliceGaussian init;
    init.mean.resize(nx);
    for (int i = 0; i < nx; ++i) init.mean[i] = 0.2 * std::cos(0.5 * i);
    DenseMatrix cov(nx, nx);
    for (int i = 0; i < nx; ++i)
        for (int j = 0; j < nx; ++j)
            cov(i, j) = 0.04 * std::exp(-0.5 * (i - j) * (i - j) / 4.0);
    for (int i = 0; i < nx; ++i) cov(i, i) += 1e-6;
    const DenseMatrix prec = dense_inverse_spd(cov);
    init.precision.assign(nx, std::vector<double>(nx));
    for (int i = 0; i < nx; ++i)
        for (int j = 0; j < nx; ++j) init.precision[i][j] = prec(i, j);

    const ThetaObjective obj(model, g, obs, u0, init);

    auto dense_ref = [&](const Params& th) {
        const double su = th.get("sigma_u"), sy = th.get("sigma_y");
        const double q = g.cell_volume() / (su * su);
        const Linearization lin = linearize(*model, u0, th, g);
        const SparseMatrix ls = build_operator(g, lin.terms);
        const std::vector<double> r = residual_from_identity(*model, u0, th, g, ls);
        const DenseMatrix ld = DenseMatrix::from_sparse(ls);
        DenseMatrix pu = ld.transposed().multiply(ld);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) pu(i, j) *= q;
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < nx; ++j) pu(i, j) += init.precision[i][j];
        std::vector<double> bp = ld.transposed().multiply(r);
        for (double& v : bp) v *= q;
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < nx; ++j) bp[i] += init.precision[i][j] * init.mean[j];
        DenseMatrix ppost = pu;
        std::vector<double> b = bp;
        for (const Observation& o : obs.entries) {
            ppost(o.index, o.index) += 1.0 / (sy * sy);
            b[o.index] += o.value / (sy * sy);
        }
        const std::vector<double> mu = dense_solve_spd(ppost, b);
        const std::vector<double> mu_u = dense_solve_spd(pu, bp);
        double lp = 0.0;
        for (const ParamSpec& ps : model->params())
            if (ps.learned) lp += ps.prior.log_density_of_log(std::log(th.get(ps.name)));
        lp += 0.5 * dense_spd_logdet(pu);
        std::vector<double> diff(n);
        for (int i = 0; i < n; ++i) diff[i] = mu[i] - mu_u[i];
        lp -= 0.5 * dot(diff, pu.multiply(diff));
        for (const Observation& o : obs.entries) {
            const double resid = o.value - mu[o.index];
            lp += -std::log(sy) - 0.5 * resid * resid / (sy * sy);
        }
        lp -= 0.5 * dense_spd_logdet(ppost);
        return lp;
    };

    const Params ref{{"nu", 0.05}, {"sigma_u", 0.01}, {"sigma_y", 0.1}};
    const double off = obj(ref) - dense_ref(ref);
    for (int t = 0; t < 8; ++t) {
        const Params th{{"nu", std::exp(-3.0 + 0.7 * rng.normal())},
                        {"sigma_u", std::exp(-4.0 + 0.8 * rng.normal())},
                        {"sigma_y", 0.1}};
        CHECK(obj(th) == doctest::Approx(dense_ref(th) + off).epsilon(1e-9));
    }
}
