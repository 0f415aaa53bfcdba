#pragma once

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "iinla/assimilate.hpp"
#include "iinla/metrics.hpp"
#include "iinla/oracle.hpp"

namespace iinla::harness {

using nlohmann::json;

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Observation sampling protocols used by the benchmark experiments.
struct ObsProtocol {
    std::string type;  // "fraction" | "strips" | "uniform-rect"
    double sigma_y = 0.1;
    // fraction: share of grid nodes inside [t_min, t_max], without replacement
    double fraction = 0.05;
    double t_min = 0.0;
    double t_max = 10.0;
    // strips: per_strip samples of x ~ U(x_lo, x_hi) at each strip time
    std::vector<double> strip_times;
    int per_strip = 20;
    // uniform-rect: count samples of (t, x) ~ U([t_min, t_max] x [x_lo, x_hi])
    int count = 256;
};

struct ExperimentConfig {
    std::string model;
    SpaceTimeGrid grid;
    Params truth;          // ground-truth parameter values
    ObsProtocol obs;
    bool known_theta = false;
    std::map<std::string, LogNormalPrior> prior_overrides;
    IterationConfig iter;
    std::uint64_t seed = 0;
    int truth_refine = 4;  // spatial refinement of the ground-truth solver
    // pendulum initial condition
    double pend_u0 = 0.75 * 3.14159265358979323846;
    double pend_omega0 = 0.0;
    bool inject_background = true;   // PDE initial-slice constraint
    double background_lt = 0.5;      // temporal lengthscale for extrapolating u_b
    double background_window = 0.0;  // pulls obs with t <= t_first + window into the fit
    int smc_pmmh_iters = 2000;       // reduced-budget reference sampler
    int smc_pmmh_particles = 300;
    int smc_filter_particles = 1000;
    int smc_draws = 300;
};

inline ExperimentConfig make_preset(const std::string& name) {
    ExperimentConfig c;
    c.model = name;
    if (name == "pendulum") {
        c.grid = SpaceTimeGrid{2500, 1, 0.01, 1.0};
        c.truth = Params{{"b", 0.3}, {"c", 1.0}, {"sigma_u", 0.2}, {"sigma_y", 0.1}};
        c.obs = ObsProtocol{"fraction", 0.1, 0.05, 0.0, 10.0, {}, 0, 0};
        c.obs.sigma_y = 0.1;
        c.iter.gamma = 0.3;
        c.iter.max_iters = 25;
        c.iter.delta = 5.0;
        c.iter.mode_max_evals = 600;
        c.inject_background = false;
        c.truth_refine = 1;
    } else if (name == "burgers") {
        c.grid = SpaceTimeGrid{26, 50, 0.02, 0.04, 0.0, -1.0, SpatialBoundary::Periodic};
        c.truth = Params{{"nu", 0.02}, {"sigma_u", 1e-3}, {"sigma_y", 0.1}};
        c.obs = ObsProtocol{"strips", 0.1, 0.0, 0.0, 0.0, {0.0, 0.26}, 20, 0};
        c.iter.gamma = 0.5;
        c.iter.max_iters = 10;
        c.iter.delta = 3.0;
        c.iter.rule = UpdateRule::TypeI;
        c.truth_refine = 12;
    } else if (name == "allen-cahn") {
        c.grid = SpaceTimeGrid{51, 128, 0.02, 1.0 / 64.0, 0.0, -1.0, SpatialBoundary::Periodic};
        c.truth = Params{{"beta", 5.0}, {"gamma", 1e-4}, {"sigma_u", 1e-3}, {"sigma_y", 0.01}};
        c.obs = ObsProtocol{"uniform-rect", 0.01, 0.0, 0.0, 0.28, {}, 0, 256};
        c.iter.gamma = 0.5;
        c.iter.max_iters = 10;
        c.iter.delta = 3.0;
        c.iter.rule = UpdateRule::TypeI;
        c.truth_refine = 8;
        c.background_window = 0.08;
    } else if (name == "kdv") {
        c.grid = SpaceTimeGrid{51, 128, 0.02, 1.0 / 64.0, 0.0, -1.0, SpatialBoundary::Periodic};
        c.truth = Params{{"lambda1", 1.0}, {"lambda2", 0.0025}, {"sigma_u", 1e-3},
                         {"sigma_y", 1e-3}};
        c.obs = ObsProtocol{"strips", 1e-3, 0.0, 0.0, 0.0, {0.2, 0.8}, 20, 0};
        c.iter.gamma = 0.5;
        c.iter.max_iters = 10;
        c.iter.delta = 3.0;
        c.iter.rule = UpdateRule::TypeI;
        c.truth_refine = 4;
    } else {
        throw ConfigError("unknown preset: " + name);
    }
    return c;
}

// --- JSON (de)serialization ---------------------------------------------------

inline json config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = c.model;
    j["grid"] = {{"nt", c.grid.nt},
                 {"nx", c.grid.nx},
                 {"dt", c.grid.dt},
                 {"dx", c.grid.dx},
                 {"t0", c.grid.t0},
                 {"x0", c.grid.x0},
                 {"boundary", c.grid.boundary == SpatialBoundary::Periodic ? "periodic" : "none"}};
    j["truth"] = c.truth.map();
    j["observations"] = {{"type", c.obs.type},         {"sigma_y", c.obs.sigma_y},
                         {"fraction", c.obs.fraction}, {"t_min", c.obs.t_min},
                         {"t_max", c.obs.t_max},       {"strip_times", c.obs.strip_times},
                         {"per_strip", c.obs.per_strip}, {"count", c.obs.count}};
    j["known_theta"] = c.known_theta;
    json priors = json::object();
    for (const auto& [nm, p] : c.prior_overrides) priors[nm] = {{"mu", p.mu}, {"sigma", p.sigma}};
    j["prior_overrides"] = priors;
    j["iteration"] = {{"gamma", c.iter.gamma},
                      {"max_iters", c.iter.max_iters},
                      {"tolerance", c.iter.tolerance},
                      {"update_rule", c.iter.rule == UpdateRule::TypeI ? "type1" : "type2"},
                      {"delta", c.iter.delta},
                      {"z_step", c.iter.z_step},
                      {"node_cap", c.iter.node_cap},
                      {"mode_max_evals", c.iter.mode_max_evals},
                      {"fixed_point_refine", c.iter.fixed_point_refine}};
    j["seed"] = c.seed;
    j["truth_refine"] = c.truth_refine;
    j["pendulum_initial"] = {{"u0", c.pend_u0}, {"omega0", c.pend_omega0}};
    j["inject_background"] = c.inject_background;
    j["background_lt"] = c.background_lt;
    j["background_window"] = c.background_window;
    j["smc"] = {{"pmmh_iters", c.smc_pmmh_iters},
                {"pmmh_particles", c.smc_pmmh_particles},
                {"filter_particles", c.smc_filter_particles},
                {"draws", c.smc_draws}};
    return j;
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        if (j.contains("preset")) c = make_preset(j.at("preset").get<std::string>());
        if (j.contains("model")) c.model = j.at("model").get<std::string>();
        if (c.model.empty()) throw ConfigError("config must name a model or preset");
        if (j.contains("grid")) {
            const json& g = j.at("grid");
            if (g.contains("nt")) c.grid.nt = g.at("nt").get<int>();
            if (g.contains("nx")) c.grid.nx = g.at("nx").get<int>();
            if (g.contains("dt")) c.grid.dt = g.at("dt").get<double>();
            if (g.contains("dx")) c.grid.dx = g.at("dx").get<double>();
            if (g.contains("t0")) c.grid.t0 = g.at("t0").get<double>();
            if (g.contains("x0")) c.grid.x0 = g.at("x0").get<double>();
            if (g.contains("boundary"))
                c.grid.boundary = g.at("boundary").get<std::string>() == "periodic"
                                      ? SpatialBoundary::Periodic
                                      : SpatialBoundary::None;
        }
        if (j.contains("truth"))
            for (const auto& [k, v] : j.at("truth").items()) c.truth.set(k, v.get<double>());
        if (j.contains("observations")) {
            const json& o = j.at("observations");
            if (o.contains("type")) c.obs.type = o.at("type").get<std::string>();
            if (o.contains("sigma_y")) c.obs.sigma_y = o.at("sigma_y").get<double>();
            if (o.contains("fraction")) c.obs.fraction = o.at("fraction").get<double>();
            if (o.contains("t_min")) c.obs.t_min = o.at("t_min").get<double>();
            if (o.contains("t_max")) c.obs.t_max = o.at("t_max").get<double>();
            if (o.contains("strip_times"))
                c.obs.strip_times = o.at("strip_times").get<std::vector<double>>();
            if (o.contains("per_strip")) c.obs.per_strip = o.at("per_strip").get<int>();
            if (o.contains("count")) c.obs.count = o.at("count").get<int>();
        }
        if (j.contains("known_theta")) c.known_theta = j.at("known_theta").get<bool>();
        if (j.contains("prior_overrides"))
            for (const auto& [k, v] : j.at("prior_overrides").items())
                c.prior_overrides[k] =
                    LogNormalPrior{v.at("mu").get<double>(), v.at("sigma").get<double>()};
        if (j.contains("iteration")) {
            const json& it = j.at("iteration");
            if (it.contains("gamma")) c.iter.gamma = it.at("gamma").get<double>();
            if (it.contains("max_iters")) c.iter.max_iters = it.at("max_iters").get<int>();
            if (it.contains("tolerance")) c.iter.tolerance = it.at("tolerance").get<double>();
            if (it.contains("update_rule"))
                c.iter.rule = it.at("update_rule").get<std::string>() == "type1"
                                  ? UpdateRule::TypeI
                                  : UpdateRule::TypeII;
            if (it.contains("delta")) c.iter.delta = it.at("delta").get<double>();
            if (it.contains("z_step")) c.iter.z_step = it.at("z_step").get<double>();
            if (it.contains("node_cap")) c.iter.node_cap = it.at("node_cap").get<int>();
            if (it.contains("mode_max_evals"))
                c.iter.mode_max_evals = it.at("mode_max_evals").get<int>();
            if (it.contains("fixed_point_refine"))
                c.iter.fixed_point_refine = it.at("fixed_point_refine").get<int>();
        }
        if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("truth_refine")) c.truth_refine = j.at("truth_refine").get<int>();
        if (j.contains("pendulum_initial")) {
            c.pend_u0 = j.at("pendulum_initial").at("u0").get<double>();
            c.pend_omega0 = j.at("pendulum_initial").at("omega0").get<double>();
        }
        if (j.contains("inject_background"))
            c.inject_background = j.at("inject_background").get<bool>();
        if (j.contains("background_lt")) c.background_lt = j.at("background_lt").get<double>();
        if (j.contains("background_window"))
            c.background_window = j.at("background_window").get<double>();
        if (j.contains("smc")) {
            const json& s = j.at("smc");
            if (s.contains("pmmh_iters")) c.smc_pmmh_iters = s.at("pmmh_iters").get<int>();
            if (s.contains("pmmh_particles"))
                c.smc_pmmh_particles = s.at("pmmh_particles").get<int>();
            if (s.contains("filter_particles"))
                c.smc_filter_particles = s.at("filter_particles").get<int>();
            if (s.contains("draws")) c.smc_draws = s.at("draws").get<int>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    return c;
}

// --- model assembly from config ------------------------------------------------

inline std::shared_ptr<const Model> configured_model(const ExperimentConfig& c) {
    std::shared_ptr<const Model> base = make_model(c.model);
    if (c.prior_overrides.empty()) return base;
    std::vector<ParamSpec> specs = base->params();
    for (ParamSpec& p : specs) {
        const auto it = c.prior_overrides.find(p.name);
        if (it != c.prior_overrides.end()) p.prior = it->second;
    }
    return with_params(base, std::move(specs));
}

// --- dataset generation ---------------------------------------------------------

struct Dataset {
    std::vector<double> truth_field;  // flattened, time-major
    ObservationSet obs;
};

inline std::vector<double> initial_condition_field(const ExperimentConfig& c) {
    constexpr double pi = 3.14159265358979323846;
    std::vector<double> u0(c.grid.nx);
    for (int i = 0; i < c.grid.nx; ++i) {
        const double x = c.grid.space(i);
        if (c.model == "burgers") u0[i] = -std::sin(pi * x);
        if (c.model == "allen-cahn") u0[i] = x * x * std::cos(pi * x);
        if (c.model == "kdv") u0[i] = std::cos(pi * x);
    }
    return u0;
}

inline Dataset generate_dataset(const ExperimentConfig& c) {
    c.grid.validate();
    Dataset d;
    d.obs.sigma_y = c.obs.sigma_y;
    Rng rng(c.seed * 2654435761ULL + 1);

    if (c.model == "pendulum") {
        const auto tr = oracle::simulate_pendulum(
            c.truth.get("b"), c.truth.get("c"), c.truth.get("sigma_u"), c.pend_u0,
            c.pend_omega0, c.grid.dt, c.grid.nt - 1, c.seed * 48271ULL + 7);
        d.truth_field.assign(tr.u.begin(), tr.u.begin() + c.grid.nt);
    } else {
        const auto model = make_model(c.model);
        d.truth_field = oracle::solve_pde_ground_truth(*model, c.truth, c.grid,
                                                       initial_condition_field(c),
                                                       c.truth_refine);
    }

    const double sig = c.obs.sigma_y;
    auto push_noisy = [&](int index) {
        d.obs.entries.push_back({index, d.truth_field[index] + sig * rng.normal(), -1.0});
    };

    if (c.obs.type == "fraction") {
        std::vector<int> window;
        for (int it = 0; it < c.grid.nt; ++it)
            if (c.grid.time(it) >= c.obs.t_min && c.grid.time(it) <= c.obs.t_max)
                for (int ix = 0; ix < c.grid.nx; ++ix) window.push_back(c.grid.flat(it, ix));
        const int count = std::max(
            1, static_cast<int>(std::lround(c.obs.fraction * window.size())));
        for (int k : rng.sample_without_replacement(static_cast<int>(window.size()), count))
            push_noisy(window[k]);
    } else if (c.obs.type == "strips") {
        for (const double ts : c.obs.strip_times) {
            const int it = static_cast<int>(std::lround((ts - c.grid.t0) / c.grid.dt));
            if (it < 0 || it >= c.grid.nt) throw ConfigError("strip time outside the grid");
            for (int k = 0; k < c.obs.per_strip; ++k) {
                const double x =
                    rng.uniform(c.grid.x0, c.grid.x0 + c.grid.nx * c.grid.dx);
                int ix = static_cast<int>(std::lround((x - c.grid.x0) / c.grid.dx));
                ix = ((ix % c.grid.nx) + c.grid.nx) % c.grid.nx;  // periodic snap
                push_noisy(c.grid.flat(it, ix));
            }
        }
    } else if (c.obs.type == "uniform-rect") {
        for (int k = 0; k < c.obs.count; ++k) {
            const double t = rng.uniform(c.obs.t_min, c.obs.t_max);
            const double x = rng.uniform(c.grid.x0, c.grid.x0 + c.grid.nx * c.grid.dx);
            int it = static_cast<int>(std::lround((t - c.grid.t0) / c.grid.dt));
            it = std::min(std::max(it, 0), c.grid.nt - 1);
            int ix = static_cast<int>(std::lround((x - c.grid.x0) / c.grid.dx));
            ix = ((ix % c.grid.nx) + c.grid.nx) % c.grid.nx;
            push_noisy(c.grid.flat(it, ix));
        }
    } else {
        throw ConfigError("unknown observation protocol: " + c.obs.type);
    }
    return d;
}

// --- file I/O --------------------------------------------------------------------

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_field_csv(const std::string& path, const SpaceTimeGrid& grid,
                            const std::vector<double>& field) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path);
    for (int it = 0; it < grid.nt; ++it) {
        for (int ix = 0; ix < grid.nx; ++ix) {
            if (ix) f << ',';
            f << format_double(field[grid.flat(it, ix)]);
        }
        f << '\n';
    }
}

inline std::vector<double> read_field_csv(const std::string& path, const SpaceTimeGrid& grid) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path);
    std::vector<double> field;
    field.reserve(grid.size());
    std::string line;
    while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) field.push_back(std::stod(cell));
    }
    if (static_cast<int>(field.size()) != grid.size())
        throw ConfigError("field size mismatch in " + path);
    return field;
}

inline std::uint64_t fnv1a_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot hash " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char ch;
    while (f.get(ch)) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    return h;
}

inline void write_dataset(const std::string& dir, const ExperimentConfig& c, const Dataset& d) {
    std::filesystem::create_directories(dir);
    write_field_csv(dir + "/truth.csv", c.grid, d.truth_field);
    {
        std::ofstream f(dir + "/obs.csv");
        f << "index,t,x,value,std\n";
        for (const Observation& o : d.obs.entries) {
            const int it = o.index / c.grid.nx, ix = o.index % c.grid.nx;
            f << o.index << ',' << format_double(c.grid.time(it)) << ','
              << format_double(c.grid.space(ix)) << ',' << format_double(o.value) << ','
              << format_double(o.noise_std) << '\n';
        }
    }
    json meta;
    meta["config"] = config_to_json(c);
    meta["truth_hash"] = fnv1a_file(dir + "/truth.csv");
    meta["obs_hash"] = fnv1a_file(dir + "/obs.csv");
    meta["n_observations"] = d.obs.size();
    std::ofstream f(dir + "/dataset.json");
    f << meta.dump(2) << '\n';
}

inline Dataset read_dataset(const std::string& dir, const ExperimentConfig& c) {
    Dataset d;
    d.truth_field = read_field_csv(dir + "/truth.csv", c.grid);
    d.obs.sigma_y = c.obs.sigma_y;
    std::ifstream f(dir + "/obs.csv");
    if (!f) throw ConfigError("cannot read " + dir + "/obs.csv");
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string cell;
        Observation o;
        std::getline(ss, cell, ',');
        o.index = std::stoi(cell);
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        std::getline(ss, cell, ',');
        o.value = std::stod(cell);
        std::getline(ss, cell, ',');
        o.noise_std = std::stod(cell);
        d.obs.entries.push_back(o);
    }
    return d;
}

// --- assimilation driver -----------------------------------------------------------

struct RunOutput {
    AssimilationResult result;
    ObservationSet assimilated_obs;
    InitialSliceGaussian initial;
    std::vector<double> u_background;
};

// Background field for the PDE problems: a spatial GP fit over the earliest
// observed slice, attenuated toward the mean-zero prior when that slice sits
// away from t = 0 (squared-exponential decay in time with lengthscale
// background_lt). Returns a correlated initial-slice Gaussian so the smooth
// structure of the background carries into the assimilation.
inline InitialSliceGaussian prepare_background(const ExperimentConfig& c, const Dataset& data) {
    int first_slice = -1;
    for (const Observation& o : data.obs.entries) {
        const int it = o.index / c.grid.nx;
        if (first_slice < 0 || it < first_slice) first_slice = it;
    }
    if (first_slice < 0) throw oracle::NoInitialData("dataset has no observations");

    // gather observations inside a short window after the earliest slice; the
    // within-window drift of the field enters the fit as extra noise
    const double t_first = c.grid.time(first_slice);
    std::vector<std::pair<double, double>> pts;
    double t_last = t_first;
    for (const Observation& o : data.obs.entries) {
        const int it = o.index / c.grid.nx;
        if (c.grid.time(it) <= t_first + c.background_window + 1e-12 || it == first_slice) {
            pts.push_back({c.grid.space(o.index % c.grid.nx), o.value});
            t_last = std::max(t_last, c.grid.time(it));
        }
    }
    std::vector<double> xg(c.grid.nx);
    for (int i = 0; i < c.grid.nx; ++i) xg[i] = c.grid.space(i);
    const double period =
        c.grid.boundary == SpatialBoundary::Periodic ? c.grid.nx * c.grid.dx : -1.0;
    const double fit_sigma = c.obs.sigma_y + 0.3 * std::max(0.0, t_last - t_first);
    const oracle::BackgroundFit fit = oracle::background_fit(pts, fit_sigma, xg, period);

    const double gap = c.grid.time(first_slice) - c.grid.t0;
    const double rho = std::exp(-0.5 * (gap / c.background_lt) * (gap / c.background_lt));
    const int nx = c.grid.nx;

    InitialSliceGaussian init;
    init.mean.resize(nx);
    for (int i = 0; i < nx; ++i) init.mean[i] = rho * fit.mean[i];
    // cov = rho^2 * fit posterior cov + (1 - rho^2) * kernel prior cov
    DenseMatrix cov(nx, nx);
    for (int i = 0; i < nx; ++i)
        for (int j = 0; j < nx; ++j)
            cov(i, j) = rho * rho * fit.latent_cov(i, j) +
                        (1.0 - rho * rho) * fit.prior_cov(i, j);
    const double jitter = 1e-8 * fit.amplitude * fit.amplitude + 1e-10;
    for (int i = 0; i < nx; ++i) cov(i, i) += jitter;
    const DenseMatrix prec = dense_inverse_spd(cov);
    init.precision.assign(nx, std::vector<double>(nx));
    for (int i = 0; i < nx; ++i)
        for (int j = 0; j < nx; ++j) init.precision[i][j] = 0.5 * (prec(i, j) + prec(j, i));
    return init;
}

// Non-physics baseline: the background fit extended flat over time, with the
// same squared-exponential time attenuation used for initialisation. One
// Gaussian per grid point.
inline MixtureMarginals flat_background_marginals(const ExperimentConfig& c,
                                                  const Dataset& data) {
    int first_slice = 0;
    {
        int fs = -1;
        for (const Observation& o : data.obs.entries) {
            const int it = o.index / c.grid.nx;
            if (fs < 0 || it < fs) fs = it;
        }
        first_slice = std::max(fs, 0);
    }
    std::vector<std::pair<double, double>> pts;
    for (const Observation& o : data.obs.entries) {
        const int it = o.index / c.grid.nx;
        if (it == first_slice) pts.push_back({c.grid.space(o.index % c.grid.nx), o.value});
    }
    std::vector<double> xg(c.grid.nx);
    for (int i = 0; i < c.grid.nx; ++i) xg[i] = c.grid.space(i);
    const double period =
        c.grid.boundary == SpatialBoundary::Periodic ? c.grid.nx * c.grid.dx : -1.0;
    const oracle::BackgroundFit fit = oracle::background_fit(pts, c.obs.sigma_y, xg, period);

    const double amp2 = fit.amplitude * fit.amplitude;
    const double t_first = c.grid.time(first_slice);
    std::vector<double> mean(c.grid.size()), var(c.grid.size());
    for (int it = 0; it < c.grid.nt; ++it) {
        const double gap = std::abs(c.grid.time(it) - t_first);
        const double rho = std::exp(-0.5 * (gap / c.background_lt) * (gap / c.background_lt));
        for (int ix = 0; ix < c.grid.nx; ++ix) {
            const int i = c.grid.flat(it, ix);
            const double lv = fit.latent_std_dev[ix] * fit.latent_std_dev[ix];
            mean[i] = rho * fit.mean[ix];
            var[i] = std::max((1.0 - rho * rho) * amp2 + rho * rho * lv, 1e-10);
        }
    }
    return MixtureMarginals({1.0}, {std::move(mean)}, {std::move(var)});
}

inline RunOutput run_assimilation(const ExperimentConfig& c, const Dataset& data) {
    const auto model = configured_model(c);
    RunOutput out;
    out.assimilated_obs = data.obs;
    IterationConfig iter = c.iter;

    if (c.model != "pendulum") {
        if (c.inject_background) {
            out.initial = prepare_background(c, data);
            out.u_background = out.initial.mean;
        } else {
            out.u_background = initial_condition_field(c);
        }
        // initial linearisation point: deterministic forward solve from the
        // background at the prior modes
        iter.u_init = oracle::solve_pde_ground_truth(*model, model->default_params(), c.grid,
                                                     out.u_background, c.truth_refine);
    }

    const auto t0 = std::chrono::steady_clock::now();
    if (c.known_theta) {
        Params theta = model->default_params();
        for (const auto& [k, v] : c.truth.map()) theta.set(k, v);
        out.result = assimilate_known_theta(model, c.grid, out.assimilated_obs, theta, iter,
                                            out.initial);
    } else {
        out.result =
            assimilate_unknown_theta(model, c.grid, out.assimilated_obs, iter, out.initial);
    }
    out.result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// --- result persistence ---------------------------------------------------------------

inline void write_result(const std::string& dir, const ExperimentConfig& c,
                         const std::string& dataset_dir, const RunOutput& run) {
    std::filesystem::create_directories(dir);
    const AssimilationResult& r = run.result;
    write_field_csv(dir + "/u0.csv", c.grid, r.u0);
    std::vector<double> mean(c.grid.size()), var(c.grid.size());
    for (int i = 0; i < c.grid.size(); ++i) {
        mean[i] = r.marginals.mean(i);
        var[i] = r.marginals.variance(i);
    }
    write_field_csv(dir + "/mean.csv", c.grid, mean);
    write_field_csv(dir + "/var.csv", c.grid, var);

    json j;
    j["config"] = config_to_json(c);
    j["dataset_hash"] = {{"truth", fnv1a_file(dataset_dir + "/truth.csv")},
                         {"obs", fnv1a_file(dataset_dir + "/obs.csv")}};
    j["converged"] = r.converged;
    j["iterations"] = r.iterations;
    j["wall_seconds"] = r.wall_seconds;
    json trace = json::array();
    for (const IterationRecord& t : r.trace) {
        json row;
        row["delta_u"] = t.delta_u;
        row["node_count"] = t.node_count;
        row["mode_log_post"] = t.mode_log_post;
        row["theta_mode"] = t.theta_mode.map();
        trace.push_back(row);
    }
    j["trace"] = trace;
    json nodes = json::array();
    for (const ThetaNode& n : r.nodes) {
        json row;
        row["theta"] = n.theta.map();
        row["z"] = n.z;
        row["log_post"] = std::isfinite(n.log_post) ? n.log_post : -1e308;
        row["weight"] = n.weight;
        nodes.push_back(row);
    }
    j["nodes"] = nodes;
    if (!c.known_theta) {
        j["mode"] = {{"theta_star", r.mode.theta_star.map()},
                     {"x_star", r.mode.x_star},
                     {"lambda", r.mode.lambda},
                     {"log_post", r.mode.log_post}};
    }
    // per-node marginal components for exact reload
    json comp = json::array();
    for (int k = 0; k < r.marginals.components(); ++k) {
        json row;
        row["weight"] = r.marginals.weights()[k];
        row["mean"] = r.marginals.component_means()[k];
        row["variance"] = r.marginals.component_variances()[k];
        comp.push_back(row);
    }
    j["marginal_components"] = comp;
    std::ofstream f(dir + "/result.json");
    f << j.dump(2) << '\n';
}

struct LoadedResult {
    ExperimentConfig config;
    std::vector<double> u0;
    MixtureMarginals marginals;
    bool converged = false;
    json raw;
};

inline LoadedResult read_result(const std::string& dir) {
    std::ifstream f(dir + "/result.json");
    if (!f) throw ConfigError("cannot read " + dir + "/result.json");
    json j;
    f >> j;
    LoadedResult out;
    out.raw = j;
    out.config = config_from_json(j.at("config"));
    out.converged = j.at("converged").get<bool>();
    out.u0 = read_field_csv(dir + "/u0.csv", out.config.grid);
    std::vector<double> w;
    std::vector<std::vector<double>> means, vars;
    for (const json& row : j.at("marginal_components")) {
        w.push_back(row.at("weight").get<double>());
        means.push_back(row.at("mean").get<std::vector<double>>());
        vars.push_back(row.at("variance").get<std::vector<double>>());
    }
    out.marginals = MixtureMarginals(std::move(w), std::move(means), std::move(vars));
    return out;
}

// --- SMC reference and evaluation ------------------------------------------------------

// Reduced-budget posterior reference for the pendulum: PMMH over the learned
// parameters, then one backward-simulation trajectory per retained parameter
// sample, scrambled into product-of-marginals samples.
inline std::vector<std::vector<double>> smc_reference_samples(const ExperimentConfig& c,
                                                              const Dataset& data) {
    if (c.model != "pendulum") throw ConfigError("SMC reference is pendulum-only");
    std::vector<std::pair<int, double>> obs;
    for (const Observation& o : data.obs.entries) obs.push_back({o.index, o.value});
    oracle::PendulumSmootherProblem pr = oracle::make_smoother_problem(
        c.truth.get("b"), c.truth.get("c"), c.truth.get("sigma_u"), c.obs.sigma_y, c.pend_u0,
        c.pend_omega0, c.grid.dt, c.grid.nt - 1, obs);

    const auto model = configured_model(c);
    std::vector<ParamSpec> learned;
    for (const ParamSpec& p : model->params())
        if (p.learned) learned.push_back(p);

    oracle::PmmhOptions opt;
    opt.n_iters = c.smc_pmmh_iters;
    opt.n_particles = c.smc_pmmh_particles;
    const std::vector<Params> thetas = oracle::pmmh(pr, learned, opt, c.seed * 7919ULL + 3);

    const int draws = std::min<int>(c.smc_draws, static_cast<int>(thetas.size()));
    const int stride = std::max<int>(1, static_cast<int>(thetas.size()) / draws);
    oracle::ParticleEnsemble joint;
    joint.particles.assign(c.grid.nt, {});
    int made = 0;
    for (std::size_t k = 0; k < thetas.size() && made < draws; k += stride, ++made) {
        oracle::PendulumSmootherProblem prk = pr;
        const Params& th = thetas[k];
        if (th.has("b")) prk.b = th.get("b");
        if (th.has("c")) prk.c = th.get("c");
        if (th.has("sigma_u")) prk.sigma_u = th.get("sigma_u");
        if (th.has("sigma_y")) prk.sigma_y = th.get("sigma_y");
        const oracle::ParticleEnsemble one = oracle::bootstrap_smoother(
            prk, c.smc_filter_particles, 1, c.seed * 104729ULL + 17 + k);
        for (int t = 0; t < c.grid.nt; ++t) joint.particles[t].push_back(one.particles[t][0]);
    }
    return metrics::scramble(joint, c.seed * 15485863ULL + 29);
}

inline void write_samples_csv(const std::string& path,
                              const std::vector<std::vector<double>>& samples) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path);
    for (const auto& row : samples) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) f << ',';
            f << format_double(row[i]);
        }
        f << '\n';
    }
}

inline std::vector<std::vector<double>> read_samples_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path);
    std::vector<std::vector<double>> out;
    std::string line;
    while (std::getline(f, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        out.push_back(std::move(row));
    }
    return out;
}

struct EvalReport {
    double rmse = 0.0;
    double mnll = 0.0;
    bool has_mmd = false;
    double mmd = 0.0;
};

inline EvalReport evaluate_result(const LoadedResult& res, const std::vector<double>& truth,
                                  const std::vector<std::vector<double>>* smc_samples,
                                  int mmd_samples = 300, std::uint64_t mmd_seed = 1234) {
    EvalReport rep;
    rep.rmse = metrics::rmse(res.u0, truth);
    rep.mnll = metrics::mnll(res.marginals, truth);
    if (smc_samples != nullptr) {
        const auto mine =
            metrics::sample_product_marginals(res.marginals, mmd_samples, mmd_seed);
        rep.mmd = metrics::mmd(mine, *smc_samples);
        rep.has_mmd = true;
    }
    return rep;
}

// --- plot-data export ---------------------------------------------------------------

inline void write_plotdata(const std::string& dir, const LoadedResult& res) {
    std::filesystem::create_directories(dir);
    const SpaceTimeGrid& g = res.config.grid;
    std::vector<double> mean(g.size()), sd(g.size());
    for (int i = 0; i < g.size(); ++i) {
        mean[i] = res.marginals.mean(i);
        sd[i] = std::sqrt(res.marginals.variance(i));
    }
    write_field_csv(dir + "/mean_grid.csv", g, mean);
    write_field_csv(dir + "/std_grid.csv", g, sd);
    write_field_csv(dir + "/u0_grid.csv", g, res.u0);

    // hyperparameter grid: one row per node
    {
        std::ofstream f(dir + "/theta_grid.csv");
        if (res.raw.contains("nodes") && !res.raw.at("nodes").empty()) {
            std::vector<std::string> names;
            for (const auto& [k, v] : res.raw.at("nodes")[0].at("theta").items())
                names.push_back(k);
            for (std::size_t i = 0; i < names.size(); ++i) f << names[i] << ',';
            f << "weight,log_post\n";
            for (const json& row : res.raw.at("nodes")) {
                for (const std::string& nm : names)
                    f << format_double(row.at("theta").at(nm).get<double>()) << ',';
                f << format_double(row.at("weight").get<double>()) << ','
                  << format_double(row.at("log_post").get<double>()) << '\n';
            }
        }
    }

    json axes;
    axes["t"] = {{"start", g.t0}, {"step", g.dt}, {"count", g.nt}};
    axes["x"] = {{"start", g.x0}, {"step", g.dx}, {"count", g.nx}};
    axes["layout"] = "rows are time slices, columns are space points";
    axes["files"] = {"mean_grid.csv", "std_grid.csv", "u0_grid.csv", "theta_grid.csv"};
    std::ofstream f(dir + "/axes.json");
    f << axes.dump(2) << '\n';
}

}  // namespace iinla::harness
