#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "iinla/harness.hpp"

using namespace iinla;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string preset;
    std::int64_t seed = -1;
    std::string out;
};

harness::ExperimentConfig resolve_config(const CommonArgs& a) {
    harness::json j = harness::json::object();
    if (!a.config_path.empty()) {
        std::ifstream f(a.config_path);
        if (!f) throw harness::ConfigError("cannot open config file " + a.config_path);
        try {
            f >> j;
        } catch (const harness::json::exception& e) {
            throw harness::ConfigError(std::string("config parse error in ") + a.config_path +
                                       ": " + e.what());
        }
    }
    if (!a.preset.empty()) j["preset"] = a.preset;
    if (!j.contains("preset") && !j.contains("model"))
        throw harness::ConfigError("provide --preset or a config file naming a model");
    harness::ExperimentConfig cfg = harness::config_from_json(j);
    if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_path, "experiment config JSON");
    cmd->add_option("--preset", a.preset, "built-in preset: pendulum|burgers|allen-cahn|kdv");
    cmd->add_option("--seed", a.seed, "random seed (overrides config)");
    cmd->add_option("--out", a.out, "output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"data assimilation by iterated linearisation and nested Laplace quadrature"};
    app.require_subcommand(1);

    CommonArgs sim_args;
    CLI::App* sim = app.add_subcommand("simulate", "generate a ground-truth dataset");
    add_common(sim, sim_args);

    CommonArgs asm_args;
    std::string data_dir, update_rule;
    double gamma = -1.0, delta = -1.0;
    int max_iters = -1;
    bool known_theta = false;
    CLI::App* assim = app.add_subcommand("assimilate", "run the assimilation loop");
    add_common(assim, asm_args);
    assim->add_option("--data", data_dir, "dataset directory (from simulate)")->required();
    assim->add_option("--update-rule", update_rule, "type1|type2");
    assim->add_option("--gamma", gamma, "damping coefficient");
    assim->add_option("--delta", delta, "node acceptance threshold");
    assim->add_option("--max-iters", max_iters, "outer iteration budget");
    assim->add_flag("--known-theta", known_theta, "assimilate at the configured truth parameters");

    CommonArgs eval_args;
    std::vector<std::string> result_dirs;
    std::string eval_data, smc_file;
    bool with_smc = false;
    CLI::App* eval = app.add_subcommand("evaluate", "score results against the ground truth");
    add_common(eval, eval_args);
    eval->add_option("--result", result_dirs, "result directory (repeatable)")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_flag("--with-smc", with_smc, "generate the reduced-budget SMC reference");
    eval->add_option("--smc-file", smc_file, "reuse previously written SMC samples");

    CommonArgs plot_args;
    std::string plot_result;
    CLI::App* plot = app.add_subcommand("plotdata", "export grids for external plotting");
    plot->add_option("--result", plot_result, "result directory")->required();
    plot->add_option("--out", plot_args.out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) {
            const harness::ExperimentConfig cfg = resolve_config(sim_args);
            const harness::Dataset data = harness::generate_dataset(cfg);
            harness::write_dataset(sim_args.out, cfg, data);
            std::printf("wrote dataset with %d observations to %s\n", data.obs.size(),
                        sim_args.out.c_str());
            return 0;
        }

        if (assim->parsed()) {
            harness::ExperimentConfig cfg = resolve_config(asm_args);
            if (!update_rule.empty())
                cfg.iter.rule = update_rule == "type1" ? UpdateRule::TypeI : UpdateRule::TypeII;
            if (gamma > 0.0) cfg.iter.gamma = gamma;
            if (delta > 0.0) cfg.iter.delta = delta;
            if (max_iters > 0) cfg.iter.max_iters = max_iters;
            if (known_theta) cfg.known_theta = true;

            const harness::Dataset data = harness::read_dataset(data_dir, cfg);
            const harness::RunOutput run = harness::run_assimilation(cfg, data);
            harness::write_result(asm_args.out, cfg, data_dir, run);
            std::printf("%s after %d iterations (%.1f s), results in %s\n",
                        run.result.converged ? "converged" : "iteration budget reached",
                        run.result.iterations, run.result.wall_seconds, asm_args.out.c_str());
            return run.result.converged ? 0 : 3;
        }

        if (eval->parsed()) {
            const harness::ExperimentConfig cfg = resolve_config(eval_args);
            const harness::Dataset data = harness::read_dataset(eval_data, cfg);

            std::filesystem::create_directories(eval_args.out);
            std::vector<std::vector<double>> smc;
            const std::vector<std::vector<double>>* smc_ptr = nullptr;
            if (!smc_file.empty()) {
                smc = harness::read_samples_csv(smc_file);
                smc_ptr = &smc;
            } else if (with_smc) {
                smc = harness::smc_reference_samples(cfg, data);
                harness::write_samples_csv(eval_args.out + "/smc_samples.csv", smc);
                smc_ptr = &smc;
            }

            std::vector<harness::EvalReport> reports;
            for (const std::string& dir : result_dirs) {
                const harness::LoadedResult res = harness::read_result(dir);
                reports.push_back(
                    harness::evaluate_result(res, data.truth_field, smc_ptr, 300,
                                             cfg.seed * 31337ULL + 5));
            }

            harness::json out;
            out["per_result"] = harness::json::array();
            double r1 = 0, r2 = 0, m1 = 0, m2 = 0, d1 = 0, d2 = 0;
            for (std::size_t i = 0; i < reports.size(); ++i) {
                const harness::EvalReport& r = reports[i];
                harness::json row{{"result", result_dirs[i]}, {"rmse", r.rmse}, {"mnll", r.mnll}};
                if (r.has_mmd) row["mmd"] = r.mmd;
                out["per_result"].push_back(row);
                r1 += r.rmse;
                r2 += r.rmse * r.rmse;
                m1 += r.mnll;
                m2 += r.mnll * r.mnll;
                d1 += r.mmd;
                d2 += r.mmd * r.mmd;
                std::printf("%-40s rmse %.4f  mnll %.4f", result_dirs[i].c_str(), r.rmse,
                            r.mnll);
                if (r.has_mmd) std::printf("  mmd %.4f", r.mmd);
                std::printf("\n");
            }
            const double n = static_cast<double>(reports.size());
            auto mean_se = [&](double s, double s2) {
                const double mean = s / n;
                const double var = std::max(0.0, s2 / n - mean * mean);
                return std::make_pair(mean, n > 1 ? std::sqrt(var / (n - 1)) : 0.0);
            };
            const auto [rm, rs] = mean_se(r1, r2);
            const auto [mm, ms] = mean_se(m1, m2);
            out["aggregate"] = {{"rmse_mean", rm},   {"rmse_se", rs}, {"mnll_mean", mm},
                                {"mnll_se", ms},     {"count", n}};
            if (reports.size() > 0 && reports[0].has_mmd) {
                const auto [dm, ds] = mean_se(d1, d2);
                out["aggregate"]["mmd_mean"] = dm;
                out["aggregate"]["mmd_se"] = ds;
            }
            if (n > 1)
                std::printf("aggregate: rmse %.4f +/- %.4f, mnll %.4f +/- %.4f\n", rm, rs, mm,
                            ms);
            std::ofstream f(eval_args.out + "/metrics.json");
            f << out.dump(2) << '\n';
            return 0;
        }

        if (plot->parsed()) {
            const harness::LoadedResult res = harness::read_result(plot_result);
            harness::write_plotdata(plot_args.out, res);
            std::printf("wrote plot grids to %s\n", plot_args.out.c_str());
            return 0;
        }
    } catch (const harness::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 4;
    }
    return 0;
}
