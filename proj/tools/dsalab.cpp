// Command-line front end: instance validation, experiment runs, rate reports,
// the scaled-martingale LIL tester, instance generation, and plot-data export.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "dsalab/harness.hpp"

namespace fs = std::filesystem;
using namespace dsalab;
using nlohmann::json;

namespace {

fs::path resolve_out(const std::string& dir) {
    fs::path p(dir);
    if (p.is_absolute()) return p;
    if (const char* root = std::getenv("DSALAB_OUT_ROOT")) return fs::path(root) / p;
    return p;
}

json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot read " + path);
    try {
        return json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::ParseError, path + ": " + e.what());
    }
}

// Accepts a run directory or a direct path to aggregate.csv.
std::pair<fs::path, fs::path> locate_aggregate(const std::string& arg) {
    fs::path p(arg);
    if (fs::is_directory(p)) return {p / "aggregate.csv", p / "metadata.json"};
    return {p, p.parent_path() / "metadata.json"};
}

std::pair<double, double> theory_from_metadata(const json& meta) {
    const auto& t = meta.at("resolved").at("theoretical_exponents");
    return {t[0].get<double>(), t[1].get<double>()};
}

harness::Provenance provenance_from_metadata(const json& meta) {
    return {meta.value("config_hash", "0"), meta.value("instance_hash", "0")};
}

int cmd_validate(const std::string& instance_path, const harness::ScheduleSpec& sched_spec) {
    harness::ExperimentConfig cfg;
    cfg.instance.kind = harness::InstanceSource::Kind::File;
    cfg.instance.path = instance_path;
    cfg.schedule_spec = sched_spec;
    auto built        = harness::build_experiment(cfg);

    std::cout << "instance " << instance_path << " (hash " << built.instance_hash << ")\n";
    try {
        auto w = spectral::validate_gossip(built.instance.mdp.gossip);
        std::cout << w.certificate().report();
        std::cout << "gossip contraction factor: " << spectral::gossip_contraction(w) << "\n";
    } catch (const Error& e) {
        std::cout << "gossip certification failed: " << e.what() << "\n";
    }
    std::cout << "lambda_min(A) = " << built.ground_truth.a_mat.lambda_min()
              << ", resolved schedule " << built.sched.describe() << "\n\n";
    std::cout << built.assumptions.text();
    return built.assumptions.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dsalab: distributed stochastic approximation laboratory"};
    app.require_subcommand(1);

    // --- validate ---
    auto* validate  = app.add_subcommand("validate", "check assumptions on an instance file");
    std::string validate_instance;
    std::string validate_sched_kind = "type1";
    double validate_alpha0 = 0.0, validate_c = 1.0, validate_gamma = 0.7, validate_eta = 0.0;
    validate->add_option("instance", validate_instance, "instance JSON file")->required();
    validate->add_option("--schedule", validate_sched_kind, "type1 | type_gamma");
    validate->add_option("--alpha0", validate_alpha0, "type1 coefficient (default 1/lambda_min)");
    validate->add_option("--c", validate_c, "type_gamma coefficient");
    validate->add_option("--gamma-exp", validate_gamma, "type_gamma exponent");
    validate->add_option("--eta", validate_eta, "type_gamma log exponent");

    // --- run ---
    auto* run = app.add_subcommand("run", "run a configured experiment");
    std::string run_config;
    std::string run_out;
    std::string run_seeds;
    std::size_t run_horizon = 0;
    bool run_force          = false;
    unsigned run_jobs       = 0;
    run->add_option("--config", run_config, "experiment config JSON")->required();
    run->add_option("--out", run_out, "output directory override");
    run->add_option("--seeds", run_seeds, "comma-separated seed list override");
    run->add_option("--horizon", run_horizon, "horizon override");
    run->add_flag("--force", run_force, "run even if assumption checks fail");
    run->add_option("--jobs", run_jobs, "worker threads (default: cores)");

    // --- rates ---
    auto* rates = app.add_subcommand("rates", "fitted vs theoretical rate report");
    std::string rates_path;
    std::string rates_out;
    rates->add_option("aggregate", rates_path, "run directory or aggregate.csv")->required();
    rates->add_option("--out", rates_out, "also write the report CSV here");

    // --- mlil ---
    auto* mlil = app.add_subcommand("mlil", "scaled martingale-difference LIL tester");
    std::string mlil_noise = "rademacher";
    double mlil_sigma      = 1.0;
    std::size_t mlil_horizon = 1000000, mlil_sup_from = 100000;
    std::size_t mlil_seeds = 20;
    double mlil_bound      = 0.0;
    mlil->add_option("--noise", mlil_noise, "rademacher | gaussian");
    mlil->add_option("--sigma", mlil_sigma, "noise scale");
    mlil->add_option("--horizon", mlil_horizon, "number of increments");
    mlil->add_option("--sup-from", mlil_sup_from, "first index eligible for the sup");
    mlil->add_option("--seeds", mlil_seeds, "number of independent seeds");
    mlil->add_option("--bound", mlil_bound, "report pass/fail against this sup bound");

    // --- gen-mdp ---
    auto* gen = app.add_subcommand("gen-mdp", "generate a random instance file");
    td::RandomMdpParams gen_params;
    std::string gen_out    = "instance.json";
    std::string gen_preset;
    std::uint64_t gen_seed = 0;
    gen->add_option("--states", gen_params.num_states);
    gen->add_option("--agents", gen_params.num_agents);
    gen->add_option("--actions", gen_params.actions_per_agent);
    gen->add_option("--feature-dim", gen_params.feature_dim);
    gen->add_option("--density", gen_params.density);
    gen->add_option("--reward-scale", gen_params.reward_scale);
    gen->add_flag("--shared-rewards", gen_params.shared_rewards);
    gen->add_option("--seed", gen_seed);
    gen->add_option("--preset", gen_preset, "two-state: the worked 2-state instance");
    gen->add_option("-o,--out", gen_out, "output path");

    // --- plot-data ---
    auto* plot = app.add_subcommand("plot-data", "emit plot-ready CSV for an aggregate");
    std::string plot_path;
    std::string plot_out = "plot.csv";
    plot->add_option("aggregate", plot_path, "run directory or aggregate.csv")->required();
    plot->add_option("-o,--out", plot_out, "output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*validate) {
            harness::ScheduleSpec spec;
            if (validate_sched_kind == "type1") {
                spec.kind = schedule::Kind::Type1;
                if (validate_alpha0 > 0.0)
                    spec.alpha0 = validate_alpha0;
                else
                    spec.alpha0_times_lambda_min = 1.0;
            } else if (validate_sched_kind == "type_gamma") {
                spec.kind      = schedule::Kind::TypeGamma;
                spec.c         = validate_c;
                spec.gamma_exp = validate_gamma;
                spec.eta       = validate_eta;
            } else {
                throw Error(ErrorCode::InvalidArgument,
                            "unknown schedule '" + validate_sched_kind + "'");
            }
            return cmd_validate(validate_instance, spec);
        }

        if (*run) {
            auto cfg = harness::config_from_json(load_json(run_config));
            if (!run_out.empty()) cfg.output_dir = run_out;
            if (run_horizon > 0) cfg.horizon = run_horizon;
            if (run_force) cfg.force = true;
            if (!run_seeds.empty()) {
                cfg.seeds.clear();
                std::stringstream ss(run_seeds);
                std::string tok;
                while (std::getline(ss, tok, ',')) cfg.seeds.push_back(std::stoull(tok));
            }
            cfg.output_dir = resolve_out(cfg.output_dir).string();
            auto out       = harness::run_experiment(cfg, run_jobs);
            std::cout << "wrote " << out.out_dir.string() << " (" << cfg.seeds.size()
                      << " seeds, horizon " << cfg.horizon << ")\n";
            if (!out.aggregate.excluded_seeds.empty()) {
                std::cout << "WARNING: diverged seeds excluded from aggregates:";
                for (auto s : out.aggregate.excluded_seeds) std::cout << ' ' << s;
                std::cout << "\n";
            }
            if (out.aggregate.agreement_fit)
                std::cout << "agreement slope " << out.aggregate.agreement_fit->slope
                          << ", disagreement slope "
                          << (out.aggregate.disagreement_fit
                                  ? out.aggregate.disagreement_fit->slope
                                  : std::numeric_limits<double>::quiet_NaN())
                          << "\n";
            return 0;
        }

        if (*rates) {
            auto [agg_path, meta_path] = locate_aggregate(rates_path);
            std::ifstream csv_in(agg_path);
            if (!csv_in) throw Error(ErrorCode::IoError, "cannot read " + agg_path.string());
            json meta   = load_json(meta_path.string());
            auto agg    = harness::aggregate_from_files(csv_in, meta);
            auto report = harness::rates_report(agg, theory_from_metadata(meta),
                                                provenance_from_metadata(meta));
            std::cout << report.text;
            if (!rates_out.empty()) {
                std::ofstream f(rates_out);
                f << report.csv;
            }
            return report.all_pass ? 0 : 1;
        }

        if (*mlil) {
            bool gaussian = mlil_noise == "gaussian";
            if (!gaussian && mlil_noise != "rademacher")
                throw Error(ErrorCode::InvalidArgument, "unknown noise '" + mlil_noise + "'");
            std::size_t within = 0;
            for (std::size_t seed = 0; seed < mlil_seeds; ++seed) {
                Rng rng(seed);
                auto noise = [&](std::size_t) {
                    return gaussian ? mlil_sigma * rng.gaussian()
                                    : (rng.uniform01() < 0.5 ? -mlil_sigma : mlil_sigma);
                };
                auto weights = [](std::size_t) { return std::pair<double, double>{1.0, 1.0}; };
                auto res = decomp::martingale_lil_test(noise, weights, mlil_horizon, mlil_sup_from);
                bool ok  = mlil_bound <= 0.0 || res.sup_normalized <= mlil_bound;
                within += ok ? 1 : 0;
                std::cout << "seed " << seed << ": sup = " << res.sup_normalized << " at n = "
                          << res.argmax_n << (mlil_bound > 0.0 ? (ok ? " (within)" : " (exceeds)") : "")
                          << "\n";
            }
            if (mlil_bound > 0.0)
                std::cout << within << "/" << mlil_seeds << " seeds within bound " << mlil_bound
                          << "\n";
            return 0;
        }

        if (*gen) {
            td::TdInstance inst = gen_preset == "two-state"
                                      ? td::two_state_instance()
                                      : (gen_params.seed = gen_seed, td::random_mdp(gen_params));
            json doc            = harness::instance_to_json(inst);
            std::ofstream f(gen_out);
            if (!f) throw Error(ErrorCode::IoError, "cannot write " + gen_out);
            f << doc.dump(2) << "\n";
            std::cout << "wrote " << gen_out << " (hash " << hex64(fnv1a(doc.dump())) << ")\n";
            return 0;
        }

        if (*plot) {
            auto [agg_path, meta_path] = locate_aggregate(plot_path);
            std::ifstream csv_in(agg_path);
            if (!csv_in) throw Error(ErrorCode::IoError, "cannot read " + agg_path.string());
            json meta = load_json(meta_path.string());
            auto agg  = harness::aggregate_from_files(csv_in, meta);
            std::ofstream f(plot_out);
            if (!f) throw Error(ErrorCode::IoError, "cannot write " + plot_out);
            f << harness::plot_data_csv(agg, theory_from_metadata(meta),
                                        provenance_from_metadata(meta));
            std::cout << "wrote " << plot_out << "\n";
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == ErrorCode::ParseError || e.code() == ErrorCode::InvalidArgument ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
