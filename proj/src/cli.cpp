#include "relax/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "relax/dsd.hpp"
#include "relax/io.hpp"
#include "relax/spectral.hpp"
#include "relax/trainer.hpp"

namespace relax::cli {

namespace {

namespace fs = std::filesystem;

// RELAX_SEED overrides the configured run seed (train.seed for `train`,
// dict.seed for `fit-dict`).
bool seed_override(std::uint64_t* seed) {
    const char* env = std::getenv("RELAX_SEED");
    if (!env || !*env) return false;
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0') throw ConfigError("RELAX_SEED must be an unsigned integer");
    *seed = v;
    return true;
}

void run_train(const std::string& config_path, const std::string& out_dir) {
    RunConfig cfg = load_config(config_path);
    if (seed_override(&cfg.train.seed)) {
        // the override rebases the whole run, dictionary fit included
        cfg.train.dict.seed = cfg.train.seed;
    }

    fs::create_directories(out_dir);
    atomic_write((fs::path(out_dir) / "config.resolved").string(), resolve_config_text(cfg));

    const TrainResult result = train(cfg.task, cfg.train);
    save_metrics_csv(result.trace, (fs::path(out_dir) / "metrics.csv").string());
    save_policy(result.policy, (fs::path(out_dir) / "policy.txt").string());
    if (result.dictionary.has_value()) {
        save_dictionary(*result.dictionary, (fs::path(out_dir) / "dictionary.txt").string());
    }
}

void run_analyze(const std::string& dump_path, const std::string& dict_path,
                 double filter_eps, bool has_filter, const std::string& out_dir) {
    const TrajectoryDump dump = load_dump(dump_path);
    const KoopmanDictionary dict = load_dictionary(dict_path);

    fs::create_directories(out_dir);
    std::ostringstream dsd_csv;
    std::ostringstream eig_csv;
    dsd_csv << "trajectory,dsd,retained,eigengap,filtered\n";
    eig_csv << "trajectory,k,real,imag,magnitude,residual\n";

    for (std::size_t idx = 0; idx < dump.trajectories.size(); ++idx) {
        const HiddenTrajectory& traj = dump.trajectories[idx];
        if (traj.steps() < 3) {
            throw Error("trajectory " + std::to_string(idx) +
                        " is too short to analyze (needs T >= 3)");
        }
        DsdOptions opts;
        if (has_filter) opts.filter_eps = filter_eps;
        const DsdReport report = dsd(traj, dict, opts);
        dsd_csv << idx << ',' << format_double(report.dsd) << ',' << report.retained << ','
                << format_double(report.eigengap) << ',' << (report.filtered ? 1 : 0) << '\n';

        const SnapshotPair snap = build_snapshots(traj, dict);
        KoopmanModel model = estimate_koopman(snap);
        spectrum(model);
        compute_residuals(model, snap);
        for (Eigen::Index k = 0; k < model.eigenvalues.size(); ++k) {
            eig_csv << idx << ',' << k << ',' << format_double(model.eigenvalues(k).real())
                    << ',' << format_double(model.eigenvalues(k).imag()) << ','
                    << format_double(std::abs(model.eigenvalues(k))) << ','
                    << format_double(model.residuals(k)) << '\n';
        }
    }
    atomic_write((fs::path(out_dir) / "dsd.csv").string(), dsd_csv.str());
    atomic_write((fs::path(out_dir) / "eigenvalues.csv").string(), eig_csv.str());
}

void run_fit_curve(const std::string& metrics_path, const std::string& out_path) {
    const auto points = load_entropy_reward_points(metrics_path);
    const CurveFit fit = fit_entropy_reward(points);
    nlohmann::json j;
    j["a"] = fit.a;
    j["b"] = fit.b;
    j["rmse"] = fit.rmse;
    j["n_points"] = fit.n_points;
    atomic_write(out_path, j.dump(2) + "\n");
}

void run_fit_dict(const std::string& dump_path, const std::string& config_path,
                  const std::string& out_path) {
    const TrajectoryDump dump = load_dump(dump_path);
    RunConfig cfg = load_config(config_path);
    seed_override(&cfg.train.dict.seed);
    const DictFitResult fit = fit_dictionary(dump.trajectories, cfg.train.dict);
    save_dictionary(fit.dictionary, out_path);
    std::cout << "initial loss " << format_double(fit.loss_trace.front()) << ", final loss "
              << format_double(fit.loss_trace.back()) << " after "
              << (fit.loss_trace.size() - 1) << " steps\n";
}

} // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{
        "Koopman latent-dynamics toolkit: spectral dispersion analysis and an "
        "RLVR trainer with latent-exploration regularization.\n"
        "Environment: RELAX_SEED overrides the configured run seed.",
        "relax"};
    app.require_subcommand(1);

    std::string config_path, out_path, dump_path, dict_path, metrics_path;
    double filter_eps = 0.0;

    CLI::App* cmd_train = app.add_subcommand("train", "run the trainer from a config file");
    cmd_train->add_option("--config", config_path, "config file")->required();
    cmd_train->add_option("--out", out_path, "output directory")->required();

    CLI::App* cmd_analyze =
        app.add_subcommand("analyze", "per-trajectory dispersion and eigenvalue tables");
    cmd_analyze->add_option("--dump", dump_path, "trajectory dump")->required();
    cmd_analyze->add_option("--dict", dict_path, "dictionary file")->required();
    CLI::Option* filter_opt =
        cmd_analyze->add_option("--filter", filter_eps, "residual filter threshold");
    cmd_analyze->add_option("--out", out_path, "output directory")->required();

    CLI::App* cmd_curve =
        app.add_subcommand("fit-curve", "fit reward = -a*exp(entropy) + b to a metrics CSV");
    cmd_curve->add_option("--metrics", metrics_path, "metrics.csv from train")->required();
    cmd_curve->add_option("--out", out_path, "output JSON file")->required();

    CLI::App* cmd_dict =
        app.add_subcommand("fit-dict", "fit a dictionary on a trajectory dump");
    cmd_dict->add_option("--dump", dump_path, "trajectory dump")->required();
    cmd_dict->add_option("--config", config_path, "config file (dict.* keys)")->required();
    cmd_dict->add_option("--out", out_path, "output dictionary file")->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) { // --help
            app.exit(e);
            return 0;
        }
        std::cerr << e.what() << '\n';
        return 2;
    }

    try {
        if (cmd_train->parsed()) {
            run_train(config_path, out_path);
        } else if (cmd_analyze->parsed()) {
            run_analyze(dump_path, dict_path, filter_eps, filter_opt->count() > 0, out_path);
        } else if (cmd_curve->parsed()) {
            run_fit_curve(metrics_path, out_path);
        } else if (cmd_dict->parsed()) {
            run_fit_dict(dump_path, config_path, out_path);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

} // namespace relax::cli
