#pragma once

#include <string>
#include <vector>

#include "relax/dictionary.hpp"
#include "relax/policy.hpp"
#include "relax/trainer.hpp"
#include "relax/trajectory.hpp"

namespace relax {

// ---- trajectory dumps -------------------------------------------------------
//
// Text format, value-exact round trip:
//   line 1: KDT1
//   line 2: <n_traj> <d>
//   per trajectory: a line with T, then T lines of d floats.

struct TrajectoryDump {
    int dim = 0;
    std::vector<HiddenTrajectory> trajectories;
    std::string source_tag;
};

TrajectoryDump load_dump(const std::string& path);
void save_dump(const TrajectoryDump& dump, const std::string& path);

// ---- dictionary / policy files ---------------------------------------------

// Header line "m d", then m rows of d floats. `frozen` on load.
KoopmanDictionary load_dictionary(const std::string& path);
void save_dictionary(const KoopmanDictionary& dict, const std::string& path);

RecurrentPolicy load_policy(const std::string& path);
void save_policy(const RecurrentPolicy& policy, const std::string& path);

// ---- entropy-reward curve ----------------------------------------------------

struct CurveFit {
    double a = 0.0;
    double b = 0.0;
    double rmse = 0.0;
    int n_points = 0;
};

// Least squares for reward = -a * exp(entropy) + b, linear in (a, b). Throws
// DegenerateDesign when all exp(entropy) values coincide within 1e-12.
CurveFit fit_entropy_reward(const std::vector<std::pair<double, double>>& points);

// ---- run configuration -------------------------------------------------------

// Flat "key = value" text; '#' starts a comment, unknown keys are rejected.
struct RunConfig {
    TaskSpec task;
    TrainConfig train;
};

RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);
// Every key materialized; parsing the result reproduces the same RunConfig.
std::string resolve_config_text(const RunConfig& cfg);

// ---- metrics -----------------------------------------------------------------

extern const char* const kMetricsHeader;

std::string metrics_csv(const std::vector<StepMetrics>& trace);
void save_metrics_csv(const std::vector<StepMetrics>& trace, const std::string& path);

// Pulls (mean_entropy, mean_reward) pairs out of a metrics CSV.
std::vector<std::pair<double, double>> load_entropy_reward_points(const std::string& path);

// 17-significant-digit float formatting shared by every text format above.
std::string format_double(double v);

// Write-temp-then-rename.
void atomic_write(const std::string& path, const std::string& contents);

} // namespace relax
