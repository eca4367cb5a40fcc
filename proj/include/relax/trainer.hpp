#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "relax/dictionary.hpp"
#include "relax/policy.hpp"

namespace relax {

enum class GradMode { Pathwise, ScoreFunction };
enum class RatioKind { Token, Sequence };
enum class KlSign { Penalty, Literal };

// Gate threshold for the adaptive KL term: either a fixed value or a
// nearest-rank percentile of the current batch's dispersion scores.
struct XiSpec {
    enum class Kind { Fixed, Percentile };
    Kind kind = Kind::Percentile;
    double value = 90.0;

    static XiSpec fixed(double v) { return {Kind::Fixed, v}; }
    static XiSpec percentile(double p) { return {Kind::Percentile, p}; }
};

struct TrainConfig {
    double alpha = 0.1;   // latent-exploration coefficient
    double beta = 0.01;   // KL coefficient
    XiSpec xi = {};       // p90 of the batch by default
    double clip_eps = 0.2;
    int group_size = 16;  // R
    int batch_prompts = 16; // B
    double lr = 1e-3;
    int steps = 200;
    double temperature = 1.0;
    int koopman_dim = 8;  // m
    double rcond = -1.0;  // < 0: default_rcond
    double gap_tol = 1e-6;
    GradMode grad_mode = GradMode::Pathwise;
    RatioKind ratio = RatioKind::Token;
    KlSign kl_sign = KlSign::Penalty;
    int minibatch = 0;    // prompts per update; 0 = single update on the batch
    int max_len = 16;     // L_max
    int hidden_dim = 32;
    int embed_dim = 16;
    std::uint64_t seed = 0;
    DictTrainConfig dict; // dictionary fit at step 0

    void validate() const;
};

struct StepMetrics {
    int step = 0;
    double mean_reward = 0.0;
    double mean_dsd = 0.0;
    double mean_entropy = 0.0;
    double mean_response_length = 0.0;
    double grad_norm = 0.0;        // pre-clip global L2 norm
    double clipped_fraction = 0.0; // fraction of tokens hitting the ratio clip
    int kl_set_size = 0;
    double loss_surrogate = 0.0;
    double loss_xp = 0.0; // batch-mean latent_exploration_loss value
    double loss_kl = 0.0; // sum of gated KL values
    double xi_resolved = 0.0; // threshold applied this step (not in the CSV)
};

// (r - mean) / population std; all zeros when the group is uninformative
// (std below 1e-8).
Eigen::VectorXd group_advantages(const Eigen::VectorXd& rewards);

// Clipped importance-ratio surrogate for one group. Token granularity
// averages per-token clipped terms over positions; Sequence uses one log-space
// sequence ratio per rollout. Optionally reports the clipped-token count.
double grpo_surrogate(const RecurrentPolicy& policy, const GroupRollout& group,
                      double clip_eps, double temperature = 1.0,
                      RatioKind ratio = RatioKind::Token,
                      long* clipped_tokens = nullptr, long* total_tokens = nullptr);

// log((1/R) sum_i exp(-max(adv_i, 0) * dsd_i)), evaluated with a max-shifted
// log-sum-exp.
double latent_exploration_loss(const Eigen::VectorXd& dsd_scores,
                               const Eigen::VectorXd& advantages);

// Indices with dsd > xi; percentile specs resolve xi on the given scores
// (nearest rank). The resolved threshold is reported through resolved_xi.
std::vector<int> adaptive_kl_set(const Eigen::VectorXd& dsd_scores, const XiSpec& xi,
                                 double* resolved_xi = nullptr);

struct ObjectiveEval {
    double objective = 0.0;
    StepMetrics metrics;
};

// Gradient with respect to every policy tensor.
struct PolicyGradient {
    Eigen::MatrixXd embed, W_h, W_in, W_out;
    Eigen::VectorXd b_h, b_out;

    static PolicyGradient zeros_like(const RecurrentPolicy& p);
    double squared_norm() const;
    void scale(double s);
};

// Rescales the gradient so its global L2 norm is at most max_norm; returns
// the pre-clip norm.
double clip_global_norm(PolicyGradient& grad, double max_norm);

// Per-trajectory route for the dispersion regularizer's gradient: pathwise
// through the stored state gradient, or the score-function surrogate when
// not pathwise.
struct DsdPathInfo {
    bool pathwise = false;
    Eigen::MatrixXd states_grad; // T x d, set when pathwise
};

// Full objective for one batch of groups: mean group surrogate, the
// dispersion regularizer scaled by alpha, and the gated KL term scaled by
// beta. The returned value is the quantity the trainer ascends. Requires
// advantages and dsd_scores to be populated.
ObjectiveEval relax_objective(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                              const std::vector<GroupRollout>& batch,
                              const TrainConfig& cfg);

// Same evaluation, also accumulating the ascent gradient. dsd_paths is
// aligned with the batch (group-major); a null entry set means every
// trajectory takes the score-function route.
ObjectiveEval relax_objective(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                              const std::vector<GroupRollout>& batch,
                              const TrainConfig& cfg,
                              const std::vector<std::vector<DsdPathInfo>>* dsd_paths,
                              PolicyGradient* grad);

struct TrainResult {
    RecurrentPolicy policy;
    std::optional<KoopmanDictionary> dictionary; // frozen; absent when steps == 0
    std::vector<StepMetrics> trace;
};

// Full training loop: sample prompt groups, score rewards, fit the dictionary
// once at step 0, attach advantages and dispersion scores, ascend the
// objective under global gradient-norm clipping at 1.0.
TrainResult train(const TaskSpec& task, const TrainConfig& cfg);

} // namespace relax
