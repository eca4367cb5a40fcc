#include "relax/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "relax/dsd.hpp"
#include "relax/rng.hpp"

namespace relax {

void TrainConfig::validate() const {
    if (alpha < 0.0) throw ConfigError("alpha must be nonnegative");
    if (beta < 0.0) throw ConfigError("beta must be nonnegative");
    if (clip_eps <= 0.0 || clip_eps >= 1.0) throw ConfigError("clip_eps must lie in (0, 1)");
    if (group_size < 2) throw ConfigError("group_size must be at least 2");
    if (batch_prompts < 1) throw ConfigError("batch_prompts must be at least 1");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (steps < 0) throw ConfigError("steps must be nonnegative");
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (koopman_dim < 1) throw ConfigError("koopman_dim must be positive");
    if (max_len < 1) throw ConfigError("max_len must be at least 1");
    if (hidden_dim < 1 || embed_dim < 1) throw ConfigError("policy dims must be positive");
    if (minibatch < 0) throw ConfigError("minibatch must be nonnegative");
    if (xi.kind == XiSpec::Kind::Percentile && (xi.value <= 0.0 || xi.value > 100.0)) {
        throw ConfigError("xi percentile must lie in (0, 100]");
    }
    dict.validate();
}

Eigen::VectorXd group_advantages(const Eigen::VectorXd& rewards) {
    const Eigen::Index n = rewards.size();
    if (n < 2) throw Error("advantage normalization needs a group of at least 2");
    const double mean = rewards.mean();
    const double var = (rewards.array() - mean).square().sum() / static_cast<double>(n);
    const double std = std::sqrt(var);
    if (std < 1e-8) return Eigen::VectorXd::Zero(n);
    return (rewards.array() - mean) / std;
}

namespace {

// One PPO-style clipped term. Gradient flows iff the min selects the raw
// branch, which is exactly when the clip is not binding against the advantage
// sign.
double clipped_term(double rho, double adv, double eps, bool* clipped) {
    const double lo = 1.0 - eps;
    const double hi = 1.0 + eps;
    const double raw = rho * adv;
    const double clamped = std::clamp(rho, lo, hi) * adv;
    const double value = std::min(raw, clamped);
    if (clipped) *clipped = clamped < raw;
    return value;
}

double safe_exp(double x) { return std::exp(std::clamp(x, -50.0, 50.0)); }

} // namespace

double grpo_surrogate(const RecurrentPolicy& policy, const GroupRollout& group,
                      double clip_eps, double temperature, RatioKind ratio,
                      long* clipped_tokens, long* total_tokens) {
    if (group.advantages.size() != static_cast<Eigen::Index>(group.rollouts.size())) {
        throw Error("advantages are not populated for this group");
    }
    if (clipped_tokens) *clipped_tokens = 0;
    if (total_tokens) *total_tokens = 0;

    double total = 0.0;
    for (std::size_t i = 0; i < group.rollouts.size(); ++i) {
        const Rollout& roll = group.rollouts[i];
        const double adv = group.advantages(static_cast<Eigen::Index>(i));
        if (roll.response.empty()) continue;

        // Replay the response under the current policy to get fresh logprobs.
        Eigen::VectorXd h = policy.run_prompt(roll.prompt);
        std::vector<double> logp(roll.response.size());
        for (std::size_t t = 0; t < roll.response.size(); ++t) {
            const Eigen::VectorXd z = policy.logits(h) / temperature;
            const double lse = std::log((z.array() - z.maxCoeff()).exp().sum()) + z.maxCoeff();
            logp[t] = z(roll.response[t]) - lse;
            h = policy.step(h, roll.response[t]);
        }

        if (total_tokens) *total_tokens += static_cast<long>(roll.response.size());
        if (ratio == RatioKind::Sequence) {
            double log_ratio = 0.0;
            for (std::size_t t = 0; t < roll.response.size(); ++t) {
                log_ratio += logp[t] - roll.logprobs_old[t];
            }
            bool clipped = false;
            total += clipped_term(safe_exp(log_ratio), adv, clip_eps, &clipped);
            if (clipped && clipped_tokens) {
                *clipped_tokens += static_cast<long>(roll.response.size());
            }
        } else {
            double acc = 0.0;
            for (std::size_t t = 0; t < roll.response.size(); ++t) {
                bool clipped = false;
                acc += clipped_term(safe_exp(logp[t] - roll.logprobs_old[t]), adv,
                                    clip_eps, &clipped);
                if (clipped && clipped_tokens) ++*clipped_tokens;
            }
            total += acc / static_cast<double>(roll.response.size());
        }
    }
    return total / static_cast<double>(group.rollouts.size());
}

double latent_exploration_loss(const Eigen::VectorXd& dsd_scores,
                               const Eigen::VectorXd& advantages) {
    if (dsd_scores.size() != advantages.size()) {
        throw DimensionMismatch("dispersion scores and advantages differ in length");
    }
    if (dsd_scores.size() == 0) throw Error("empty group");
    const Eigen::Index n = dsd_scores.size();
    Eigen::VectorXd exponent(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (dsd_scores(i) < 0.0) throw Error("dispersion scores must be nonnegative");
        exponent(i) = -std::max(advantages(i), 0.0) * dsd_scores(i);
    }
    const double shift = exponent.maxCoeff();
    const double mean = (exponent.array() - shift).exp().sum() / static_cast<double>(n);
    return shift + std::log(mean);
}

std::vector<int> adaptive_kl_set(const Eigen::VectorXd& dsd_scores, const XiSpec& xi,
                                 double* resolved_xi) {
    double threshold = xi.value;
    if (xi.kind == XiSpec::Kind::Percentile) {
        if (dsd_scores.size() == 0) throw Error("cannot take a percentile of no scores");
        std::vector<double> sorted(dsd_scores.data(), dsd_scores.data() + dsd_scores.size());
        std::sort(sorted.begin(), sorted.end());
        // nearest-rank: ceil(p/100 * n)
        const auto n = static_cast<double>(sorted.size());
        auto rank = static_cast<std::size_t>(std::ceil(xi.value / 100.0 * n));
        rank = std::clamp<std::size_t>(rank, 1, sorted.size());
        threshold = sorted[rank - 1];
    }
    if (resolved_xi) *resolved_xi = threshold;
    std::vector<int> indices;
    for (Eigen::Index i = 0; i < dsd_scores.size(); ++i) {
        if (dsd_scores(i) > threshold) indices.push_back(static_cast<int>(i));
    }
    return indices;
}

PolicyGradient PolicyGradient::zeros_like(const RecurrentPolicy& p) {
    PolicyGradient g;
    g.embed = Eigen::MatrixXd::Zero(p.embed.rows(), p.embed.cols());
    g.W_h = Eigen::MatrixXd::Zero(p.W_h.rows(), p.W_h.cols());
    g.W_in = Eigen::MatrixXd::Zero(p.W_in.rows(), p.W_in.cols());
    g.W_out = Eigen::MatrixXd::Zero(p.W_out.rows(), p.W_out.cols());
    g.b_h = Eigen::VectorXd::Zero(p.b_h.size());
    g.b_out = Eigen::VectorXd::Zero(p.b_out.size());
    return g;
}

double PolicyGradient::squared_norm() const {
    return embed.squaredNorm() + W_h.squaredNorm() + W_in.squaredNorm() +
           W_out.squaredNorm() + b_h.squaredNorm() + b_out.squaredNorm();
}

void PolicyGradient::scale(double s) {
    embed *= s;
    W_h *= s;
    W_in *= s;
    W_out *= s;
    b_h *= s;
    b_out *= s;
}

double clip_global_norm(PolicyGradient& grad, double max_norm) {
    const double norm = std::sqrt(grad.squared_norm());
    if (norm > max_norm && norm > 0.0) grad.scale(max_norm / norm);
    return norm;
}

// ---------------------------------------------------------------------------
// objective + hand-rolled gradient
// ---------------------------------------------------------------------------

namespace {

struct SoftmaxDist {
    Eigen::VectorXd probs;
    Eigen::VectorXd logprobs;
};

SoftmaxDist softmax_dist(const Eigen::VectorXd& logits, double temperature) {
    Eigen::VectorXd z = logits / temperature;
    const double zmax = z.maxCoeff();
    Eigen::VectorXd shifted = z.array() - zmax;
    Eigen::VectorXd ex = shifted.array().exp();
    const double total = ex.sum();
    SoftmaxDist out;
    out.probs = ex / total;
    out.logprobs = shifted.array() - std::log(total);
    return out;
}

// Forward replay of one rollout under the live policy.
struct RolloutPass {
    std::vector<Eigen::VectorXd> prompt_states;
    std::vector<Eigen::VectorXd> resp_states;
    std::vector<SoftmaxDist> dists; // next-token distribution at each position
    std::vector<double> logp;       // log pi(o_t)
    double entropy_mean = 0.0;
};

RolloutPass forward_rollout(const RecurrentPolicy& policy, const Rollout& roll,
                            double temperature) {
    RolloutPass pass;
    pass.prompt_states.reserve(roll.prompt.size());
    Eigen::VectorXd h = Eigen::VectorXd::Zero(policy.hidden_dim());
    for (int token : roll.prompt) {
        h = policy.step(h, token);
        pass.prompt_states.push_back(h);
    }
    const std::size_t T = roll.response.size();
    pass.resp_states.reserve(T);
    pass.dists.reserve(T);
    pass.logp.reserve(T);
    double entropy = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        SoftmaxDist dist = softmax_dist(policy.logits(h), temperature);
        entropy -= (dist.probs.array() * dist.logprobs.array()).sum();
        pass.logp.push_back(dist.logprobs(roll.response[t]));
        pass.dists.push_back(std::move(dist));
        h = policy.step(h, roll.response[t]);
        pass.resp_states.push_back(h);
    }
    pass.entropy_mean = T > 0 ? entropy / static_cast<double>(T) : 0.0;
    return pass;
}

// Backpropagates per-position logit gradients (and optional direct state
// gradients) through the shared recurrence, prompt included.
void backward_rollout(const RecurrentPolicy& policy, const Rollout& roll,
                      const RolloutPass& pass,
                      const std::vector<Eigen::VectorXd>& dlogits,
                      const Eigen::MatrixXd* dstates, PolicyGradient& grad) {
    const int T = static_cast<int>(roll.response.size());
    const int P = static_cast<int>(roll.prompt.size());
    Eigen::VectorXd carry = Eigen::VectorXd::Zero(policy.hidden_dim());

    auto context = [&](int t) -> const Eigen::VectorXd& {
        return t > 0 ? pass.resp_states[t - 1] : pass.prompt_states[P - 1];
    };

    for (int t = T - 1; t >= 0; --t) {
        Eigen::VectorXd dh = carry;
        if (dstates) dh += dstates->row(t).transpose();
        const Eigen::VectorXd& h_t = pass.resp_states[t];
        const Eigen::VectorXd delta = dh.array() * (1.0 - h_t.array().square());
        const int token = roll.response[t];
        grad.W_h.noalias() += delta * context(t).transpose();
        grad.W_in.noalias() += delta * policy.embed.row(token);
        grad.b_h += delta;
        grad.embed.row(token) += (policy.W_in.transpose() * delta).transpose();
        carry.noalias() = policy.W_h.transpose() * delta;
        // position t's logits read the context state
        if (dlogits[t].size() > 0) {
            grad.W_out.noalias() += dlogits[t] * context(t).transpose();
            grad.b_out += dlogits[t];
            carry.noalias() += policy.W_out.transpose() * dlogits[t];
        }
    }
    for (int j = P - 1; j >= 0; --j) {
        const Eigen::VectorXd& h_j = pass.prompt_states[j];
        const Eigen::VectorXd delta = carry.array() * (1.0 - h_j.array().square());
        const int token = roll.prompt[j];
        const Eigen::VectorXd prev =
            j > 0 ? pass.prompt_states[j - 1] : Eigen::VectorXd::Zero(policy.hidden_dim());
        grad.W_h.noalias() += delta * prev.transpose();
        grad.W_in.noalias() += delta * policy.embed.row(token);
        grad.b_h += delta;
        grad.embed.row(token) += (policy.W_in.transpose() * delta).transpose();
        carry.noalias() = policy.W_h.transpose() * delta;
    }
}

struct StepEval {
    double objective = 0.0;
    StepMetrics metrics;
};

// Value and (optionally) gradient of the full objective on one update batch.
// `dsd_grads`, when present, is aligned with the batch (group-major) and
// selects pathwise vs score-function handling per trajectory.
StepEval evaluate_objective(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                            const std::vector<GroupRollout>& batch, const TrainConfig& cfg,
                            const std::vector<std::vector<DsdPathInfo>>* dsd_grads,
                            PolicyGradient* grad) {
    if (batch.empty()) throw Error("objective needs at least one group");
    const auto B = static_cast<double>(batch.size());
    const int R = static_cast<int>(batch.front().rollouts.size());
    const double tau = cfg.temperature;
    const double kl_dir = cfg.kl_sign == KlSign::Penalty ? -1.0 : 1.0;

    // Flatten dispersion scores to place the adaptive KL gate.
    Eigen::VectorXd all_dsd(static_cast<Eigen::Index>(batch.size()) * R);
    for (std::size_t g = 0; g < batch.size(); ++g) {
        if (static_cast<int>(batch[g].rollouts.size()) != R) {
            throw Error("groups in one batch must share the group size");
        }
        if (batch[g].dsd_scores.size() != R || batch[g].advantages.size() != R) {
            throw Error("dsd scores and advantages must be populated");
        }
        all_dsd.segment(static_cast<Eigen::Index>(g) * R, R) = batch[g].dsd_scores;
    }
    double resolved_xi = 0.0;
    const std::vector<int> kl_indices = adaptive_kl_set(all_dsd, cfg.xi, &resolved_xi);
    std::vector<char> in_kl_set(batch.size() * R, 0);
    for (int idx : kl_indices) in_kl_set[idx] = 1;

    StepEval out;
    out.metrics.kl_set_size = static_cast<int>(kl_indices.size());
    out.metrics.xi_resolved = resolved_xi;

    double sum_surrogate = 0.0;
    double sum_xp = 0.0;
    double sum_kl = 0.0;
    double sum_reward = 0.0;
    double sum_entropy = 0.0;
    double sum_length = 0.0;
    long clipped_tokens = 0;
    long total_tokens = 0;

    for (std::size_t g = 0; g < batch.size(); ++g) {
        const GroupRollout& group = batch[g];

        // Softmax weights of the advantage-shaped regularizer for this group.
        Eigen::VectorXd shaped(R);
        for (int i = 0; i < R; ++i) {
            shaped(i) = -std::max(group.advantages(i), 0.0) * group.dsd_scores(i);
        }
        const double shift = shaped.maxCoeff();
        const Eigen::VectorXd weights =
            (shaped.array() - shift).exp() / (shaped.array() - shift).exp().sum();

        sum_xp += latent_exploration_loss(group.dsd_scores, group.advantages);

        double group_surrogate = 0.0;
        for (int i = 0; i < R; ++i) {
            const Rollout& roll = group.rollouts[i];
            sum_reward += roll.reward;
            sum_length += roll.length();
            if (roll.response.empty()) continue;

            const RolloutPass pass = forward_rollout(policy, roll, tau);
            sum_entropy += pass.entropy_mean;
            const int T = roll.length();
            const double adv = group.advantages(i);

            std::vector<Eigen::VectorXd> dlogits(T);

            // --- clipped surrogate ------------------------------------------
            total_tokens += T;
            if (cfg.ratio == RatioKind::Sequence) {
                double log_ratio = 0.0;
                for (int t = 0; t < T; ++t) log_ratio += pass.logp[t] - roll.logprobs_old[t];
                const double rho = safe_exp(log_ratio);
                bool clipped = false;
                group_surrogate += clipped_term(rho, adv, cfg.clip_eps, &clipped);
                if (clipped) clipped_tokens += T;
                if (grad && !clipped && adv != 0.0) {
                    const double coef = rho * adv / (B * R);
                    for (int t = 0; t < T; ++t) {
                        if (dlogits[t].size() == 0) dlogits[t] = Eigen::VectorXd::Zero(policy.vocab());
                        Eigen::VectorXd dlp = -pass.dists[t].probs;
                        dlp(roll.response[t]) += 1.0;
                        dlogits[t] += (coef / tau) * dlp;
                    }
                }
            } else {
                double acc = 0.0;
                for (int t = 0; t < T; ++t) {
                    const double rho = safe_exp(pass.logp[t] - roll.logprobs_old[t]);
                    bool clipped = false;
                    acc += clipped_term(rho, adv, cfg.clip_eps, &clipped);
                    if (clipped) ++clipped_tokens;
                    if (grad && !clipped && adv != 0.0) {
                        const double coef = rho * adv / (B * R * T);
                        if (dlogits[t].size() == 0) dlogits[t] = Eigen::VectorXd::Zero(policy.vocab());
                        Eigen::VectorXd dlp = -pass.dists[t].probs;
                        dlp(roll.response[t]) += 1.0;
                        dlogits[t] += (coef / tau) * dlp;
                    }
                }
                group_surrogate += acc / T;
            }

            // --- dispersion regularizer, score-function route ----------------
            // Pathwise trajectories are handled below through the state
            // gradient; downgraded ones nudge sequence log-probabilities with
            // stop-gradient softmax weights.
            const bool pathwise = grad && dsd_grads && (*dsd_grads)[g][i].pathwise;
            if (grad && cfg.alpha > 0.0 && !pathwise) {
                const double coef = -cfg.alpha * (weights(i) - 1.0 / R) / (B * R);
                if (coef != 0.0) {
                    for (int t = 0; t < T; ++t) {
                        if (dlogits[t].size() == 0) dlogits[t] = Eigen::VectorXd::Zero(policy.vocab());
                        Eigen::VectorXd dlp = -pass.dists[t].probs;
                        dlp(roll.response[t]) += 1.0;
                        dlogits[t] += (coef / tau) * dlp;
                    }
                }
            }

            // --- gated KL to the reference -----------------------------------
            const bool gated = in_kl_set[g * R + i] != 0;
            if (gated) {
                Eigen::VectorXd h_ref = ref.run_prompt(roll.prompt);
                double kl_value = 0.0;
                for (int t = 0; t < T; ++t) {
                    const SoftmaxDist q = softmax_dist(ref.logits(h_ref), tau);
                    const SoftmaxDist& p = pass.dists[t];
                    const double kl_t =
                        (p.probs.array() * (p.logprobs - q.logprobs).array()).sum();
                    kl_value += kl_t;
                    if (grad && cfg.beta != 0.0) {
                        if (dlogits[t].size() == 0) dlogits[t] = Eigen::VectorXd::Zero(policy.vocab());
                        const Eigen::VectorXd dkl =
                            p.probs.array() * ((p.logprobs - q.logprobs).array() - kl_t);
                        dlogits[t] += (kl_dir * cfg.beta / (T * tau)) * dkl;
                    }
                    h_ref = ref.step(h_ref, roll.response[t]);
                }
                sum_kl += kl_value / T;
            }

            if (grad) {
                const Eigen::MatrixXd* dstates = nullptr;
                Eigen::MatrixXd scaled;
                if (pathwise) {
                    // d objective / d dsd_i = alpha * weight_i * clip(adv_i, 0) / B
                    const double coef =
                        cfg.alpha * weights(i) * std::max(adv, 0.0) / B;
                    if (coef != 0.0) {
                        scaled = coef * (*dsd_grads)[g][i].states_grad;
                        dstates = &scaled;
                    }
                }
                backward_rollout(policy, roll, pass, dlogits, dstates, *grad);
            }
        }
        sum_surrogate += group_surrogate / R;
    }

    const double n_rollouts = B * R;
    out.metrics.mean_reward = sum_reward / n_rollouts;
    out.metrics.mean_dsd = all_dsd.mean();
    out.metrics.mean_entropy = sum_entropy / n_rollouts;
    out.metrics.mean_response_length = sum_length / n_rollouts;
    out.metrics.loss_surrogate = sum_surrogate / B;
    out.metrics.loss_xp = sum_xp / B;
    out.metrics.loss_kl = sum_kl;
    out.metrics.clipped_fraction =
        total_tokens > 0 ? static_cast<double>(clipped_tokens) / total_tokens : 0.0;

    out.objective = out.metrics.loss_surrogate - cfg.alpha * out.metrics.loss_xp +
                    kl_dir * cfg.beta * sum_kl;
    return out;
}

} // namespace

ObjectiveEval relax_objective(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                              const std::vector<GroupRollout>& batch,
                              const TrainConfig& cfg) {
    const StepEval eval = evaluate_objective(policy, ref, batch, cfg, nullptr, nullptr);
    return ObjectiveEval{eval.objective, eval.metrics};
}

ObjectiveEval relax_objective(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                              const std::vector<GroupRollout>& batch, const TrainConfig& cfg,
                              const std::vector<std::vector<DsdPathInfo>>* dsd_paths,
                              PolicyGradient* grad) {
    const StepEval eval = evaluate_objective(policy, ref, batch, cfg, dsd_paths, grad);
    return ObjectiveEval{eval.objective, eval.metrics};
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

struct AdamState {
    PolicyGradient m, v;
    int t = 0;

    explicit AdamState(const RecurrentPolicy& p)
        : m(PolicyGradient::zeros_like(p)), v(PolicyGradient::zeros_like(p)) {}

    // Ascent step along `g` with bias-corrected moments.
    void apply(RecurrentPolicy& p, const PolicyGradient& g, double lr) {
        ++t;
        const double beta1 = 0.9, beta2 = 0.95, eps = 1e-8;
        const double c1 = 1.0 - std::pow(beta1, t);
        const double c2 = 1.0 - std::pow(beta2, t);
        auto update = [&](Eigen::MatrixXd& mm, Eigen::MatrixXd& vv,
                          const Eigen::MatrixXd& gg, Eigen::MatrixXd& param) {
            mm = beta1 * mm + (1.0 - beta1) * gg;
            vv = beta2 * vv + (1.0 - beta2) * gg.array().square().matrix();
            param.array() += lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
        };
        auto update_vec = [&](Eigen::VectorXd& mm, Eigen::VectorXd& vv,
                              const Eigen::VectorXd& gg, Eigen::VectorXd& param) {
            mm = beta1 * mm + (1.0 - beta1) * gg;
            vv = beta2 * vv + (1.0 - beta2) * gg.array().square().matrix();
            param.array() += lr * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
        };
        update(m.embed, v.embed, g.embed, p.embed);
        update(m.W_h, v.W_h, g.W_h, p.W_h);
        update(m.W_in, v.W_in, g.W_in, p.W_in);
        update(m.W_out, v.W_out, g.W_out, p.W_out);
        update_vec(m.b_h, v.b_h, g.b_h, p.b_h);
        update_vec(m.b_out, v.b_out, g.b_out, p.b_out);
    }
};

} // namespace

TrainResult train(const TaskSpec& task, const TrainConfig& cfg) {
    task.validate();
    cfg.validate();

    RecurrentPolicy policy =
        RecurrentPolicy::init(task.vocab_size, cfg.hidden_dim, cfg.embed_dim, cfg.seed);
    const RecurrentPolicy ref = policy;

    TrainResult result{policy, std::nullopt, {}};
    if (cfg.steps == 0) return result;

    Rng prompt_rng(Rng::derive(task.seed, 0x50524dULL)); // "PRM"
    AdamState adam(policy);

    GenerateOptions gen_opts;
    gen_opts.group_size = cfg.group_size;
    gen_opts.temperature = cfg.temperature;
    gen_opts.max_len = cfg.max_len;

    for (int step = 0; step < cfg.steps; ++step) {
        // -- sampling -------------------------------------------------------
        std::vector<GroupRollout> batch;
        batch.reserve(cfg.batch_prompts);
        for (int b = 0; b < cfg.batch_prompts; ++b) {
            const std::vector<int> prompt = sample_prompt(task, prompt_rng);
            const std::uint64_t gen_seed = Rng::derive(
                cfg.seed, 0x47454eULL + static_cast<std::uint64_t>(step) * 1000003ULL + b);
            batch.push_back(generate(policy, task, prompt, gen_opts, gen_seed));
        }

        // -- one-time dictionary fit on the sampled hidden states ------------
        if (step == 0) {
            std::vector<HiddenTrajectory> corpus;
            for (const auto& group : batch) {
                for (const auto& roll : group.rollouts) {
                    if (roll.hidden.steps() >= 3) corpus.push_back(roll.hidden);
                }
            }
            if (corpus.empty()) {
                throw Error("no trajectory long enough to fit the dictionary");
            }
            DictTrainConfig dict_cfg = cfg.dict;
            dict_cfg.m = cfg.koopman_dim;
            result.dictionary = fit_dictionary(corpus, dict_cfg).dictionary;
        }
        const KoopmanDictionary& dict = *result.dictionary;

        // -- per-trajectory statistics ---------------------------------------
        std::vector<std::vector<DsdPathInfo>> dsd_grads(batch.size());
        for (std::size_t g = 0; g < batch.size(); ++g) {
            GroupRollout& group = batch[g];
            Eigen::VectorXd rewards(cfg.group_size);
            for (int i = 0; i < cfg.group_size; ++i) rewards(i) = group.rollouts[i].reward;
            group.advantages = group_advantages(rewards);
            group.dsd_scores = Eigen::VectorXd::Zero(cfg.group_size);
            dsd_grads[g].resize(cfg.group_size);

            for (int i = 0; i < cfg.group_size; ++i) {
                const HiddenTrajectory& hidden = group.rollouts[i].hidden;
                if (hidden.steps() < 3) continue; // too short to score; stays at zero
                if (cfg.grad_mode == GradMode::Pathwise) {
                    try {
                        DsdGradient dg = dsd_gradient(hidden, dict, cfg.rcond, cfg.gap_tol);
                        group.dsd_scores(i) = dg.report.dsd;
                        dsd_grads[g][i].pathwise = true;
                        dsd_grads[g][i].states_grad = std::move(dg.states_grad);
                        continue;
                    } catch (const DegenerateSpectrum&) {
                    } catch (const IllConditioned&) {
                    }
                }
                DsdOptions opts;
                opts.rcond = cfg.rcond;
                group.dsd_scores(i) = dsd(hidden, dict, opts).dsd;
            }
        }

        // -- update -----------------------------------------------------------
        const int chunk_size = cfg.minibatch > 0 ? cfg.minibatch : cfg.batch_prompts;
        StepMetrics metrics;
        double norm_sum = 0.0;
        int n_chunks = 0;
        bool first_chunk = true;
        for (int start = 0; start < cfg.batch_prompts; start += chunk_size) {
            const int count = std::min(chunk_size, cfg.batch_prompts - start);
            std::vector<GroupRollout> chunk(batch.begin() + start,
                                            batch.begin() + start + count);
            std::vector<std::vector<DsdPathInfo>> chunk_grads(
                dsd_grads.begin() + start, dsd_grads.begin() + start + count);

            PolicyGradient grad = PolicyGradient::zeros_like(policy);
            const StepEval eval =
                evaluate_objective(policy, ref, chunk, cfg, &chunk_grads, &grad);
            if (first_chunk) {
                metrics = eval.metrics;
                first_chunk = false;
            }

            norm_sum += clip_global_norm(grad, 1.0);
            ++n_chunks;
            adam.apply(policy, grad, cfg.lr);
        }

        // With a single full-batch update the recorded metrics describe the
        // sampled batch exactly; with mini-batches they describe the first
        // chunk before any update.
        metrics.step = step;
        metrics.grad_norm = norm_sum / std::max(n_chunks, 1);
        result.trace.push_back(metrics);
    }

    result.policy = policy;
    return result;
}

} // namespace relax
