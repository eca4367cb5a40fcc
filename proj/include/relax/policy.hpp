#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "relax/errors.hpp"
#include "relax/rng.hpp"
#include "relax/trajectory.hpp"

namespace relax {

enum class TaskKind { Parity, ModSum };

// Synthetic verifiable task. Token layout: ids [0, digit_base) are digits,
// vocab_size-2 is the query delimiter, vocab_size-1 ends the answer.
struct TaskSpec {
    TaskKind kind = TaskKind::Parity;
    int prompt_len = 4;
    int vocab_size = 12;
    int modulus = 5; // ModSum only
    std::uint64_t seed = 0;

    int digit_base() const { return kind == TaskKind::Parity ? 2 : modulus; }
    int delimiter_token() const { return vocab_size - 2; }
    int end_token() const { return vocab_size - 1; }
    void validate() const;
};

// Single-layer recurrent policy:
//   h_t = tanh(W_h h_{t-1} + W_in embed[token_t] + b_h)
//   logits_t = W_out h_t + b_out
// The state before any input is zero; the prompt is consumed through the same
// recurrence.
struct RecurrentPolicy {
    Eigen::MatrixXd embed; // V x d_e
    Eigen::MatrixXd W_h;   // d x d
    Eigen::MatrixXd W_in;  // d x d_e
    Eigen::VectorXd b_h;   // d
    Eigen::MatrixXd W_out; // V x d
    Eigen::VectorXd b_out; // V

    int vocab() const { return static_cast<int>(embed.rows()); }
    int hidden_dim() const { return static_cast<int>(W_h.rows()); }
    int embed_dim() const { return static_cast<int>(embed.cols()); }

    // Seeded uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)] per tensor.
    static RecurrentPolicy init(int vocab, int hidden_dim, int embed_dim,
                                std::uint64_t seed);

    Eigen::VectorXd step(const Eigen::VectorXd& h, int token) const;
    Eigen::VectorXd logits(const Eigen::VectorXd& h) const;
    Eigen::VectorXd run_prompt(const std::vector<int>& prompt) const;
};

// One sampled response. `hidden` row t is the post-update state after
// consuming response[t]; it is the state that conditions position t+1.
struct Rollout {
    std::vector<int> prompt;
    std::vector<int> response;        // includes the end token when one was emitted
    std::vector<double> logprobs_old; // per response token, behavior policy
    HiddenTrajectory hidden;
    double reward = 0.0;

    int length() const { return static_cast<int>(response.size()); }
};

// R responses to one prompt plus the per-trajectory statistics the trainer
// attaches.
struct GroupRollout {
    std::vector<int> prompt;
    std::vector<Rollout> rollouts;
    Eigen::VectorXd advantages; // empty until group_advantages
    Eigen::VectorXd dsd_scores; // empty until the trainer scores trajectories
};

// Instance tokens (bits or residues) followed by the delimiter.
std::vector<int> sample_prompt(const TaskSpec& task, Rng& rng);

// Ground-truth answer token for a prompt.
int answer_token(const TaskSpec& task, const std::vector<int>& prompt);

// 1 iff the last non-end token of the response is the answer token; malformed
// responses score 0.
double verify(const TaskSpec& task, const std::vector<int>& prompt,
              const std::vector<int>& response);

struct GenerateOptions {
    int group_size = 16;      // R
    double temperature = 1.0;
    int max_len = 16;         // L_max
    bool greedy = false;      // temperature -> 0 limit
};

// Autoregressive sampling of R responses; rewards are filled, advantages are
// not. Member i draws from a stream derived from (seed, i), so results do not
// depend on evaluation order.
GroupRollout generate(const RecurrentPolicy& policy, const TaskSpec& task,
                      const std::vector<int>& prompt, const GenerateOptions& opts,
                      std::uint64_t seed);

// Mean over response positions of the exact next-token entropy at the given
// temperature.
double token_entropy(const RecurrentPolicy& policy, const Rollout& rollout,
                     double temperature = 1.0);

// Mean over response positions of the exact KL(policy || ref) between the two
// next-token distributions, each under its own recurrence.
double kl_to_ref(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                 const Rollout& rollout, double temperature = 1.0);

} // namespace relax
