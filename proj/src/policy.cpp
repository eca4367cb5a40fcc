#include "relax/policy.hpp"

#include <cmath>
#include <string>

namespace relax {

void TaskSpec::validate() const {
    if (prompt_len < 1) throw ConfigError("prompt_len must be at least 1");
    if (kind == TaskKind::ModSum && modulus < 1) throw ConfigError("modulus must be positive");
    // digits + delimiter + end token must fit
    if (vocab_size < digit_base() + 2) {
        throw ConfigError("vocab_size must cover the digits plus two reserved tokens");
    }
}

namespace {

Eigen::MatrixXd uniform_matrix(int rows, int cols, double bound, Rng& rng) {
    Eigen::MatrixXd out(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) out(i, j) = rng.uniform(-bound, bound);
    }
    return out;
}

} // namespace

RecurrentPolicy RecurrentPolicy::init(int vocab, int hidden_dim, int embed_dim,
                                      std::uint64_t seed) {
    if (vocab < 2 || hidden_dim < 1 || embed_dim < 1) {
        throw ConfigError("policy dimensions must be positive (vocab >= 2)");
    }
    Rng rng(Rng::derive(seed, 0x504f4cULL)); // "POL"
    RecurrentPolicy p;
    p.embed = uniform_matrix(vocab, embed_dim, 1.0 / std::sqrt(double(vocab)), rng);
    p.W_h = uniform_matrix(hidden_dim, hidden_dim, 1.0 / std::sqrt(double(hidden_dim)), rng);
    p.W_in = uniform_matrix(hidden_dim, embed_dim, 1.0 / std::sqrt(double(embed_dim)), rng);
    p.b_h = uniform_matrix(hidden_dim, 1, 1.0 / std::sqrt(double(hidden_dim)), rng);
    p.W_out = uniform_matrix(vocab, hidden_dim, 1.0 / std::sqrt(double(hidden_dim)), rng);
    p.b_out = uniform_matrix(vocab, 1, 1.0 / std::sqrt(double(hidden_dim)), rng);
    return p;
}

Eigen::VectorXd RecurrentPolicy::step(const Eigen::VectorXd& h, int token) const {
    return (W_h * h + W_in * embed.row(token).transpose() + b_h).array().tanh();
}

Eigen::VectorXd RecurrentPolicy::logits(const Eigen::VectorXd& h) const {
    return W_out * h + b_out;
}

Eigen::VectorXd RecurrentPolicy::run_prompt(const std::vector<int>& prompt) const {
    Eigen::VectorXd h = Eigen::VectorXd::Zero(hidden_dim());
    for (int token : prompt) h = step(h, token);
    return h;
}

std::vector<int> sample_prompt(const TaskSpec& task, Rng& rng) {
    task.validate();
    std::vector<int> prompt;
    prompt.reserve(task.prompt_len + 1);
    const int base = task.digit_base();
    for (int i = 0; i < task.prompt_len; ++i) {
        prompt.push_back(static_cast<int>(rng.below(base)));
    }
    prompt.push_back(task.delimiter_token());
    return prompt;
}

int answer_token(const TaskSpec& task, const std::vector<int>& prompt) {
    long acc = 0;
    for (int token : prompt) {
        if (token >= task.digit_base()) continue; // delimiter or stray reserved token
        if (task.kind == TaskKind::Parity) {
            acc ^= token;
        } else {
            acc = (acc + token) % task.modulus;
        }
    }
    return static_cast<int>(acc);
}

double verify(const TaskSpec& task, const std::vector<int>& prompt,
              const std::vector<int>& response) {
    const int want = answer_token(task, prompt);
    // Last emitted token that is not the end marker carries the answer.
    for (auto it = response.rbegin(); it != response.rend(); ++it) {
        if (*it != task.end_token()) return *it == want ? 1.0 : 0.0;
    }
    return 0.0;
}

namespace {

// Softmax of logits / temperature, returned with its log for reuse.
struct Categorical {
    Eigen::VectorXd probs;
    Eigen::VectorXd logprobs;
};

Categorical categorical(const Eigen::VectorXd& logits, double temperature) {
    Eigen::VectorXd z = logits / temperature;
    const double zmax = z.maxCoeff();
    Eigen::VectorXd shifted = z.array() - zmax;
    Eigen::VectorXd ex = shifted.array().exp();
    const double total = ex.sum();
    Categorical out;
    out.probs = ex / total;
    out.logprobs = shifted.array() - std::log(total);
    return out;
}

int sample_index(const Eigen::VectorXd& probs, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        acc += probs(i);
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size() - 1);
}

int argmax_index(const Eigen::VectorXd& values) {
    Eigen::Index best = 0;
    values.maxCoeff(&best);
    return static_cast<int>(best);
}

} // namespace

GroupRollout generate(const RecurrentPolicy& policy, const TaskSpec& task,
                      const std::vector<int>& prompt, const GenerateOptions& opts,
                      std::uint64_t seed) {
    if (opts.group_size < 1) throw ConfigError("group_size must be at least 1");
    if (!opts.greedy && opts.temperature <= 0.0) {
        throw ConfigError("temperature must be positive (use greedy for the limit)");
    }
    if (opts.max_len < 1) throw ConfigError("max_len must be at least 1");

    GroupRollout group;
    group.prompt = prompt;
    group.rollouts.reserve(opts.group_size);

    const Eigen::VectorXd h_prompt = policy.run_prompt(prompt);
    const double temperature = opts.greedy ? 1.0 : opts.temperature;

    for (int member = 0; member < opts.group_size; ++member) {
        Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(member)));
        Rollout roll;
        roll.prompt = prompt;
        roll.hidden.states.resize(opts.max_len, policy.hidden_dim());

        Eigen::VectorXd h = h_prompt;
        int t = 0;
        for (; t < opts.max_len; ++t) {
            const Categorical dist = categorical(policy.logits(h), temperature);
            const int token = opts.greedy ? argmax_index(dist.probs)
                                          : sample_index(dist.probs, rng);
            roll.response.push_back(token);
            roll.logprobs_old.push_back(opts.greedy ? 0.0 : dist.logprobs(token));
            h = policy.step(h, token);
            roll.hidden.states.row(t) = h.transpose();
            if (token == task.end_token()) {
                ++t;
                break;
            }
        }
        roll.hidden.states.conservativeResize(t, Eigen::NoChange);
        roll.reward = verify(task, prompt, roll.response);
        group.rollouts.push_back(std::move(roll));
    }
    return group;
}

double token_entropy(const RecurrentPolicy& policy, const Rollout& rollout,
                     double temperature) {
    if (rollout.response.empty()) return 0.0;
    Eigen::VectorXd h = policy.run_prompt(rollout.prompt);
    double total = 0.0;
    for (int token : rollout.response) {
        const Categorical dist = categorical(policy.logits(h), temperature);
        total -= (dist.probs.array() * dist.logprobs.array()).sum();
        h = policy.step(h, token);
    }
    return total / static_cast<double>(rollout.response.size());
}

double kl_to_ref(const RecurrentPolicy& policy, const RecurrentPolicy& ref,
                 const Rollout& rollout, double temperature) {
    if (policy.vocab() != ref.vocab()) {
        throw DimensionMismatch("policies must share a vocabulary");
    }
    if (rollout.response.empty()) return 0.0;
    Eigen::VectorXd h_pol = policy.run_prompt(rollout.prompt);
    Eigen::VectorXd h_ref = ref.run_prompt(rollout.prompt);
    double total = 0.0;
    for (int token : rollout.response) {
        const Categorical p = categorical(policy.logits(h_pol), temperature);
        const Categorical q = categorical(ref.logits(h_ref), temperature);
        total += (p.probs.array() * (p.logprobs - q.logprobs).array()).sum();
        h_pol = policy.step(h_pol, token);
        h_ref = ref.step(h_ref, token);
    }
    return total / static_cast<double>(rollout.response.size());
}

} // namespace relax
