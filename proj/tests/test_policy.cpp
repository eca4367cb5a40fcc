#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "relax/policy.hpp"

using namespace relax;

namespace {

TaskSpec parity_task() {
    TaskSpec task;
    task.kind = TaskKind::Parity;
    task.prompt_len = 4;
    task.vocab_size = 12;
    task.seed = 5;
    return task;
}

// Policy whose next-token distribution is fixed by b_out alone.
RecurrentPolicy planted_logits(const Eigen::VectorXd& logits_bias, int hidden_dim = 4,
                               int embed_dim = 3) {
    const int vocab = static_cast<int>(logits_bias.size());
    RecurrentPolicy p = RecurrentPolicy::init(vocab, hidden_dim, embed_dim, 99);
    p.W_out.setZero();
    p.b_out = logits_bias;
    return p;
}

} // namespace

TEST_CASE("sample_prompt basics") {
    const TaskSpec task = parity_task();
    SUBCASE("deterministic per rng state, delimiter-terminated") {
        Rng a(123), b(123);
        const std::vector<int> pa = sample_prompt(task, a);
        const std::vector<int> pb = sample_prompt(task, b);
        CHECK(pa == pb);
        CHECK(pa.size() == 5);
        CHECK(pa.back() == task.delimiter_token());
        for (int i = 0; i < 4; ++i) CHECK(pa[i] <= 1);
    }
    SUBCASE("modsum digits stay below the modulus") {
        TaskSpec task_mod;
        task_mod.kind = TaskKind::ModSum;
        task_mod.modulus = 7;
        task_mod.vocab_size = 12;
        task_mod.prompt_len = 6;
        Rng rng(7);
        const std::vector<int> p = sample_prompt(task_mod, rng);
        for (std::size_t i = 0; i + 1 < p.size(); ++i) CHECK(p[i] < 7);
    }
    SUBCASE("different seeds give different prompts") {
        Rng a(1), b(2);
        int diffs = 0;
        for (int trial = 0; trial < 16; ++trial) {
            if (sample_prompt(task, a) != sample_prompt(task, b)) ++diffs;
        }
        CHECK(diffs >= 14);
    }
}

TEST_CASE("verify scores the final non-end token") {
    const TaskSpec task = parity_task();
    SUBCASE("parity of 1,0,1,1 is 1") {
        const std::vector<int> prompt = {1, 0, 1, 1, task.delimiter_token()};
        CHECK(answer_token(task, prompt) == 1);
        CHECK(verify(task, prompt, {1}) == 1.0);
        CHECK(verify(task, prompt, {1, task.end_token()}) == 1.0);
        CHECK(verify(task, prompt, {0, task.end_token()}) == 0.0);
        CHECK(verify(task, prompt, {1, 0, task.end_token()}) == 0.0);
    }
    SUBCASE("empty and end-only responses are malformed") {
        const std::vector<int> prompt = {1, 0, 1, 1, task.delimiter_token()};
        CHECK(verify(task, prompt, {}) == 0.0);
        CHECK(verify(task, prompt, {task.end_token()}) == 0.0);
    }
    SUBCASE("modsum 3+4 mod 5 answers 2") {
        TaskSpec task_mod;
        task_mod.kind = TaskKind::ModSum;
        task_mod.modulus = 5;
        task_mod.vocab_size = 12;
        task_mod.prompt_len = 2;
        const std::vector<int> prompt = {3, 4, task_mod.delimiter_token()};
        CHECK(answer_token(task_mod, prompt) == 2);
        CHECK(verify(task_mod, prompt, {2, task_mod.end_token()}) == 1.0);
        CHECK(verify(task_mod, prompt, {4, task_mod.end_token()}) == 0.0);
    }
}

TEST_CASE("generate contracts") {
    const TaskSpec task = parity_task();
    const RecurrentPolicy policy = RecurrentPolicy::init(task.vocab_size, 16, 8, 21);
    Rng rng(33);
    const std::vector<int> prompt = sample_prompt(task, rng);

    SUBCASE("greedy members are identical") {
        GenerateOptions opts;
        opts.group_size = 4;
        opts.greedy = true;
        opts.max_len = 8;
        const GroupRollout group = generate(policy, task, prompt, opts, 77);
        for (int i = 1; i < 4; ++i) {
            CHECK(group.rollouts[i].response == group.rollouts[0].response);
            CHECK(group.rollouts[i].hidden.states == group.rollouts[0].hidden.states);
        }
    }
    SUBCASE("max_len of one truncates every response") {
        GenerateOptions opts;
        opts.group_size = 6;
        opts.max_len = 1;
        const GroupRollout group = generate(policy, task, prompt, opts, 78);
        for (const Rollout& roll : group.rollouts) {
            CHECK(roll.length() == 1);
            CHECK(roll.hidden.steps() == 1);
        }
    }
    SUBCASE("fixed seed reproduces the group bit-for-bit") {
        GenerateOptions opts;
        opts.group_size = 5;
        opts.max_len = 10;
        const GroupRollout a = generate(policy, task, prompt, opts, 79);
        const GroupRollout b = generate(policy, task, prompt, opts, 79);
        for (int i = 0; i < 5; ++i) {
            CHECK(a.rollouts[i].response == b.rollouts[i].response);
            CHECK(a.rollouts[i].logprobs_old == b.rollouts[i].logprobs_old);
            CHECK(a.rollouts[i].hidden.states == b.rollouts[i].hidden.states);
            CHECK(a.rollouts[i].reward == b.rollouts[i].reward);
        }
    }
    SUBCASE("stored hidden states replay the recurrence exactly") {
        GenerateOptions opts;
        opts.group_size = 3;
        opts.max_len = 10;
        const GroupRollout group = generate(policy, task, prompt, opts, 80);
        for (const Rollout& roll : group.rollouts) {
            Eigen::VectorXd h = policy.run_prompt(roll.prompt);
            for (int t = 0; t < roll.length(); ++t) {
                h = policy.step(h, roll.response[t]);
                CHECK((h.transpose() - roll.hidden.states.row(t)).cwiseAbs().maxCoeff() ==
                      0.0);
            }
        }
    }
    SUBCASE("rewards are a pure function of prompt and response") {
        GenerateOptions opts;
        opts.group_size = 8;
        opts.max_len = 10;
        const GroupRollout group = generate(policy, task, prompt, opts, 81);
        for (const Rollout& roll : group.rollouts) {
            CHECK(roll.reward == verify(task, roll.prompt, roll.response));
        }
    }
}

TEST_CASE("token_entropy closed forms") {
    SUBCASE("uniform logits give log V") {
        const RecurrentPolicy p = planted_logits(Eigen::VectorXd::Zero(12));
        Rollout roll;
        roll.prompt = {0, 1, 10};
        roll.response = {3, 5, 11};
        CHECK(token_entropy(p, roll) == doctest::Approx(std::log(12.0)).epsilon(1e-12));
    }
    SUBCASE("saturated logits give almost zero entropy") {
        Eigen::VectorXd bias = Eigen::VectorXd::Constant(12, -100.0);
        bias(4) = 100.0;
        const RecurrentPolicy p = planted_logits(bias);
        Rollout roll;
        roll.prompt = {0};
        roll.response = {4, 4};
        CHECK(token_entropy(p, roll) <= 1e-8);
    }
    SUBCASE("binary (0.25, 0.75) entropy") {
        Eigen::VectorXd bias(2);
        bias << std::log(0.25), std::log(0.75);
        const RecurrentPolicy p = planted_logits(bias);
        Rollout roll;
        roll.prompt = {0};
        roll.response = {1};
        const double expected = -0.25 * std::log(0.25) - 0.75 * std::log(0.75);
        CHECK(token_entropy(p, roll) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(token_entropy(p, roll) == doctest::Approx(0.5623).epsilon(1e-4));
    }
}

TEST_CASE("kl_to_ref closed forms and nonnegativity") {
    SUBCASE("identical policies have zero divergence") {
        const RecurrentPolicy p = RecurrentPolicy::init(12, 8, 4, 3);
        Rollout roll;
        roll.prompt = {1, 0, 10};
        roll.response = {2, 7, 11};
        CHECK(kl_to_ref(p, p, roll) == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("uniform vs (0.25, 0.75)") {
        Eigen::VectorXd uniform(2), tilted(2);
        uniform << 0.0, 0.0;
        tilted << std::log(0.25), std::log(0.75);
        const RecurrentPolicy p = planted_logits(uniform);
        const RecurrentPolicy q = planted_logits(tilted);
        Rollout roll;
        roll.prompt = {0};
        roll.response = {1};
        const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
        CHECK(kl_to_ref(p, q, roll) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(kl_to_ref(p, q, roll) == doctest::Approx(0.1438).epsilon(1e-3));
    }
    SUBCASE("nonnegative across random policy pairs") {
        Rollout roll;
        roll.prompt = {0, 3};
        roll.response = {1, 5, 2};
        for (int trial = 0; trial < 100; ++trial) {
            const RecurrentPolicy p = RecurrentPolicy::init(8, 6, 4, 1000 + trial);
            const RecurrentPolicy q = RecurrentPolicy::init(8, 6, 4, 2000 + trial);
            CHECK(kl_to_ref(p, q, roll) >= -1e-14);
        }
    }
}

TEST_CASE("task validation") {
    TaskSpec bad;
    bad.vocab_size = 3; // parity needs 2 digits + 2 reserved
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    TaskSpec mod;
    mod.kind = TaskKind::ModSum;
    mod.modulus = 11;
    mod.vocab_size = 12; // 11 digits + 2 reserved would need 13
    CHECK_THROWS_AS(mod.validate(), ConfigError);
}
