#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "relax/cli.hpp"
#include "relax/io.hpp"
#include "support.hpp"

using namespace relax;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("relax_test_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter()++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

TrajectoryDump random_dump(int n_traj, int dim, Rng& rng) {
    TrajectoryDump dump;
    dump.dim = dim;
    for (int k = 0; k < n_traj; ++k) {
        HiddenTrajectory traj;
        const int T = 3 + static_cast<int>(rng.below(6));
        traj.states.resize(T, dim);
        for (int t = 0; t < T; ++t) {
            for (int j = 0; j < dim; ++j) traj.states(t, j) = rng.normal() * 13.7;
        }
        dump.trajectories.push_back(std::move(traj));
    }
    return dump;
}

} // namespace

TEST_CASE("trajectory dump round trip is value-exact") {
    TempDir dir;
    Rng rng(501);
    const TrajectoryDump dump = random_dump(10, 4, rng);
    save_dump(dump, dir.file("d.kdt"));
    const TrajectoryDump loaded = load_dump(dir.file("d.kdt"));
    REQUIRE(loaded.trajectories.size() == 10);
    CHECK(loaded.dim == 4);
    for (int k = 0; k < 10; ++k) {
        CHECK(loaded.trajectories[k].states == dump.trajectories[k].states);
    }
}

TEST_CASE("dump parse failures carry positions") {
    TempDir dir;
    SUBCASE("bad magic") {
        atomic_write(dir.file("bad.kdt"), "NOPE\n0 3\n");
        CHECK_THROWS_AS(load_dump(dir.file("bad.kdt")), MagicMismatch);
    }
    SUBCASE("truncated trajectory names the offending line") {
        atomic_write(dir.file("trunc.kdt"), "KDT1\n1 2\n3\n0.5 0.25\n");
        try {
            load_dump(dir.file("trunc.kdt"));
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find(":5") != std::string::npos);
        }
    }
    SUBCASE("malformed float names its line") {
        atomic_write(dir.file("badf.kdt"), "KDT1\n1 2\n2\n0.5 nope\n0.5 0.5\n");
        try {
            load_dump(dir.file("badf.kdt"));
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            CHECK(std::string(e.what()).find("nope") != std::string::npos);
        }
    }
    SUBCASE("empty dump is legal") {
        atomic_write(dir.file("empty.kdt"), "KDT1\n0 7\n");
        const TrajectoryDump dump = load_dump(dir.file("empty.kdt"));
        CHECK(dump.trajectories.empty());
        CHECK(dump.dim == 7);
    }
}

TEST_CASE("dictionary and policy files round trip") {
    TempDir dir;
    Rng rng(503);
    SUBCASE("dictionary") {
        KoopmanDictionary dict(testkit::planted_weights(3, 5, rng));
        dict.freeze();
        save_dictionary(dict, dir.file("w.dict"));
        const KoopmanDictionary loaded = load_dictionary(dir.file("w.dict"));
        CHECK(loaded.weights() == dict.weights());
        CHECK(loaded.frozen());
        const std::string text = slurp(dir.file("w.dict"));
        CHECK(text.substr(0, 4) == "3 5\n");
    }
    SUBCASE("policy") {
        const RecurrentPolicy policy = RecurrentPolicy::init(9, 6, 4, 77);
        save_policy(policy, dir.file("p.pol"));
        const RecurrentPolicy loaded = load_policy(dir.file("p.pol"));
        CHECK(loaded.embed == policy.embed);
        CHECK(loaded.W_h == policy.W_h);
        CHECK(loaded.W_in == policy.W_in);
        CHECK(loaded.b_h == policy.b_h);
        CHECK(loaded.W_out == policy.W_out);
        CHECK(loaded.b_out == policy.b_out);
    }
}

TEST_CASE("config parsing, resolution, and idempotence") {
    SUBCASE("defaults resolve and re-parse to the same text") {
        const RunConfig cfg;
        const std::string resolved = resolve_config_text(cfg);
        const RunConfig reparsed = parse_config_text(resolved);
        CHECK(resolve_config_text(reparsed) == resolved);
    }
    SUBCASE("values and comments parse") {
        const RunConfig cfg = parse_config_text(
            "# a comment\n"
            "task.kind = modsum\n"
            "task.modulus = 7\n"
            "train.alpha = 0.25\n"
            "train.xi = p75   # trailing comment\n"
            "train.grad_mode = scorefunction\n"
            "dict.lr = 5e-4\n");
        CHECK(cfg.task.kind == TaskKind::ModSum);
        CHECK(cfg.task.modulus == 7);
        CHECK(cfg.train.alpha == 0.25);
        CHECK(cfg.train.xi.kind == XiSpec::Kind::Percentile);
        CHECK(cfg.train.xi.value == 75.0);
        CHECK(cfg.train.grad_mode == GradMode::ScoreFunction);
        CHECK(cfg.train.dict.lr == 5e-4);
    }
    SUBCASE("fixed xi parses as a plain real") {
        const RunConfig cfg = parse_config_text("train.xi = 25\n");
        CHECK(cfg.train.xi.kind == XiSpec::Kind::Fixed);
        CHECK(cfg.train.xi.value == 25.0);
    }
    SUBCASE("dict seed and m follow the trainer unless pinned") {
        const RunConfig cfg = parse_config_text("train.seed = 99\ntrain.m = 5\n");
        CHECK(cfg.train.dict.seed == 99);
        CHECK(cfg.train.dict.m == 5);
        const RunConfig pinned =
            parse_config_text("train.seed = 99\ntrain.m = 5\ndict.seed = 3\ndict.m = 2\n");
        CHECK(pinned.train.dict.seed == 3);
        CHECK(pinned.train.dict.m == 2);
    }
    SUBCASE("unknown keys are rejected") {
        CHECK_THROWS_AS(parse_config_text("train.alhpa = 0.5\n"), ConfigError);
    }
    SUBCASE("duplicate keys are rejected") {
        CHECK_THROWS_AS(parse_config_text("train.alpha = 1\ntrain.alpha = 2\n"), ConfigError);
    }
    SUBCASE("invalid values are rejected") {
        CHECK_THROWS_AS(parse_config_text("train.clip_eps = 1.5\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("train.lr = zero\n"), ConfigError);
        CHECK_THROWS_AS(parse_config_text("broken line\n"), ParseError);
    }
}

TEST_CASE("entropy-reward curve fit") {
    SUBCASE("noiseless plant recovers (a, b) to 1e-6") {
        std::vector<std::pair<double, double>> points;
        for (int i = 1; i <= 10; ++i) {
            const double h = 0.1 * i;
            points.emplace_back(h, -0.5 * std::exp(h) + 2.0);
        }
        const CurveFit fit = fit_entropy_reward(points);
        CHECK(fit.a == doctest::Approx(0.5).epsilon(1e-6));
        CHECK(fit.b == doctest::Approx(2.0).epsilon(1e-6));
        CHECK(fit.rmse <= 1e-10);
        CHECK(fit.n_points == 10);
    }
    SUBCASE("two points interpolate exactly") {
        const CurveFit fit = fit_entropy_reward({{0.2, 1.0}, {0.9, 0.4}});
        CHECK(fit.rmse <= 1e-12);
    }
    SUBCASE("coincident entropies are degenerate") {
        CHECK_THROWS_AS(fit_entropy_reward({{0.5, 1.0}, {0.5, 2.0}, {0.5, 0.0}}),
                        DegenerateDesign);
    }
    SUBCASE("mild noise still lands within 0.05") {
        Rng rng(509);
        std::vector<std::pair<double, double>> points;
        for (int i = 0; i < 100; ++i) {
            const double h = rng.uniform(0.1, 1.2);
            points.emplace_back(h, -0.5 * std::exp(h) + 2.0 + 0.01 * rng.normal());
        }
        const CurveFit fit = fit_entropy_reward(points);
        CHECK(std::abs(fit.a - 0.5) <= 0.05);
        CHECK(std::abs(fit.b - 2.0) <= 0.05);
    }
}

TEST_CASE("metrics CSV schema and extraction") {
    std::vector<StepMetrics> trace(2);
    trace[0].step = 0;
    trace[0].mean_reward = 0.25;
    trace[0].mean_entropy = 1.5;
    trace[0].kl_set_size = 3;
    trace[1].step = 1;
    trace[1].mean_reward = 0.5;
    trace[1].mean_entropy = 1.25;

    const std::string csv = metrics_csv(trace);
    CHECK(csv.rfind("step,mean_reward,mean_dsd,mean_entropy,mean_response_length,"
                    "grad_norm,clipped_fraction,kl_set_size,loss_surrogate,loss_xp,"
                    "loss_kl\n",
                    0) == 0);

    TempDir dir;
    save_metrics_csv(trace, dir.file("m.csv"));
    const auto points = load_entropy_reward_points(dir.file("m.csv"));
    REQUIRE(points.size() == 2);
    CHECK(points[0].first == 1.5);
    CHECK(points[0].second == 0.25);
    CHECK(points[1].first == 1.25);
    CHECK(points[1].second == 0.5);
}

TEST_CASE("cli: train is deterministic and writes the full artifact set") {
    TempDir dir;
    const std::string config =
        "task.kind = parity\n"
        "task.prompt_len = 3\n"
        "task.vocab_size = 8\n"
        "task.seed = 4\n"
        "train.group_size = 4\n"
        "train.batch_prompts = 2\n"
        "train.steps = 3\n"
        "train.max_len = 6\n"
        "train.hidden_dim = 8\n"
        "train.embed_dim = 4\n"
        "train.m = 2\n"
        "train.seed = 12\n"
        "dict.steps = 20\n"
        "dict.batch = 4\n";
    atomic_write(dir.file("run.cfg"), config);

    CHECK(cli::dispatch({"train", "--config", dir.file("run.cfg"), "--out",
                         dir.file("out1")}) == 0);
    CHECK(cli::dispatch({"train", "--config", dir.file("run.cfg"), "--out",
                         dir.file("out2")}) == 0);

    const std::string m1 = slurp(dir.file("out1") + "/metrics.csv");
    const std::string m2 = slurp(dir.file("out2") + "/metrics.csv");
    CHECK(m1 == m2);
    CHECK(m1.find("step,") == 0);
    CHECK(fs::exists(dir.file("out1") + "/config.resolved"));
    CHECK(fs::exists(dir.file("out1") + "/dictionary.txt"));
    CHECK(fs::exists(dir.file("out1") + "/policy.txt"));

    SUBCASE("config.resolved reproduces the identical run") {
        CHECK(cli::dispatch({"train", "--config", dir.file("out1") + "/config.resolved",
                             "--out", dir.file("out3")}) == 0);
        CHECK(slurp(dir.file("out3") + "/metrics.csv") == m1);
    }
}

TEST_CASE("cli: analyze emits one dispersion row per trajectory") {
    TempDir dir;
    Rng rng(511);
    const Eigen::MatrixXd W = testkit::planted_weights(2, 3, rng);
    KoopmanDictionary dict(W);
    dict.freeze();
    save_dictionary(dict, dir.file("w.dict"));

    TrajectoryDump dump;
    dump.dim = 3;
    for (int k = 0; k < 5; ++k) {
        HiddenTrajectory traj;
        traj.states.resize(6, 3);
        for (int t = 0; t < 6; ++t) {
            for (int j = 0; j < 3; ++j) traj.states(t, j) = rng.normal();
        }
        dump.trajectories.push_back(std::move(traj));
    }
    save_dump(dump, dir.file("d.kdt"));

    CHECK(cli::dispatch({"analyze", "--dump", dir.file("d.kdt"), "--dict", dir.file("w.dict"),
                         "--out", dir.file("an")}) == 0);
    const std::string dsd_csv = slurp(dir.file("an") + "/dsd.csv");
    CHECK(std::count(dsd_csv.begin(), dsd_csv.end(), '\n') == 6); // header + 5 rows
    const std::string eig_csv = slurp(dir.file("an") + "/eigenvalues.csv");
    CHECK(std::count(eig_csv.begin(), eig_csv.end(), '\n') == 11); // header + 5*2 rows
}

TEST_CASE("cli: fit-curve writes the planted parameters as JSON") {
    TempDir dir;
    std::vector<StepMetrics> trace;
    for (int i = 1; i <= 12; ++i) {
        StepMetrics m;
        m.step = i;
        m.mean_entropy = 0.1 * i;
        m.mean_reward = -0.5 * std::exp(0.1 * i) + 2.0;
        trace.push_back(m);
    }
    save_metrics_csv(trace, dir.file("m.csv"));
    CHECK(cli::dispatch({"fit-curve", "--metrics", dir.file("m.csv"), "--out",
                         dir.file("fit.json")}) == 0);
    const nlohmann::json parsed = nlohmann::json::parse(slurp(dir.file("fit.json")));
    CHECK(parsed.at("a").get<double>() == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(parsed.at("b").get<double>() == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(parsed.at("rmse").get<double>() <= 1e-10);
    CHECK(parsed.at("n_points").get<int>() == 12);
}

TEST_CASE("cli: fit-dict runs standalone from a dump") {
    TempDir dir;
    Rng rng(513);
    const Eigen::MatrixXd W_star = testkit::planted_weights(2, 3, rng);
    TrajectoryDump dump;
    dump.dim = 3;
    const testkit::PositiveSystem sys = testkit::positive_system(2, rng);
    for (int k = 0; k < 6; ++k) {
        Eigen::VectorXd z0(2);
        z0 << rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8);
        dump.trajectories.push_back(
            testkit::observable_linear_trajectory(W_star, sys.A, z0, 8));
    }
    save_dump(dump, dir.file("d.kdt"));
    atomic_write(dir.file("dict.cfg"), "dict.m = 2\ndict.steps = 30\ndict.seed = 9\n");

    CHECK(cli::dispatch({"fit-dict", "--dump", dir.file("d.kdt"), "--config",
                         dir.file("dict.cfg"), "--out", dir.file("out.dict")}) == 0);
    const KoopmanDictionary fitted = load_dictionary(dir.file("out.dict"));
    CHECK(fitted.observable_dim() == 2);
    CHECK(fitted.state_dim() == 3);
}

TEST_CASE("cli: exit codes distinguish usage from runtime errors") {
    TempDir dir;
    CHECK(cli::dispatch({"train", "--config"}) == 2);          // missing value
    CHECK(cli::dispatch({"no-such-command"}) == 2);            // unknown subcommand
    CHECK(cli::dispatch({}) == 2);                             // subcommand required
    CHECK(cli::dispatch({"train", "--config", dir.file("missing.cfg"), "--out",
                         dir.file("out")}) == 1);              // unreadable config
}
