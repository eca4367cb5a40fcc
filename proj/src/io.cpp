#include "relax/io.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace relax {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void atomic_write(const std::string& path, const std::string& contents) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp + " for writing");
        out << contents;
        if (!out.flush()) throw Error("failed writing " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("failed to rename " + tmp + " to " + path + ": " + ec.message());
}

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::string::size_type start = 0;
    while (start <= text.size()) {
        auto end = text.find('\n', start);
        if (end == std::string::npos) {
            if (start < text.size()) lines.push_back(text.substr(start));
            break;
        }
        lines.push_back(text.substr(start, end - start));
        start = end + 1;
    }
    return lines;
}

// Cursor over whitespace-separated tokens with 1-based line tracking for
// error messages.
class LineReader {
public:
    LineReader(std::vector<std::string> lines, std::string path)
        : lines_(std::move(lines)), path_(std::move(path)) {}

    int line_number() const { return static_cast<int>(at_ + 1); }

    [[noreturn]] void fail(const std::string& what) const {
        throw ParseError(path_ + ":" + std::to_string(line_number()) + ": " + what);
    }

    std::string next_line() {
        if (at_ >= lines_.size()) {
            throw ParseError(path_ + ":" + std::to_string(line_number()) +
                             ": unexpected end of file");
        }
        return lines_[at_++];
    }

    bool done() const {
        for (std::size_t i = at_; i < lines_.size(); ++i) {
            if (!lines_[i].empty()) return false;
        }
        return true;
    }

private:
    std::vector<std::string> lines_;
    std::string path_;
    std::size_t at_ = 0;
};

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

double parse_double_tok(const std::string& tok, LineReader& reader) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size() || errno == ERANGE) {
        reader.fail("bad float '" + tok + "'");
    }
    return v;
}

long parse_int_tok(const std::string& tok, LineReader& reader) {
    char* end = nullptr;
    errno = 0;
    const long v = std::strtol(tok.c_str(), &end, 10);
    if (end != tok.c_str() + tok.size() || errno == ERANGE) {
        reader.fail("bad integer '" + tok + "'");
    }
    return v;
}

Eigen::MatrixXd parse_matrix(LineReader& reader, int rows, int cols) {
    Eigen::MatrixXd out(rows, cols);
    for (int i = 0; i < rows; ++i) {
        const int line_no = reader.line_number();
        const std::vector<std::string> toks = split_ws(reader.next_line());
        if (static_cast<int>(toks.size()) != cols) {
            throw ParseError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(cols) + " values, got " +
                             std::to_string(toks.size()));
        }
        for (int j = 0; j < cols; ++j) out(i, j) = parse_double_tok(toks[j], reader);
    }
    return out;
}

void append_matrix(std::ostringstream& out, const Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            if (j) out << ' ';
            out << format_double(m(i, j));
        }
        out << '\n';
    }
}

} // namespace

// ---- trajectory dumps -------------------------------------------------------

TrajectoryDump load_dump(const std::string& path) {
    LineReader reader(split_lines(read_file(path)), path);

    const std::string magic = reader.next_line();
    if (magic != "KDT1") throw MagicMismatch(path + ": expected KDT1 header, got '" + magic + "'");

    const std::vector<std::string> header = split_ws(reader.next_line());
    if (header.size() != 2) reader.fail("expected 'n_traj d'");
    const long n_traj = parse_int_tok(header[0], reader);
    const long dim = parse_int_tok(header[1], reader);
    if (n_traj < 0 || dim < 0) reader.fail("negative dump header counts");

    TrajectoryDump dump;
    dump.dim = static_cast<int>(dim);
    dump.trajectories.reserve(n_traj);
    for (long k = 0; k < n_traj; ++k) {
        const std::vector<std::string> tline = split_ws(reader.next_line());
        if (tline.size() != 1) reader.fail("expected a step count");
        const long steps = parse_int_tok(tline[0], reader);
        if (steps < 2) reader.fail("trajectory must have at least two steps");
        HiddenTrajectory traj;
        traj.states = parse_matrix(reader, static_cast<int>(steps), dump.dim);
        dump.trajectories.push_back(std::move(traj));
    }
    if (!reader.done()) reader.fail("trailing content after the last trajectory");
    return dump;
}

void save_dump(const TrajectoryDump& dump, const std::string& path) {
    std::ostringstream out;
    out << "KDT1\n" << dump.trajectories.size() << ' ' << dump.dim << '\n';
    for (const auto& traj : dump.trajectories) {
        if (traj.dim() != dump.dim) {
            throw DimensionMismatch("dump trajectories must share the header dimension");
        }
        out << traj.steps() << '\n';
        append_matrix(out, traj.states);
    }
    atomic_write(path, out.str());
}

// ---- dictionary / policy files ---------------------------------------------

KoopmanDictionary load_dictionary(const std::string& path) {
    LineReader reader(split_lines(read_file(path)), path);
    const std::vector<std::string> header = split_ws(reader.next_line());
    if (header.size() != 2) reader.fail("expected 'm d' header");
    const long m = parse_int_tok(header[0], reader);
    const long d = parse_int_tok(header[1], reader);
    if (m < 1 || d < 1) reader.fail("dictionary dimensions must be positive");
    KoopmanDictionary dict(parse_matrix(reader, static_cast<int>(m), static_cast<int>(d)));
    if (!reader.done()) reader.fail("trailing content after the weight rows");
    dict.freeze();
    return dict;
}

void save_dictionary(const KoopmanDictionary& dict, const std::string& path) {
    std::ostringstream out;
    out << dict.observable_dim() << ' ' << dict.state_dim() << '\n';
    append_matrix(out, dict.weights());
    atomic_write(path, out.str());
}

RecurrentPolicy load_policy(const std::string& path) {
    LineReader reader(split_lines(read_file(path)), path);
    const std::string magic = reader.next_line();
    if (magic != "KPF1") throw MagicMismatch(path + ": expected KPF1 header, got '" + magic + "'");
    const std::vector<std::string> header = split_ws(reader.next_line());
    if (header.size() != 3) reader.fail("expected 'vocab hidden embed'");
    const long V = parse_int_tok(header[0], reader);
    const long d = parse_int_tok(header[1], reader);
    const long de = parse_int_tok(header[2], reader);
    if (V < 2 || d < 1 || de < 1) reader.fail("bad policy dimensions");

    RecurrentPolicy p;
    p.embed = parse_matrix(reader, V, de);
    p.W_h = parse_matrix(reader, d, d);
    p.W_in = parse_matrix(reader, d, de);
    p.b_h = parse_matrix(reader, 1, d).transpose();
    p.W_out = parse_matrix(reader, V, d);
    p.b_out = parse_matrix(reader, 1, V).transpose();
    if (!reader.done()) reader.fail("trailing content after the policy tensors");
    return p;
}

void save_policy(const RecurrentPolicy& policy, const std::string& path) {
    std::ostringstream out;
    out << "KPF1\n"
        << policy.vocab() << ' ' << policy.hidden_dim() << ' ' << policy.embed_dim() << '\n';
    append_matrix(out, policy.embed);
    append_matrix(out, policy.W_h);
    append_matrix(out, policy.W_in);
    append_matrix(out, policy.b_h.transpose());
    append_matrix(out, policy.W_out);
    append_matrix(out, policy.b_out.transpose());
    atomic_write(path, out.str());
}

// ---- entropy-reward curve ----------------------------------------------------

CurveFit fit_entropy_reward(const std::vector<std::pair<double, double>>& points) {
    const std::size_t n = points.size();
    if (n < 2) throw Error("curve fit needs at least two points");

    // reward = -a * u + b with u = exp(entropy); ordinary least squares in
    // closed form.
    double su = 0.0, sr = 0.0, suu = 0.0, sur = 0.0;
    double umin = std::numeric_limits<double>::infinity();
    double umax = -std::numeric_limits<double>::infinity();
    for (const auto& [h, r] : points) {
        const double u = std::exp(h);
        su += u;
        sr += r;
        suu += u * u;
        sur += u * r;
        umin = std::min(umin, u);
        umax = std::max(umax, u);
    }
    if (umax - umin < 1e-12) {
        throw DegenerateDesign("all exp(entropy) values coincide; slope is unidentifiable");
    }
    const double dn = static_cast<double>(n);
    const double slope = (dn * sur - su * sr) / (dn * suu - su * su);
    const double intercept = (sr - slope * su) / dn;

    CurveFit fit;
    fit.a = -slope;
    fit.b = intercept;
    fit.n_points = static_cast<int>(n);
    double sq = 0.0;
    for (const auto& [h, r] : points) {
        const double pred = slope * std::exp(h) + intercept;
        sq += (r - pred) * (r - pred);
    }
    fit.rmse = std::sqrt(sq / dn);
    return fit;
}

// ---- run configuration -------------------------------------------------------

namespace {

struct KeyValue {
    std::string key;
    std::string value;
};

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<KeyValue> parse_flat(const std::string& text) {
    std::vector<KeyValue> pairs;
    const std::vector<std::string> lines = split_lines(text);
    for (std::size_t i = 0; i < lines.size(); ++i) {
        std::string line = lines[i];
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ParseError("config line " + std::to_string(i + 1) + ": expected key = value");
        }
        KeyValue kv{trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
        if (kv.key.empty()) {
            throw ParseError("config line " + std::to_string(i + 1) + ": empty key");
        }
        pairs.push_back(std::move(kv));
    }
    return pairs;
}

double parse_real(const std::string& key, const std::string& value) {
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) {
        throw ConfigError(key + ": bad real value '" + value + "'");
    }
    return v;
}

long long parse_int(const std::string& key, const std::string& value) {
    char* end = nullptr;
    errno = 0;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) {
        throw ConfigError(key + ": bad integer value '" + value + "'");
    }
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(value.c_str(), &end, 10);
    if (value.empty() || end != value.c_str() + value.size() || errno == ERANGE) {
        throw ConfigError(key + ": bad seed value '" + value + "'");
    }
    return v;
}

} // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    bool saw_dict_seed = false;
    bool saw_dict_m = false;

    std::vector<std::string> seen;
    for (const KeyValue& kv : parse_flat(text)) {
        for (const auto& prev : seen) {
            if (prev == kv.key) throw ConfigError("duplicate key '" + kv.key + "'");
        }
        seen.push_back(kv.key);
        const std::string& k = kv.key;
        const std::string& v = kv.value;

        if (k == "task.kind") {
            if (v == "parity") cfg.task.kind = TaskKind::Parity;
            else if (v == "modsum") cfg.task.kind = TaskKind::ModSum;
            else throw ConfigError("task.kind must be parity or modsum");
        } else if (k == "task.prompt_len") cfg.task.prompt_len = (int)parse_int(k, v);
        else if (k == "task.vocab_size") cfg.task.vocab_size = (int)parse_int(k, v);
        else if (k == "task.modulus") cfg.task.modulus = (int)parse_int(k, v);
        else if (k == "task.seed") cfg.task.seed = parse_u64(k, v);
        else if (k == "train.alpha") cfg.train.alpha = parse_real(k, v);
        else if (k == "train.beta") cfg.train.beta = parse_real(k, v);
        else if (k == "train.xi") {
            if (!v.empty() && v[0] == 'p') {
                cfg.train.xi = XiSpec::percentile(parse_real(k, v.substr(1)));
            } else {
                cfg.train.xi = XiSpec::fixed(parse_real(k, v));
            }
        } else if (k == "train.clip_eps") cfg.train.clip_eps = parse_real(k, v);
        else if (k == "train.group_size") cfg.train.group_size = (int)parse_int(k, v);
        else if (k == "train.batch_prompts") cfg.train.batch_prompts = (int)parse_int(k, v);
        else if (k == "train.lr") cfg.train.lr = parse_real(k, v);
        else if (k == "train.steps") cfg.train.steps = (int)parse_int(k, v);
        else if (k == "train.temperature") cfg.train.temperature = parse_real(k, v);
        else if (k == "train.m") cfg.train.koopman_dim = (int)parse_int(k, v);
        else if (k == "train.rcond") {
            cfg.train.rcond = v == "auto" ? -1.0 : parse_real(k, v);
        } else if (k == "train.gap_tol") cfg.train.gap_tol = parse_real(k, v);
        else if (k == "train.grad_mode") {
            if (v == "pathwise") cfg.train.grad_mode = GradMode::Pathwise;
            else if (v == "scorefunction") cfg.train.grad_mode = GradMode::ScoreFunction;
            else throw ConfigError("train.grad_mode must be pathwise or scorefunction");
        } else if (k == "train.ratio") {
            if (v == "token") cfg.train.ratio = RatioKind::Token;
            else if (v == "sequence") cfg.train.ratio = RatioKind::Sequence;
            else throw ConfigError("train.ratio must be token or sequence");
        } else if (k == "train.kl_sign") {
            if (v == "penalty") cfg.train.kl_sign = KlSign::Penalty;
            else if (v == "literal") cfg.train.kl_sign = KlSign::Literal;
            else throw ConfigError("train.kl_sign must be penalty or literal");
        } else if (k == "train.minibatch") cfg.train.minibatch = (int)parse_int(k, v);
        else if (k == "train.max_len") cfg.train.max_len = (int)parse_int(k, v);
        else if (k == "train.hidden_dim") cfg.train.hidden_dim = (int)parse_int(k, v);
        else if (k == "train.embed_dim") cfg.train.embed_dim = (int)parse_int(k, v);
        else if (k == "train.seed") cfg.train.seed = parse_u64(k, v);
        else if (k == "dict.m") { cfg.train.dict.m = (int)parse_int(k, v); saw_dict_m = true; }
        else if (k == "dict.lr") cfg.train.dict.lr = parse_real(k, v);
        else if (k == "dict.batch") cfg.train.dict.batch = (int)parse_int(k, v);
        else if (k == "dict.steps") cfg.train.dict.steps = (int)parse_int(k, v);
        else if (k == "dict.beta1") cfg.train.dict.beta1 = parse_real(k, v);
        else if (k == "dict.beta2") cfg.train.dict.beta2 = parse_real(k, v);
        else if (k == "dict.optimizer") {
            if (v == "adam") cfg.train.dict.optimizer = DictTrainConfig::Optimizer::Adam;
            else if (v == "sgd") cfg.train.dict.optimizer = DictTrainConfig::Optimizer::Sgd;
            else throw ConfigError("dict.optimizer must be adam or sgd");
        } else if (k == "dict.seed") { cfg.train.dict.seed = parse_u64(k, v); saw_dict_seed = true; }
        else throw ConfigError("unknown config key '" + k + "'");
    }

    if (!saw_dict_seed) cfg.train.dict.seed = cfg.train.seed;
    if (!saw_dict_m || cfg.train.dict.m == 0) cfg.train.dict.m = cfg.train.koopman_dim;

    cfg.task.validate();
    cfg.train.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    return parse_config_text(read_file(path));
}

std::string resolve_config_text(const RunConfig& cfg) {
    std::ostringstream out;
    out << "task.kind = " << (cfg.task.kind == TaskKind::Parity ? "parity" : "modsum") << '\n';
    out << "task.prompt_len = " << cfg.task.prompt_len << '\n';
    out << "task.vocab_size = " << cfg.task.vocab_size << '\n';
    out << "task.modulus = " << cfg.task.modulus << '\n';
    out << "task.seed = " << cfg.task.seed << '\n';
    out << "train.alpha = " << format_double(cfg.train.alpha) << '\n';
    out << "train.beta = " << format_double(cfg.train.beta) << '\n';
    if (cfg.train.xi.kind == XiSpec::Kind::Percentile) {
        out << "train.xi = p" << format_double(cfg.train.xi.value) << '\n';
    } else {
        out << "train.xi = " << format_double(cfg.train.xi.value) << '\n';
    }
    out << "train.clip_eps = " << format_double(cfg.train.clip_eps) << '\n';
    out << "train.group_size = " << cfg.train.group_size << '\n';
    out << "train.batch_prompts = " << cfg.train.batch_prompts << '\n';
    out << "train.lr = " << format_double(cfg.train.lr) << '\n';
    out << "train.steps = " << cfg.train.steps << '\n';
    out << "train.temperature = " << format_double(cfg.train.temperature) << '\n';
    out << "train.m = " << cfg.train.koopman_dim << '\n';
    if (cfg.train.rcond < 0.0) out << "train.rcond = auto\n";
    else out << "train.rcond = " << format_double(cfg.train.rcond) << '\n';
    out << "train.gap_tol = " << format_double(cfg.train.gap_tol) << '\n';
    out << "train.grad_mode = "
        << (cfg.train.grad_mode == GradMode::Pathwise ? "pathwise" : "scorefunction") << '\n';
    out << "train.ratio = " << (cfg.train.ratio == RatioKind::Token ? "token" : "sequence")
        << '\n';
    out << "train.kl_sign = " << (cfg.train.kl_sign == KlSign::Penalty ? "penalty" : "literal")
        << '\n';
    out << "train.minibatch = " << cfg.train.minibatch << '\n';
    out << "train.max_len = " << cfg.train.max_len << '\n';
    out << "train.hidden_dim = " << cfg.train.hidden_dim << '\n';
    out << "train.embed_dim = " << cfg.train.embed_dim << '\n';
    out << "train.seed = " << cfg.train.seed << '\n';
    out << "dict.m = " << cfg.train.dict.m << '\n';
    out << "dict.lr = " << format_double(cfg.train.dict.lr) << '\n';
    out << "dict.batch = " << cfg.train.dict.batch << '\n';
    out << "dict.steps = " << cfg.train.dict.steps << '\n';
    out << "dict.beta1 = " << format_double(cfg.train.dict.beta1) << '\n';
    out << "dict.beta2 = " << format_double(cfg.train.dict.beta2) << '\n';
    out << "dict.optimizer = "
        << (cfg.train.dict.optimizer == DictTrainConfig::Optimizer::Adam ? "adam" : "sgd")
        << '\n';
    out << "dict.seed = " << cfg.train.dict.seed << '\n';
    return out.str();
}

// ---- metrics -----------------------------------------------------------------

const char* const kMetricsHeader =
    "step,mean_reward,mean_dsd,mean_entropy,mean_response_length,grad_norm,"
    "clipped_fraction,kl_set_size,loss_surrogate,loss_xp,loss_kl";

std::string metrics_csv(const std::vector<StepMetrics>& trace) {
    std::ostringstream out;
    out << kMetricsHeader << '\n';
    for (const StepMetrics& m : trace) {
        out << m.step << ',' << format_double(m.mean_reward) << ','
            << format_double(m.mean_dsd) << ',' << format_double(m.mean_entropy) << ','
            << format_double(m.mean_response_length) << ',' << format_double(m.grad_norm)
            << ',' << format_double(m.clipped_fraction) << ',' << m.kl_set_size << ','
            << format_double(m.loss_surrogate) << ',' << format_double(m.loss_xp) << ','
            << format_double(m.loss_kl) << '\n';
    }
    return out.str();
}

void save_metrics_csv(const std::vector<StepMetrics>& trace, const std::string& path) {
    atomic_write(path, metrics_csv(trace));
}

std::vector<std::pair<double, double>> load_entropy_reward_points(const std::string& path) {
    const std::vector<std::string> lines = split_lines(read_file(path));
    if (lines.empty()) throw ParseError(path + ": empty metrics file");

    std::vector<std::string> columns;
    {
        std::istringstream ss(lines[0]);
        std::string col;
        while (std::getline(ss, col, ',')) columns.push_back(col);
    }
    int h_col = -1, r_col = -1;
    for (std::size_t j = 0; j < columns.size(); ++j) {
        if (columns[j] == "mean_entropy") h_col = static_cast<int>(j);
        if (columns[j] == "mean_reward") r_col = static_cast<int>(j);
    }
    if (h_col < 0 || r_col < 0) {
        throw ParseError(path + ": metrics header lacks mean_entropy/mean_reward");
    }

    std::vector<std::pair<double, double>> points;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ss(lines[i]);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (static_cast<int>(cells.size()) <= std::max(h_col, r_col)) {
            throw ParseError(path + ":" + std::to_string(i + 1) + ": short row");
        }
        char* end = nullptr;
        const double h = std::strtod(cells[h_col].c_str(), &end);
        const double r = std::strtod(cells[r_col].c_str(), &end);
        points.emplace_back(h, r);
    }
    return points;
}

} // namespace relax
