#include "relax/dictionary.hpp"

#include <cmath>
#include <string>
#include <vector>

#include "relax/rng.hpp"
#include "relax/spectral.hpp"

namespace relax {

namespace {

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace

KoopmanDictionary::KoopmanDictionary(Eigen::MatrixXd weights) : W_(std::move(weights)) {
    if (W_.size() == 0) throw DimensionMismatch("dictionary weights are empty");
    if (!W_.allFinite()) throw NumericalFailure("dictionary weights are not finite");
}

Eigen::VectorXd KoopmanDictionary::apply(const Eigen::VectorXd& x) const {
    if (x.size() != W_.cols()) {
        throw DimensionMismatch("dictionary expects d=" + std::to_string(W_.cols()) +
                                ", input has " + std::to_string(x.size()));
    }
    return (W_ * x).unaryExpr([](double z) { return sigmoid(z); });
}

Eigen::MatrixXd KoopmanDictionary::map_rows(const Eigen::MatrixXd& states) const {
    if (states.cols() != W_.cols()) {
        throw DimensionMismatch("dictionary expects d=" + std::to_string(W_.cols()) +
                                ", states have d=" + std::to_string(states.cols()));
    }
    return (W_ * states.transpose()).unaryExpr([](double z) { return sigmoid(z); });
}

void KoopmanDictionary::set_weights(const Eigen::MatrixXd& weights) {
    if (frozen_) throw FrozenDictionary("dictionary is frozen");
    if (weights.rows() != W_.rows() || weights.cols() != W_.cols()) {
        throw DimensionMismatch("weight update changes dictionary shape");
    }
    if (!weights.allFinite()) throw NumericalFailure("weight update is not finite");
    W_ = weights;
}

void DictTrainConfig::validate() const {
    if (m < 1) throw ConfigError("dictionary m must be positive");
    if (lr <= 0.0) throw ConfigError("dictionary lr must be positive");
    if (batch < 0) throw ConfigError("dictionary batch must be nonnegative");
    if (steps < 0) throw ConfigError("dictionary steps must be nonnegative");
    if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0) {
        throw ConfigError("dictionary optimizer moments must lie in (0, 1)");
    }
}

namespace {

void check_batch(const KoopmanDictionary& dict, const std::vector<HiddenTrajectory>& batch) {
    if (batch.empty()) throw Error("trajectory batch is empty");
    for (const auto& traj : batch) {
        if (traj.dim() != dict.state_dim()) {
            throw DimensionMismatch("batch trajectory dimension does not match dictionary");
        }
        if (traj.steps() - 1 < 2) {
            throw TooShort("batch trajectories need at least three steps");
        }
        if (!traj.states.allFinite()) {
            throw NumericalFailure("batch trajectory contains non-finite entries");
        }
    }
}

// Concatenates per-trajectory snapshot columns into one wide pair, so ragged
// lengths pose no problem.
SnapshotPair batch_snapshots(const KoopmanDictionary& dict,
                             const std::vector<HiddenTrajectory>& batch) {
    int total = 0;
    for (const auto& traj : batch) total += traj.steps() - 1;
    SnapshotPair out;
    out.current.resize(dict.observable_dim(), total);
    out.next.resize(dict.observable_dim(), total);
    int at = 0;
    for (const auto& traj : batch) {
        const Eigen::MatrixXd mapped = dict.map_rows(traj.states);
        const int n = traj.steps() - 1;
        out.current.middleCols(at, n) = mapped.leftCols(n);
        out.next.middleCols(at, n) = mapped.rightCols(n);
        at += n;
    }
    return out;
}

double projected_residual_sq(const SnapshotPair& snap, const Eigen::MatrixXd& K,
                             const Eigen::MatrixXcd& Phi) {
    // || E^T Phi ||_F^2 with real E = next - K * current.
    const Eigen::MatrixXd E = snap.next - K * snap.current;
    const Eigen::MatrixXd re = E.transpose() * Phi.real();
    const Eigen::MatrixXd im = E.transpose() * Phi.imag();
    return re.squaredNorm() + im.squaredNorm();
}

} // namespace

OperatorEstimate residual_loss_eval(const KoopmanDictionary& dict,
                                    const std::vector<HiddenTrajectory>& batch) {
    check_batch(dict, batch);
    const SnapshotPair snap = batch_snapshots(dict, batch);
    KoopmanModel model = estimate_koopman(snap);
    spectrum(model);
    OperatorEstimate est;
    est.K = model.K;
    est.Phi = model.eigenvectors;
    est.loss = projected_residual_sq(snap, est.K, est.Phi) / static_cast<double>(batch.size());
    return est;
}

double residual_loss(const KoopmanDictionary& dict,
                     const std::vector<HiddenTrajectory>& batch) {
    return residual_loss_eval(dict, batch).loss;
}

double frozen_operator_loss(const KoopmanDictionary& dict,
                            const std::vector<HiddenTrajectory>& batch,
                            const Eigen::MatrixXd& K, const Eigen::MatrixXcd& Phi) {
    check_batch(dict, batch);
    const SnapshotPair snap = batch_snapshots(dict, batch);
    return projected_residual_sq(snap, K, Phi) / static_cast<double>(batch.size());
}

Eigen::MatrixXd loss_gradient(const KoopmanDictionary& dict,
                              const std::vector<HiddenTrajectory>& batch) {
    check_batch(dict, batch);
    const OperatorEstimate est = residual_loss_eval(dict, batch);

    // With M = Re(Phi Phi^H) and e_t = next_t - K current_t the loss
    // differential is (2/B) sum_t de_t^T M e_t; the snapshot columns carry the
    // only W dependence:
    //   dL/dW = (2/B) sum_t [ (s+_t .* M e_t) x_{t+1}^T - (s_t .* K^T M e_t) x_t^T ]
    // where s = v .* (1 - v) is the sigmoid derivative at each column.
    const Eigen::MatrixXd M =
        (est.Phi * est.Phi.adjoint()).real();
    const double scale = 2.0 / static_cast<double>(batch.size());

    Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(dict.observable_dim(), dict.state_dim());
    for (const auto& traj : batch) {
        const Eigen::MatrixXd mapped = dict.map_rows(traj.states); // m x T
        const int n = traj.steps() - 1;
        const Eigen::MatrixXd cur = mapped.leftCols(n);
        const Eigen::MatrixXd nxt = mapped.rightCols(n);
        const Eigen::MatrixXd E = nxt - est.K * cur;        // m x n
        const Eigen::MatrixXd ME = M * E;                   // m x n
        const Eigen::MatrixXd KME = est.K.transpose() * ME; // m x n

        const Eigen::MatrixXd s_cur = cur.array() * (1.0 - cur.array());
        const Eigen::MatrixXd s_nxt = nxt.array() * (1.0 - nxt.array());

        // x_t rows: 0..n-1 feed `current`, 1..n feed `next`.
        grad.noalias() += (s_nxt.array() * ME.array()).matrix() * traj.states.middleRows(1, n);
        grad.noalias() -= (s_cur.array() * KME.array()).matrix() * traj.states.middleRows(0, n);
    }
    return scale * grad;
}

Eigen::MatrixXd initial_dictionary_weights(int m, int d, std::uint64_t seed) {
    if (m < 1 || d < 1) throw DimensionMismatch("dictionary dimensions must be positive");
    Rng rng(Rng::derive(seed, 0x44494354ULL)); // "DICT"
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    Eigen::MatrixXd W(m, d);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < d; ++j) {
            W(i, j) = rng.uniform(-bound, bound);
        }
    }
    return W;
}

DictFitResult fit_dictionary(const std::vector<HiddenTrajectory>& trajectories,
                             const DictTrainConfig& cfg) {
    cfg.validate();
    if (trajectories.empty()) throw Error("cannot fit a dictionary on an empty corpus");
    const int d = trajectories.front().dim();

    KoopmanDictionary dict(initial_dictionary_weights(cfg.m, d, cfg.seed));
    check_batch(dict, trajectories);

    Rng rng(Rng::derive(cfg.seed, 0x46495453ULL)); // "FITS"
    const std::size_t corpus = trajectories.size();
    const bool full_batch =
        cfg.batch == 0 || static_cast<std::size_t>(cfg.batch) >= corpus;

    std::vector<double> trace;
    trace.reserve(cfg.steps + 1);
    trace.push_back(residual_loss(dict, trajectories));

    Eigen::MatrixXd m1 = Eigen::MatrixXd::Zero(cfg.m, d);
    Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(cfg.m, d);
    const double adam_eps = 1e-8;

    std::vector<HiddenTrajectory> minibatch;
    for (int step = 1; step <= cfg.steps; ++step) {
        const std::vector<HiddenTrajectory>* batch = &trajectories;
        if (!full_batch) {
            minibatch.clear();
            for (int i = 0; i < cfg.batch; ++i) {
                minibatch.push_back(trajectories[rng.below(corpus)]);
            }
            batch = &minibatch;
        }

        const Eigen::MatrixXd grad = loss_gradient(dict, *batch);
        if (cfg.optimizer == DictTrainConfig::Optimizer::Adam) {
            m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad;
            m2 = cfg.beta2 * m2.array().matrix() +
                 (1.0 - cfg.beta2) * grad.array().square().matrix();
            const double c1 = 1.0 - std::pow(cfg.beta1, step);
            const double c2 = 1.0 - std::pow(cfg.beta2, step);
            const Eigen::MatrixXd update =
                (m1.array() / c1) / ((m2.array() / c2).sqrt() + adam_eps);
            dict.set_weights(dict.weights() - cfg.lr * update.matrix());
        } else {
            dict.set_weights(dict.weights() - cfg.lr * grad);
        }
        trace.push_back(residual_loss(dict, trajectories));
    }

    dict.freeze();
    return DictFitResult{std::move(dict), std::move(trace)};
}

} // namespace relax
