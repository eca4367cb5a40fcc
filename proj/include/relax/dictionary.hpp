#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "relax/errors.hpp"
#include "relax/trajectory.hpp"

namespace relax {

// Observable map g(x) = sigmoid(W x). Once frozen the weights are immutable;
// freezing is one-way.
class KoopmanDictionary {
public:
    explicit KoopmanDictionary(Eigen::MatrixXd weights);

    // sigmoid(W x), stable for large |pre-activations|.
    Eigen::VectorXd apply(const Eigen::VectorXd& x) const;

    // g applied to every row of a trajectory; returns m x T, column t = g(row t).
    Eigen::MatrixXd map_rows(const Eigen::MatrixXd& states) const;

    const Eigen::MatrixXd& weights() const { return W_; }
    int observable_dim() const { return static_cast<int>(W_.rows()); }
    int state_dim() const { return static_cast<int>(W_.cols()); }
    bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }

    // Training-time mutator. Throws FrozenDictionary after freeze().
    void set_weights(const Eigen::MatrixXd& weights);

private:
    Eigen::MatrixXd W_; // m x d
    bool frozen_ = false;
};

struct DictTrainConfig {
    int m = 8;             // observable dimension
    double lr = 1e-4;
    int batch = 64;        // trajectories per step; 0 = full corpus
    int steps = 300;
    double beta1 = 0.9;
    double beta2 = 0.999;
    std::uint64_t seed = 0;
    enum class Optimizer { Adam, Sgd } optimizer = Optimizer::Adam;

    void validate() const;
};

// One spectral-residual evaluation on a trajectory batch: the batch operator,
// its eigenvectors, and the loss they imply.
struct OperatorEstimate {
    double loss = 0.0;
    Eigen::MatrixXd K;    // m x m
    Eigen::MatrixXcd Phi; // unit columns, canonical order
};

struct DictFitResult {
    KoopmanDictionary dictionary;   // frozen
    std::vector<double> loss_trace; // corpus loss at init, then after each step
};

// Mean over trajectories of ||(Vplus - K V)^T Phi||_F^2 with K the batch
// least-squares operator and Phi its eigenvectors.
double residual_loss(const KoopmanDictionary& dict,
                     const std::vector<HiddenTrajectory>& batch);

OperatorEstimate residual_loss_eval(const KoopmanDictionary& dict,
                                    const std::vector<HiddenTrajectory>& batch);

// Same loss with (K, Phi) supplied externally instead of re-estimated. This is
// the objective the gradient below differentiates, so it doubles as the
// finite-difference oracle surface.
double frozen_operator_loss(const KoopmanDictionary& dict,
                            const std::vector<HiddenTrajectory>& batch,
                            const Eigen::MatrixXd& K,
                            const Eigen::MatrixXcd& Phi);

// d(residual_loss)/dW holding K and Phi fixed at their current-batch values;
// gradient flows through the snapshot matrices only.
Eigen::MatrixXd loss_gradient(const KoopmanDictionary& dict,
                              const std::vector<HiddenTrajectory>& batch);

// Seeded uniform init on [-1/sqrt(d), 1/sqrt(d)].
Eigen::MatrixXd initial_dictionary_weights(int m, int d, std::uint64_t seed);

// Fits W on mini-batches of trajectories, then freezes. Deterministic per
// seed. loss_trace holds the full-corpus loss before training and after each
// step (length steps + 1).
DictFitResult fit_dictionary(const std::vector<HiddenTrajectory>& trajectories,
                             const DictTrainConfig& cfg);

} // namespace relax
