#pragma once

// Shared fixtures: planted observable-linear systems, finite differences, and
// small matrix helpers used across the test binaries.

#include <cmath>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "relax/dictionary.hpp"
#include "relax/rng.hpp"
#include "relax/spectral.hpp"
#include "relax/trajectory.hpp"

namespace testkit {

inline double logit(double z) { return std::log(z / (1.0 - z)); }

// Orbit z_{t+1} = A z_t from z0; columns are steps.
inline Eigen::MatrixXd iterate(const Eigen::MatrixXd& A, const Eigen::VectorXd& z0, int T) {
    Eigen::MatrixXd orbit(z0.size(), T);
    Eigen::VectorXd z = z0;
    for (int t = 0; t < T; ++t) {
        orbit.col(t) = z;
        z = A * z;
    }
    return orbit;
}

// Snapshot pair straight from an orbit, bypassing any dictionary.
inline relax::SnapshotPair raw_snapshots(const Eigen::MatrixXd& A, const Eigen::VectorXd& z0,
                                         int T) {
    const Eigen::MatrixXd orbit = iterate(A, z0, T);
    relax::SnapshotPair snap;
    snap.current = orbit.leftCols(T - 1);
    snap.next = orbit.rightCols(T - 1);
    return snap;
}

// Full-row-rank dictionary weights for planted constructions.
inline Eigen::MatrixXd planted_weights(int m, int d, relax::Rng& rng) {
    Eigen::MatrixXd W(m, d);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < d; ++j) W(i, j) = rng.uniform(-1.0, 1.0);
    }
    W += 0.5 * Eigen::MatrixXd::Identity(m, d); // keep the rows independent
    return W;
}

// States x_t with sigmoid(W x_t) = z_t exactly: x_t is the min-norm solution
// of W x = logit(z). Requires every orbit entry in (0, 1).
inline relax::HiddenTrajectory states_for_orbit(const Eigen::MatrixXd& W,
                                                const Eigen::MatrixXd& orbit) {
    const int m = static_cast<int>(W.rows());
    const int T = static_cast<int>(orbit.cols());
    const Eigen::MatrixXd gram = W * W.transpose();
    const Eigen::LLT<Eigen::MatrixXd> llt(gram);
    relax::HiddenTrajectory traj;
    traj.states.resize(T, W.cols());
    for (int t = 0; t < T; ++t) {
        Eigen::VectorXd target(m);
        for (int i = 0; i < m; ++i) target(i) = logit(orbit(i, t));
        traj.states.row(t) = (W.transpose() * llt.solve(target)).transpose();
    }
    return traj;
}

// Trajectory whose observables under W evolve exactly as z_{t+1} = A z_t.
inline relax::HiddenTrajectory observable_linear_trajectory(const Eigen::MatrixXd& W,
                                                            const Eigen::MatrixXd& A,
                                                            const Eigen::VectorXd& z0, int T) {
    return states_for_orbit(W, iterate(A, z0, T));
}

// Nonnegative generator with distinct eigenvalues near 1 and row sums <= 1,
// so orbits started inside (0, 1)^m stay there.
struct PositiveSystem {
    Eigen::MatrixXd A;
    Eigen::VectorXd z0;
};

inline PositiveSystem positive_system(int m, relax::Rng& rng, double coupling = 0.01) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
    for (int i = 0; i < m; ++i) {
        A(i, i) = 0.90 + 0.08 * static_cast<double>(i) / std::max(1, m - 1) +
                  0.005 * rng.uniform();
    }
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < m; ++j) {
            if (i != j) A(i, j) = coupling * rng.uniform();
        }
    }
    // keep row sums at or below one
    for (int i = 0; i < m; ++i) {
        const double row = A.row(i).sum();
        if (row > 1.0) A.row(i) /= row;
    }
    PositiveSystem sys;
    sys.A = A;
    sys.z0.resize(m);
    for (int i = 0; i < m; ++i) sys.z0(i) = rng.uniform(0.4, 0.85);
    return sys;
}

// Central finite differences of a scalar function of a matrix.
inline Eigen::MatrixXd finite_difference(const std::function<double(const Eigen::MatrixXd&)>& f,
                                         const Eigen::MatrixXd& X, double h = 1e-5) {
    Eigen::MatrixXd grad(X.rows(), X.cols());
    Eigen::MatrixXd probe = X;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        for (Eigen::Index j = 0; j < X.cols(); ++j) {
            probe(i, j) = X(i, j) + h;
            const double up = f(probe);
            probe(i, j) = X(i, j) - h;
            const double down = f(probe);
            probe(i, j) = X(i, j);
            grad(i, j) = (up - down) / (2.0 * h);
        }
    }
    return grad;
}

// Relative agreement of two gradients: max |a-f| over a floor tied to the
// oracle's own scale.
inline double gradient_rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& fd) {
    const double scale = std::max({fd.cwiseAbs().maxCoeff(), analytic.cwiseAbs().maxCoeff(),
                                   1e-12});
    return (analytic - fd).cwiseAbs().maxCoeff() / scale;
}

} // namespace testkit
