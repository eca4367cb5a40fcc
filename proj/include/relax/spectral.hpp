#pragma once

#include <complex>

#include <Eigen/Dense>

#include "relax/dictionary.hpp"
#include "relax/errors.hpp"
#include "relax/trajectory.hpp"

namespace relax {

// Matched observable snapshots: column t of `current` is g(x_t) and column t
// of `next` is g(x_{t+1}), for t = 0..T-2.
struct SnapshotPair {
    Eigen::MatrixXd current; // m x (T-1)
    Eigen::MatrixXd next;    // m x (T-1)

    int observable_dim() const { return static_cast<int>(current.rows()); }
    int column_count() const { return static_cast<int>(current.cols()); }
};

// Least-squares one-step operator together with its spectral data.
// `eigenvalues` are sorted by descending magnitude, ties broken by descending
// real then descending imaginary part; eigenvector columns are unit-norm with
// the first nonzero component rotated to the positive real axis.
struct KoopmanModel {
    Eigen::MatrixXd K;
    Eigen::VectorXcd eigenvalues;
    Eigen::MatrixXcd eigenvectors;
    Eigen::VectorXd residuals; // unit-eigenvector convention; empty until computed
    int rank = 0;              // effective rank used by the pseudoinverse

    bool has_spectrum() const { return eigenvalues.size() > 0; }
};

// Relative singular-value cutoff used when the caller does not supply one.
double default_rcond(int rows, int cols);

SnapshotPair build_snapshots(const HiddenTrajectory& traj, const KoopmanDictionary& dict);

// Minimizes ||next - K*current||_F over K via the min-norm SVD pseudoinverse;
// singular values below rcond * sigma_max are treated as zero. rcond < 0
// selects default_rcond.
KoopmanModel estimate_koopman(const SnapshotPair& snap, double rcond = -1.0);

// Populates eigenvalues/eigenvectors of model.K in canonical order.
void spectrum(KoopmanModel& model);

// ResDMD residual of an eigenpair candidate: the quadratic form equals
// ||next*v - lambda*current*v|| up to round-off; tiny negative values from
// cancellation are clamped to zero before the square root. `normalized`
// divides by ||current*v||.
double residual(std::complex<double> lambda, const Eigen::VectorXcd& v,
                const SnapshotPair& snap, bool normalized = false);

// Fills model.residuals for every eigenpair (unit eigenvectors).
void compute_residuals(KoopmanModel& model, const SnapshotPair& snap);

// Keeps eigenpairs with residual <= eps_res, preserving order. The result may
// be empty.
KoopmanModel filter_spurious(const KoopmanModel& model, const SnapshotPair& snap,
                             double eps_res);

} // namespace relax
