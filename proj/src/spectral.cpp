#include "relax/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

namespace relax {

void validate_trajectory(const HiddenTrajectory& traj) {
    if (traj.steps() < 2) {
        throw TooShort("trajectory needs at least two steps, got " +
                       std::to_string(traj.steps()));
    }
    if (!traj.states.allFinite()) {
        throw NumericalFailure("trajectory contains non-finite entries");
    }
}

double default_rcond(int rows, int cols) {
    return std::numeric_limits<double>::epsilon() * std::max(rows, cols);
}

SnapshotPair build_snapshots(const HiddenTrajectory& traj, const KoopmanDictionary& dict) {
    validate_trajectory(traj);
    if (dict.state_dim() != traj.dim()) {
        throw DimensionMismatch("dictionary expects d=" + std::to_string(dict.state_dim()) +
                                ", trajectory has d=" + std::to_string(traj.dim()));
    }
    const Eigen::MatrixXd mapped = dict.map_rows(traj.states); // m x T
    const int n = traj.steps() - 1;
    SnapshotPair snap;
    snap.current = mapped.leftCols(n);
    snap.next = mapped.rightCols(n);
    return snap;
}

KoopmanModel estimate_koopman(const SnapshotPair& snap, double rcond) {
    const int m = snap.observable_dim();
    const int n = snap.column_count();
    if (snap.next.rows() != m || snap.next.cols() != n) {
        throw DimensionMismatch("snapshot matrices must have identical shape");
    }
    if (n < 1) throw TooShort("snapshot pair has no columns");
    if (rcond < 0.0) rcond = default_rcond(m, n);
    if (rcond >= 1.0) throw Error("rcond must lie in [0, 1)");

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(snap.current,
                                          Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (!svd.singularValues().allFinite()) {
        throw NumericalFailure("SVD of the snapshot matrix did not converge");
    }

    const Eigen::VectorXd& sv = svd.singularValues();
    const double cutoff = sv.size() > 0 ? rcond * sv(0) : 0.0;
    int rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        if (sv(i) > cutoff && sv(i) > 0.0) ++rank;
    }

    KoopmanModel model;
    model.rank = rank;
    if (rank == 0) {
        model.K = Eigen::MatrixXd::Zero(m, m);
        return model;
    }
    // K = next * pinv(current) restricted to the retained singular directions.
    const Eigen::MatrixXd U = svd.matrixU().leftCols(rank);
    const Eigen::MatrixXd W = svd.matrixV().leftCols(rank);
    const Eigen::VectorXd inv_sv = sv.head(rank).cwiseInverse();
    model.K = snap.next * (W * inv_sv.asDiagonal() * U.transpose());
    return model;
}

namespace {

bool canonical_before(const std::complex<double>& a, const std::complex<double>& b) {
    const double ma = std::abs(a), mb = std::abs(b);
    if (ma != mb) return ma > mb;
    if (a.real() != b.real()) return a.real() > b.real();
    return a.imag() > b.imag();
}

} // namespace

void spectrum(KoopmanModel& model) {
    if (!model.K.allFinite()) throw NumericalFailure("operator has non-finite entries");
    const int m = static_cast<int>(model.K.rows());

    Eigen::EigenSolver<Eigen::MatrixXd> solver(model.K);
    if (solver.info() != Eigen::Success) {
        throw NumericalFailure("eigendecomposition did not converge");
    }

    std::vector<int> order(m);
    std::iota(order.begin(), order.end(), 0);
    const Eigen::VectorXcd vals = solver.eigenvalues();
    std::sort(order.begin(), order.end(),
              [&](int i, int j) { return canonical_before(vals(i), vals(j)); });

    model.eigenvalues.resize(m);
    model.eigenvectors.resize(m, m);
    for (int k = 0; k < m; ++k) {
        model.eigenvalues(k) = vals(order[k]);
        Eigen::VectorXcd v = solver.eigenvectors().col(order[k]);
        const double nrm = v.norm();
        if (nrm > 0.0) v /= nrm;
        // Rotate the first nonzero component onto the positive real axis so
        // the output is unique.
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            const double a = std::abs(v(i));
            if (a > 1e-12) {
                v *= std::conj(v(i)) / a;
                break;
            }
        }
        model.eigenvectors.col(k) = v;
    }
}

double residual(std::complex<double> lambda, const Eigen::VectorXcd& v,
                const SnapshotPair& snap, bool normalized) {
    if (v.size() != snap.observable_dim()) {
        throw DimensionMismatch("eigenvector length does not match snapshot rows");
    }
    const double vnorm = v.norm();
    if (vnorm == 0.0) throw ZeroVector("residual of the zero vector is undefined");

    // Quadratic form
    //   v^H [ N N^T - lambda (C N^T)^H - conj(lambda) C N^T + |lambda|^2 C C^T ] v
    // with C = current, N = next; the Gram products run over the snapshot
    // index. It factors exactly as ||N^T v - lambda C^T v||^2 (the
    // eigenfunction values v picks out of the data must advance by lambda),
    // and the factored evaluation avoids the sqrt(eps) cancellation floor of
    // the expanded form, so no clamp against round-off negatives is needed.
    const Eigen::VectorXd pr = snap.next.transpose() * v.real();   // Re(N^T v)
    const Eigen::VectorXd pi = snap.next.transpose() * v.imag();
    const Eigen::VectorXd qr = snap.current.transpose() * v.real(); // Re(C^T v)
    const Eigen::VectorXd qi = snap.current.transpose() * v.imag();
    const Eigen::VectorXd rr = pr - lambda.real() * qr + lambda.imag() * qi;
    const Eigen::VectorXd ri = pi - lambda.real() * qi - lambda.imag() * qr;
    double res = std::sqrt(rr.squaredNorm() + ri.squaredNorm());
    if (normalized) {
        const double denom = std::sqrt(qr.squaredNorm() + qi.squaredNorm());
        if (denom == 0.0) throw ZeroVector("normalized residual: ||current^T v|| is zero");
        res /= denom;
    }
    return res;
}

void compute_residuals(KoopmanModel& model, const SnapshotPair& snap) {
    if (!model.has_spectrum()) throw Error("spectrum must be populated before residuals");
    const int m = static_cast<int>(model.eigenvalues.size());
    model.residuals.resize(m);
    for (int k = 0; k < m; ++k) {
        model.residuals(k) = residual(model.eigenvalues(k), model.eigenvectors.col(k), snap);
    }
}

KoopmanModel filter_spurious(const KoopmanModel& model, const SnapshotPair& snap,
                             double eps_res) {
    if (!model.has_spectrum()) throw Error("spectrum must be populated before filtering");
    KoopmanModel scored = model;
    compute_residuals(scored, snap);

    std::vector<int> keep;
    for (Eigen::Index k = 0; k < scored.eigenvalues.size(); ++k) {
        if (scored.residuals(k) <= eps_res) keep.push_back(static_cast<int>(k));
    }

    KoopmanModel out;
    out.K = scored.K;
    out.rank = scored.rank;
    out.eigenvalues.resize(keep.size());
    out.eigenvectors.resize(scored.eigenvectors.rows(), keep.size());
    out.residuals.resize(keep.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
        out.eigenvalues(j) = scored.eigenvalues(keep[j]);
        out.eigenvectors.col(j) = scored.eigenvectors.col(keep[j]);
        out.residuals(j) = scored.residuals(keep[j]);
    }
    return out;
}

} // namespace relax
