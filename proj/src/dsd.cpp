#include "relax/dsd.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

namespace relax {

namespace {

double population_variance(const Eigen::VectorXd& values) {
    const Eigen::Index n = values.size();
    if (n == 0) return 0.0;
    const double mean = values.mean();
    return (values.array() - mean).square().sum() / static_cast<double>(n);
}

double smallest_pairwise_gap(const Eigen::VectorXd& values) {
    const Eigen::Index n = values.size();
    if (n < 2) return std::numeric_limits<double>::infinity();
    std::vector<double> sorted(values.data(), values.data() + n);
    std::sort(sorted.begin(), sorted.end());
    double gap = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        gap = std::min(gap, sorted[i] - sorted[i - 1]);
    }
    return gap;
}

void require_dsd_ready(const HiddenTrajectory& traj, const KoopmanDictionary& dict) {
    if (traj.steps() - 1 < 2) {
        throw TooShort("dispersion needs at least two snapshot columns (T >= 3)");
    }
    if (!dict.frozen()) throw Error("dictionary must be frozen before scoring");
}

} // namespace

DsdReport dsd(const HiddenTrajectory& traj, const KoopmanDictionary& dict,
              const DsdOptions& opts) {
    require_dsd_ready(traj, dict);

    const SnapshotPair snap = build_snapshots(traj, dict);
    KoopmanModel model = estimate_koopman(snap, opts.rcond);
    spectrum(model);

    DsdReport report;
    report.magnitudes = model.eigenvalues.cwiseAbs();

    Eigen::VectorXd retained = report.magnitudes;
    if (opts.filter_eps.has_value()) {
        report.filtered = true;
        const KoopmanModel kept = filter_spurious(model, snap, *opts.filter_eps);
        if (kept.eigenvalues.size() == 0) {
            throw EmptySpectrum("residual filter removed every eigenpair");
        }
        retained = kept.eigenvalues.cwiseAbs();
    }
    report.retained = static_cast<int>(retained.size());
    report.dsd = population_variance(retained);
    report.eigengap = smallest_pairwise_gap(retained);
    return report;
}

DsdGradient dsd_gradient(const HiddenTrajectory& traj, const KoopmanDictionary& dict,
                         double rcond, double gap_tol) {
    require_dsd_ready(traj, dict);

    const int T = traj.steps();
    const int n = T - 1;
    const int m = dict.observable_dim();
    const int d = dict.state_dim();
    if (rcond < 0.0) rcond = default_rcond(m, n);

    const SnapshotPair snap = build_snapshots(traj, dict);

    // Rank / conditioning check: the pseudoinverse derivative below assumes the
    // retained singular subspace is stable, so every singular value must clear
    // the cutoff with margin.
    {
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(snap.current);
        const Eigen::VectorXd& sv = svd.singularValues();
        if (n < m || sv.minCoeff() < 10.0 * rcond * sv.maxCoeff()) {
            throw IllConditioned("snapshot matrix is rank-deficient or near the cutoff");
        }
    }

    KoopmanModel model = estimate_koopman(snap, rcond);
    spectrum(model);

    DsdReport report;
    report.magnitudes = model.eigenvalues.cwiseAbs();
    report.retained = m;
    report.dsd = population_variance(report.magnitudes);
    report.eigengap = smallest_pairwise_gap(report.magnitudes);
    if (report.eigengap <= gap_tol) {
        throw DegenerateSpectrum("eigenvalue magnitudes are not separated");
    }

    // Left eigenvectors: eigenvectors of K^T matched to the canonical order of
    // the right ones. Magnitude separation makes the matching by sort position
    // unambiguous (up to exact conjugate pairs, which sort consistently).
    KoopmanModel left;
    left.K = model.K.transpose();
    spectrum(left);

    // Variance sensitivities: dS/d|lambda_k| = (2/m)(|lambda_k| - mean).
    const double mean_mag = report.magnitudes.mean();
    Eigen::VectorXd g = (2.0 / m) * (report.magnitudes.array() - mean_mag);

    // Adjoint of K: dS = tr(Kbar^T dK) with
    //   Kbar = Re( sum_k c_k phi_k psi_k^T )^T,
    //   c_k  = g_k conj(lambda_k) / (|lambda_k| psi_k^T phi_k),
    // psi_k the matched eigenvector of K^T. Zero-magnitude eigenvalues carry no
    // gradient.
    Eigen::MatrixXcd accum = Eigen::MatrixXcd::Zero(m, m);
    for (int k = 0; k < m; ++k) {
        const std::complex<double> lambda = model.eigenvalues(k);
        const double mag = std::abs(lambda);
        if (mag == 0.0 || g(k) == 0.0) continue;
        const Eigen::VectorXcd phi = model.eigenvectors.col(k);
        const Eigen::VectorXcd psi = left.eigenvectors.col(k);
        if (std::abs(left.eigenvalues(k) - lambda) > 1e-8 * std::max(1.0, mag)) {
            throw DegenerateSpectrum("left/right spectra did not pair up");
        }
        const std::complex<double> denom = psi.cwiseProduct(phi).sum();
        if (std::abs(denom) < 1e-12) {
            throw DegenerateSpectrum("left/right eigenvector pairing is singular");
        }
        const std::complex<double> ck = g(k) * std::conj(lambda) / (mag * denom);
        accum.noalias() += ck * (phi * psi.transpose());
    }
    const Eigen::MatrixXd Kbar = accum.real().transpose();

    // Pull the adjoint back through K = N C^+ with C full row rank:
    //   C^+ = C^T H, H = (C C^T)^{-1}
    //   Nbar = Kbar H C
    //   Cbar = H D^T - H C D H C - H D^T C^T H C,  D = N^T Kbar
    const Eigen::MatrixXd& C = snap.current;
    const Eigen::MatrixXd& N = snap.next;
    const Eigen::MatrixXd H = (C * C.transpose()).ldlt().solve(Eigen::MatrixXd::Identity(m, m));
    const Eigen::MatrixXd D = N.transpose() * Kbar; // n x m
    const Eigen::MatrixXd HC = H * C;               // m x n

    const Eigen::MatrixXd Nbar = Kbar * HC;
    const Eigen::MatrixXd Cbar =
        H * D.transpose() - (H * (C * D)) * HC - ((H * D.transpose()) * C.transpose()) * HC;

    // Through the dictionary columns: v = sigmoid(W x), dv = (v(1-v)) .* (W dx).
    const Eigen::MatrixXd s_cur = C.array() * (1.0 - C.array());
    const Eigen::MatrixXd s_nxt = N.array() * (1.0 - N.array());

    Eigen::MatrixXd states_grad = Eigen::MatrixXd::Zero(T, d);
    states_grad.topRows(n) += (s_cur.array() * Cbar.array()).matrix().transpose() * dict.weights();
    states_grad.bottomRows(n) += (s_nxt.array() * Nbar.array()).matrix().transpose() * dict.weights();

    return DsdGradient{std::move(states_grad), std::move(report)};
}

} // namespace relax
