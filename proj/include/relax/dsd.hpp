#pragma once

#include <optional>

#include <Eigen/Dense>

#include "relax/dictionary.hpp"
#include "relax/spectral.hpp"
#include "relax/trajectory.hpp"

namespace relax {

struct DsdReport {
    double dsd = 0.0;           // population variance of retained |lambda|
    Eigen::VectorXd magnitudes; // |lambda| of the full spectrum, canonical order
    bool filtered = false;
    int retained = 0;
    double eigengap = 0.0;      // smallest pairwise |lambda| gap among retained;
                                // +inf when fewer than two are retained
};

struct DsdOptions {
    double rcond = -1.0;                 // < 0: default_rcond
    std::optional<double> filter_eps;    // residual filter; diagnostics only
};

// Spectral dispersion of one trajectory: build snapshots under the frozen
// dictionary, estimate the operator, take the spectrum, return the population
// variance of the eigenvalue magnitudes.
DsdReport dsd(const HiddenTrajectory& traj, const KoopmanDictionary& dict,
              const DsdOptions& opts = {});

struct DsdGradient {
    Eigen::MatrixXd states_grad; // T x d, d(dsd)/d(states)
    DsdReport report;
};

// Pathwise derivative of dsd() with respect to the trajectory states, chained
// through the dictionary, the pseudoinverse least squares, and the
// simple-eigenvalue perturbation formula. Requires the magnitude spectrum to
// be separated (eigengap > gap_tol) and the snapshot matrix to be safely full
// rank; throws DegenerateSpectrum / IllConditioned otherwise so the caller can
// fall back to score-function mode.
DsdGradient dsd_gradient(const HiddenTrajectory& traj, const KoopmanDictionary& dict,
                         double rcond = -1.0, double gap_tol = 1e-6);

} // namespace relax
