#pragma once

#include <Eigen/Dense>

#include "relax/errors.hpp"

namespace relax {

// A hidden-state sequence from one rollout. Row t is the state at step t.
struct HiddenTrajectory {
    Eigen::MatrixXd states; // T x d

    int steps() const { return static_cast<int>(states.rows()); }
    int dim() const { return static_cast<int>(states.cols()); }
};

// Throws TooShort when fewer than two steps, NumericalFailure on non-finite
// entries.
void validate_trajectory(const HiddenTrajectory& traj);

} // namespace relax
