#pragma once

#include <optional>
#include <vector>

#include "regtrack/gm.hpp"

namespace regtrack {

/// An i.i.d. cluster multitarget density: cardinality PMF over 0..N_max and a
/// normalized spatial PDF shared by all targets.
struct IidClusterDensity {
    Vec card_pmf;             // length N_max + 1
    GaussianMixture spatial;  // normalized; may be empty only when p(0) = 1

    int n_max() const { return static_cast<int>(card_pmf.size()) - 1; }
    double expected_cardinality() const;
    /// Cardinality MAP estimate; smallest index on ties.
    int map_cardinality() const;
    /// Throws std::invalid_argument when the invariants are violated.
    void validate(double tol = 1e-9) const;
};

struct MotionModel {
    Mat transition;          // F, 4x4
    Mat process_noise;       // Q, 4x4 PSD
    double survival_prob = 1.0;
    IidClusterDensity birth;  // birth cardinality PMF + normalized birth GM
};

/// Constant-velocity (white noise acceleration) model on [xi, xi_dot, eta, eta_dot].
MotionModel make_wna_motion(double dt, double sigma_accel, double survival_prob,
                            IidClusterDensity birth);

struct SensorModel {
    enum class Kind { linear, range_bearing };

    Kind kind = Kind::linear;
    Mat noise;                 // R, 2x2 SPD
    double detection_prob = 1.0;
    double clutter_rate = 0.0;  // expected clutter count per scan
    double region_area = 1.0;   // surveillance region area, clutter is spatially uniform

    Eigen::Index meas_dim() const { return 2; }
    Vec predict(const Vec& state) const;          // h(x)
    Mat jacobian(const Vec& state) const;         // dh/dx at state
    Vec innovation(const Vec& z, const Vec& predicted) const;  // bearing wrapped
    /// Clutter spatial PDF evaluated at a measurement (position-uniform clutter).
    double clutter_density(const Vec& z) const;
};

/// CPHD prediction: survival-thinned cardinality convolved with the birth
/// cardinality, spatial components propagated through the motion model with
/// the birth mixture appended.
IidClusterDensity cphd_predict(const IidClusterDensity& prior, const MotionModel& motion);

/// GM-CPHD correction with elementary-symmetric-function cardinality update.
/// Works for linear and range-bearing (EKF) sensors. merge_prune is applied to
/// the corrected spatial mixture.
IidClusterDensity cphd_correct(const IidClusterDensity& predicted,
                               const std::vector<Vec>& measurements, const SensorModel& sensor,
                               const MergePruneConfig& reduction = {});

/// MAP cardinality estimate, then the means of that many highest-weight
/// spatial components (document order on weight ties).
std::vector<Vec> extract_states(const IidClusterDensity& density);

/// Truncated-Poisson PMF over 0..n_max, renormalized.
Vec truncated_poisson_pmf(double mean, int n_max);

}  // namespace regtrack
