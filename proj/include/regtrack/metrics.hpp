#pragma once

#include <vector>

#include <Eigen/Dense>

#include "regtrack/fusion.hpp"

namespace regtrack {

struct OspaConfig {
    double order = 2.0;   // p >= 1
    double cutoff = 50.0; // c > 0, meters
};

/// Optimal subpattern assignment distance between two planar point sets:
/// optimal assignment on the cutoff-truncated cost matrix, cardinality
/// penalty c per unmatched point, p-norm aggregation. Both sets empty -> 0.
double ospa(const std::vector<Eigen::Vector2d>& estimated,
            const std::vector<Eigen::Vector2d>& truth, const OspaConfig& cfg);

/// Minimum-cost assignment of a square cost matrix; returns column index per
/// row. Costs must be finite.
std::vector<int> solve_assignment(const Mat& cost);

struct RegistrationError {
    double drift_error = 0.0;        // meters, Euclidean
    double orientation_error = 0.0;  // radians, wrapped to [-pi, pi), truth minus estimate
};

RegistrationError registration_error(const EdgeTransform& estimate, const EdgeTransform& truth);

}  // namespace regtrack
