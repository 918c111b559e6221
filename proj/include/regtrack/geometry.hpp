#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace regtrack {

/// Wraps an angle to [-pi, pi).
inline double wrap_angle(double a) {
    const double two_pi = 2.0 * M_PI;
    a = std::fmod(a + M_PI, two_pi);
    if (a < 0.0) a += two_pi;
    return a - M_PI;
}

/// 2x2 planar rotation.
inline Eigen::Matrix2d rotation2(double gamma) {
    const double c = std::cos(gamma), s = std::sin(gamma);
    Eigen::Matrix2d r;
    r << c, -s, s, c;
    return r;
}

/// 4x4 rotation acting on the state [xi, xi_dot, eta, eta_dot]: positions and
/// velocities rotate by the same planar angle.
inline Eigen::Matrix4d rotation_matrix(double gamma) {
    const double c = std::cos(gamma), s = std::sin(gamma);
    Eigen::Matrix4d m;
    m << c, 0, -s, 0,
         0, c, 0, -s,
         s, 0, c, 0,
         0, s, 0, c;
    return m;
}

/// d/dgamma of rotation_matrix; equals rotation_matrix(gamma + pi/2).
inline Eigen::Matrix4d rotation_matrix_derivative(double gamma) {
    return rotation_matrix(gamma + 0.5 * M_PI);
}

/// Lift matrix mapping a planar drift [xi, eta] into state coordinates.
inline Eigen::Matrix<double, 4, 2> drift_lift() {
    Eigen::Matrix<double, 4, 2> t;
    t << 1, 0,
         0, 0,
         0, 1,
         0, 0;
    return t;
}

inline Eigen::Vector4d lift_drift(const Eigen::Vector2d& v) {
    return Eigen::Vector4d(v(0), 0.0, v(1), 0.0);
}

inline Eigen::Vector2d project_drift(const Eigen::Vector4d& v) {
    return Eigen::Vector2d(v(0), v(2));
}

inline Eigen::Vector2d state_position(const Eigen::Vector4d& x) {
    return Eigen::Vector2d(x(0), x(2));
}

}  // namespace regtrack
