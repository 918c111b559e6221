#include "regtrack/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "regtrack/geometry.hpp"

namespace regtrack {

// Shortest augmenting path assignment (Jonker-Volgenant style), O(n^3).
std::vector<int> solve_assignment(const Mat& cost) {
    const int n = static_cast<int>(cost.rows());
    if (cost.cols() != n) throw std::invalid_argument("solve_assignment: matrix must be square");
    const double inf = std::numeric_limits<double>::infinity();

    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> way(n + 1, 0), match(n + 1, 0);  // match[col] = row, 1-based
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = match[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> row_to_col(n, -1);
    for (int j = 1; j <= n; ++j) {
        if (match[j] != 0) row_to_col[match[j] - 1] = j - 1;
    }
    return row_to_col;
}

double ospa(const std::vector<Eigen::Vector2d>& estimated,
            const std::vector<Eigen::Vector2d>& truth, const OspaConfig& cfg) {
    if (cfg.order < 1.0 || !(cfg.cutoff > 0.0)) {
        throw std::invalid_argument("ospa: order must be >= 1 and cutoff positive");
    }
    const std::size_t m = std::min(estimated.size(), truth.size());
    const std::size_t n = std::max(estimated.size(), truth.size());
    if (n == 0) return 0.0;
    const double cp = std::pow(cfg.cutoff, cfg.order);
    if (m == 0) return cfg.cutoff;

    const auto& small = (estimated.size() <= truth.size()) ? estimated : truth;
    const auto& large = (estimated.size() <= truth.size()) ? truth : estimated;

    // Square matrix padded with dummy rows that cost the cutoff penalty.
    Mat cost(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (i < m) {
                const double d = (small[i] - large[j]).norm();
                cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                    std::pow(std::min(d, cfg.cutoff), cfg.order);
            } else {
                cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = cp;
            }
        }
    }
    const auto assignment = solve_assignment(cost);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += cost(static_cast<Eigen::Index>(i), assignment[i]);
    }
    return std::pow(total / static_cast<double>(n), 1.0 / cfg.order);
}

RegistrationError registration_error(const EdgeTransform& estimate, const EdgeTransform& truth) {
    RegistrationError e;
    e.drift_error = (truth.drift - estimate.drift).norm();
    e.orientation_error = wrap_angle(truth.orientation - estimate.orientation);
    return e;
}

}  // namespace regtrack
