#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace regtrack {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Raised when a covariance is not symmetric positive definite (after the
/// one-shot jitter repair) or a log/determinant leaves the numeric domain.
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

struct Gaussian {
    Vec mean;
    Mat cov;

    Gaussian() = default;
    Gaussian(Vec m, Mat p) : mean(std::move(m)), cov(std::move(p)) {}

    Eigen::Index dim() const { return mean.size(); }
};

/// Cholesky factor of an SPD matrix plus the quantities every density
/// computation needs. Factorization failure triggers a single jitter of
/// 1e-9*trace(P)/dim on the diagonal; a second failure throws.
class SpdFactor {
public:
    explicit SpdFactor(const Mat& p);

    double log_det() const { return log_det_; }
    /// log det(2*pi*P)
    double log_det_2pi() const;
    /// r' P^-1 r
    double quad_form(const Vec& r) const;
    Vec solve(const Vec& r) const;
    Mat solve(const Mat& r) const;
    Mat inverse() const;
    Eigen::Index dim() const { return llt_.matrixLLT().rows(); }

private:
    Eigen::LLT<Mat> llt_;
    double log_det_ = 0.0;
};

double log_eval_gaussian(const Gaussian& g, const Vec& x);
double eval_gaussian(const Gaussian& g, const Vec& x);

struct ScaledGaussian {
    double scale = 1.0;      // may underflow to 0 for far-apart factors
    double log_scale = 0.0;  // always valid
    Gaussian gaussian;
};

/// Product of Gaussian densities: prod_j G(x; mu_j, P_j) = scale * G(x; mean, cov).
/// The scale is evaluated in exponential (log) form for stability.
ScaledGaussian gaussian_product(const std::vector<Gaussian>& factors);

struct GaussianMixture {
    struct Component {
        double weight = 0.0;
        Gaussian gaussian;
    };

    std::vector<Component> components;

    std::size_t size() const { return components.size(); }
    bool empty() const { return components.empty(); }
    double total_weight() const;
    /// Scales weights to sum to one. No-op on an empty mixture.
    void normalize();
    double eval(const Vec& x) const;

    void add(double weight, Gaussian g) { components.push_back({weight, std::move(g)}); }
};

/// Power approximation of a normalized mixture: component covariances are
/// divided by omega and weights become
///   alpha^omega * det(2*pi*P/omega)^(1/2) / det(2*pi*P)^(omega/2),
/// which is exact for a single Gaussian. Requires 0 < omega <= 1.
GaussianMixture gm_power(const GaussianMixture& mix, double omega);

struct MergePruneConfig {
    double prune_threshold = 1e-5;
    double merge_distance = 4.0;  // Mahalanobis
    std::size_t max_components = 30;
    /// When true the output weights are normalized to one (PDF semantics);
    /// otherwise the input total weight is preserved by redistribution.
    bool normalize_output = false;
};

GaussianMixture merge_prune(const GaussianMixture& mix, const MergePruneConfig& cfg);

struct GmArgmaxConfig {
    int max_iterations = 100;
    double gradient_tolerance = 1e-8;
};

struct GmArgmaxResult {
    Vec argmax;
    double value = 0.0;
    /// Set when no ascent run converged; argmax is then the best evaluated
    /// initialization point.
    bool degraded = false;
};

/// Global maximization of a Gaussian mixture by Newton ascent (gradient
/// fallback, backtracking line search) from each initialization point.
GmArgmaxResult gm_argmax(const GaussianMixture& mix, const std::vector<Vec>& init_points,
                         const GmArgmaxConfig& cfg = {});

}  // namespace regtrack
