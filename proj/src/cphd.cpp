#include "regtrack/cphd.hpp"

#include <algorithm>
#include <cmath>

#include "regtrack/geometry.hpp"

namespace regtrack {

namespace {

double pow_nonneg(double base, int k) {
    if (k == 0) return 1.0;  // includes 0^0
    return std::pow(base, k);
}

/// n! / (n-k)!; zero when k > n.
double falling_factorial(int n, int k) {
    if (k > n) return 0.0;
    double v = 1.0;
    for (int i = 0; i < k; ++i) v *= static_cast<double>(n - i);
    return v;
}

double binomial(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    double v = 1.0;
    for (int i = 1; i <= k; ++i) v = v * static_cast<double>(n - k + i) / static_cast<double>(i);
    return v;
}

/// Coefficients sigma_j of prod_z (c_z + d_z x); sigma_j sums the products of
/// j detection factors and |Z|-j clutter factors over all subsets.
std::vector<double> homogeneous_esf(const std::vector<double>& c, const std::vector<double>& d) {
    std::vector<double> poly{1.0};
    for (std::size_t z = 0; z < c.size(); ++z) {
        std::vector<double> next(poly.size() + 1, 0.0);
        for (std::size_t j = 0; j < poly.size(); ++j) {
            next[j] += poly[j] * c[z];
            next[j + 1] += poly[j] * d[z];
        }
        poly = std::move(next);
    }
    return poly;
}

}  // namespace

double IidClusterDensity::expected_cardinality() const {
    double s = 0.0;
    for (int n = 0; n < card_pmf.size(); ++n) s += n * card_pmf(n);
    return s;
}

int IidClusterDensity::map_cardinality() const {
    int best = 0;
    for (int n = 1; n < card_pmf.size(); ++n) {
        if (card_pmf(n) > card_pmf(best)) best = n;
    }
    return best;
}

void IidClusterDensity::validate(double tol) const {
    if (card_pmf.size() < 1) throw std::invalid_argument("density: empty cardinality PMF");
    double s = 0.0;
    for (int n = 0; n < card_pmf.size(); ++n) {
        if (card_pmf(n) < -tol) throw std::invalid_argument("density: negative PMF entry");
        s += card_pmf(n);
    }
    if (std::abs(s - 1.0) > tol) throw std::invalid_argument("density: PMF does not sum to one");
    if (spatial.empty()) {
        if (std::abs(card_pmf(0) - 1.0) > tol) {
            throw std::invalid_argument("density: empty spatial PDF with nonzero cardinality");
        }
        return;
    }
    if (std::abs(spatial.total_weight() - 1.0) > tol) {
        throw std::invalid_argument("density: spatial PDF not normalized");
    }
}

MotionModel make_wna_motion(double dt, double sigma_accel, double survival_prob,
                            IidClusterDensity birth) {
    MotionModel m;
    m.transition = Mat::Identity(4, 4);
    m.transition(0, 1) = dt;
    m.transition(2, 3) = dt;
    Mat g(4, 2);
    g << 0.5 * dt * dt, 0,
         dt, 0,
         0, 0.5 * dt * dt,
         0, dt;
    m.process_noise = sigma_accel * sigma_accel * g * g.transpose();
    m.survival_prob = survival_prob;
    m.birth = std::move(birth);
    return m;
}

Vec SensorModel::predict(const Vec& state) const {
    if (kind == Kind::linear) {
        Vec z(2);
        z << state(0), state(2);
        return z;
    }
    const double xi = state(0), eta = state(2);
    const double r = std::max(std::hypot(xi, eta), 1e-9);
    Vec z(2);
    z << r, std::atan2(xi, eta);
    return z;
}

Mat SensorModel::jacobian(const Vec& state) const {
    Mat h = Mat::Zero(2, 4);
    if (kind == Kind::linear) {
        h(0, 0) = 1.0;
        h(1, 2) = 1.0;
        return h;
    }
    const double xi = state(0), eta = state(2);
    const double r2 = std::max(xi * xi + eta * eta, 1e-12);
    const double r = std::sqrt(r2);
    h(0, 0) = xi / r;
    h(0, 2) = eta / r;
    h(1, 0) = eta / r2;
    h(1, 2) = -xi / r2;
    return h;
}

Vec SensorModel::innovation(const Vec& z, const Vec& predicted) const {
    Vec nu = z - predicted;
    if (kind == Kind::range_bearing) nu(1) = wrap_angle(nu(1));
    return nu;
}

double SensorModel::clutter_density(const Vec& z) const {
    if (kind == Kind::linear) return 1.0 / region_area;
    // Position-uniform clutter seen through the polar map has density r / V.
    return std::max(z(0), 0.0) / region_area;
}

IidClusterDensity cphd_predict(const IidClusterDensity& prior, const MotionModel& motion) {
    const int n_max = prior.n_max();
    const double ps = motion.survival_prob;

    // Survivor cardinality: binomial thinning of the prior PMF.
    Vec survivors = Vec::Zero(n_max + 1);
    for (int j = 0; j <= n_max; ++j) {
        double s = 0.0;
        for (int l = j; l <= n_max; ++l) {
            s += binomial(l, j) * pow_nonneg(ps, j) * pow_nonneg(1.0 - ps, l - j) *
                 prior.card_pmf(l);
        }
        survivors(j) = s;
    }
    // Convolve with the birth cardinality, truncated at n_max.
    const Vec& birth_pmf = motion.birth.card_pmf;
    Vec predicted_pmf = Vec::Zero(n_max + 1);
    for (int n = 0; n <= n_max; ++n) {
        double s = 0.0;
        for (int j = 0; j <= n; ++j) {
            const int b = n - j;
            if (b < birth_pmf.size()) s += survivors(j) * birth_pmf(b);
        }
        predicted_pmf(n) = s;
    }
    const double pmf_sum = predicted_pmf.sum();
    if (pmf_sum > 0.0) predicted_pmf /= pmf_sum;

    // Spatial intensity: survival-scaled propagated components plus birth mass.
    const double prior_mass = prior.expected_cardinality();
    double birth_mass = 0.0;
    for (int n = 0; n < birth_pmf.size(); ++n) birth_mass += n * birth_pmf(n);

    GaussianMixture predicted_spatial;
    for (const auto& c : prior.spatial.components) {
        Gaussian g;
        g.mean = motion.transition * c.gaussian.mean;
        g.cov = motion.transition * c.gaussian.cov * motion.transition.transpose() +
                motion.process_noise;
        predicted_spatial.add(ps * prior_mass * c.weight, std::move(g));
    }
    if (birth_mass > 0.0) {
        for (const auto& c : motion.birth.spatial.components) {
            predicted_spatial.add(birth_mass * c.weight, c.gaussian);
        }
    }
    const double mass = predicted_spatial.total_weight();
    if (mass > 0.0) {
        predicted_spatial.normalize();
    } else {
        // No survivors and no birth mass: keep the propagated shape as a PDF.
        predicted_spatial = prior.spatial;
        for (auto& c : predicted_spatial.components) {
            c.gaussian.mean = motion.transition * c.gaussian.mean;
            c.gaussian.cov = motion.transition * c.gaussian.cov * motion.transition.transpose() +
                             motion.process_noise;
        }
    }

    IidClusterDensity out;
    out.card_pmf = std::move(predicted_pmf);
    out.spatial = std::move(predicted_spatial);
    return out;
}

IidClusterDensity cphd_correct(const IidClusterDensity& predicted,
                               const std::vector<Vec>& measurements, const SensorModel& sensor,
                               const MergePruneConfig& reduction) {
    const int n_max = predicted.n_max();
    const int m = static_cast<int>(measurements.size());
    for (const auto& z : measurements) {
        if (z.size() != sensor.meas_dim()) {
            throw std::invalid_argument("cphd_correct: measurement dimension mismatch");
        }
    }

    const double pd = sensor.detection_prob;
    const double lambda = sensor.clutter_rate;
    const double mean_card = predicted.expected_cardinality();

    // Degenerate empty scene: every measurement is clutter, nothing to update.
    if (predicted.spatial.empty() || mean_card <= 1e-12) {
        return predicted;
    }

    // Per-component Kalman/EKF ingredients at the predicted means.
    struct CompUpdate {
        double intensity_weight;
        Vec z_hat;
        Mat gain;
        Mat cov_updated;
        SpdFactor innovation_factor;
        double log_norm;
    };
    const auto& comps = predicted.spatial.components;
    const int nc = static_cast<int>(comps.size());
    std::vector<CompUpdate> upd;
    upd.reserve(nc);
    for (const auto& c : comps) {
        const Mat h = sensor.jacobian(c.gaussian.mean);
        Mat s = h * c.gaussian.cov * h.transpose() + sensor.noise;
        s = 0.5 * (s + s.transpose());
        SpdFactor sf(s);
        const Mat gain = c.gaussian.cov * h.transpose() * sf.inverse();
        Mat cov_u = c.gaussian.cov - gain * s * gain.transpose();
        cov_u = 0.5 * (cov_u + cov_u.transpose());
        const double log_norm = -0.5 * sf.log_det_2pi();
        upd.push_back({mean_card * c.weight, sensor.predict(c.gaussian.mean), gain,
                       std::move(cov_u), std::move(sf), log_norm});
    }

    // Detection mass d_z and clutter density c_z per measurement, scaled by a
    // common factor so the symmetric sums stay in range.
    std::vector<double> d(m, 0.0), cz(m, 0.0);
    std::vector<std::vector<double>> like(m, std::vector<double>(nc, 0.0));
    for (int zi = 0; zi < m; ++zi) {
        double mass = 0.0;
        for (int k = 0; k < nc; ++k) {
            const Vec nu = sensor.innovation(measurements[zi], upd[k].z_hat);
            const double q =
                std::exp(upd[k].log_norm - 0.5 * upd[k].innovation_factor.quad_form(nu));
            like[zi][k] = q;
            mass += upd[k].intensity_weight * q;
        }
        d[zi] = pd * mass;
        cz[zi] = sensor.clutter_density(measurements[zi]);
    }
    double scale = 0.0;
    for (int zi = 0; zi < m; ++zi) scale = std::max({scale, d[zi], cz[zi]});
    if (scale <= 0.0) scale = 1.0;
    std::vector<double> ds(m), cs(m);
    for (int zi = 0; zi < m; ++zi) {
        ds[zi] = d[zi] / scale;
        cs[zi] = cz[zi] / scale;
    }

    const auto sigma_full = homogeneous_esf(cs, ds);

    // Upsilon for a measurement subset of the given size, using its symmetric
    // sums. For Poisson clutter (size - j)! p_K(size - j) = e^-lambda *
    // lambda^(size - j); the e^-lambda factor cancels in every ratio.
    const auto upsilon = [&](const std::vector<double>& sigma, int subset_size, int u, int n) {
        double s = 0.0;
        const int jmax = std::min(subset_size, n - u);
        for (int j = 0; j <= jmax; ++j) {
            if (sigma[j] == 0.0) continue;
            s += std::exp(-lambda) * pow_nonneg(lambda, subset_size - j) *
                 falling_factorial(n, j + u) * pow_nonneg(1.0 - pd, n - j - u) *
                 pow_nonneg(1.0 / mean_card, j + u) * sigma[j];
        }
        return s;
    };

    // Posterior cardinality.
    Vec pmf = Vec::Zero(n_max + 1);
    for (int n = 0; n <= n_max; ++n) {
        pmf(n) = predicted.card_pmf(n) * upsilon(sigma_full, m, 0, n);
    }
    const double pmf_sum = pmf.sum();
    if (!(pmf_sum > 0.0) || !std::isfinite(pmf_sum)) {
        throw numeric_error("cphd_correct: cardinality update underflow");
    }
    pmf /= pmf_sum;

    double denom = 0.0, miss_num = 0.0;
    for (int n = 0; n <= n_max; ++n) {
        denom += predicted.card_pmf(n) * upsilon(sigma_full, m, 0, n);
        miss_num += predicted.card_pmf(n) * upsilon(sigma_full, m, 1, n);
    }
    const double miss_coef = miss_num / denom;

    GaussianMixture corrected;
    corrected.components.reserve(static_cast<std::size_t>(nc) * (m + 1));
    for (int k = 0; k < nc; ++k) {
        corrected.add(upd[k].intensity_weight * (1.0 - pd) * miss_coef,
                      comps[k].gaussian);
    }
    for (int zi = 0; zi < m; ++zi) {
        std::vector<double> c_rest, d_rest;
        c_rest.reserve(m - 1);
        d_rest.reserve(m - 1);
        for (int zj = 0; zj < m; ++zj) {
            if (zj == zi) continue;
            c_rest.push_back(cs[zj]);
            d_rest.push_back(ds[zj]);
        }
        const auto sigma_rest = homogeneous_esf(c_rest, d_rest);
        double num = 0.0;
        for (int n = 0; n <= n_max; ++n) {
            num += predicted.card_pmf(n) * upsilon(sigma_rest, m - 1, 1, n);
        }
        const double coef = num / (denom * scale);
        if (!(coef > 0.0)) continue;
        for (int k = 0; k < nc; ++k) {
            const double w = upd[k].intensity_weight * pd * like[zi][k] * coef;
            if (w <= 0.0) continue;
            const Vec nu = sensor.innovation(measurements[zi], upd[k].z_hat);
            Gaussian g;
            g.mean = comps[k].gaussian.mean + upd[k].gain * nu;
            g.cov = upd[k].cov_updated;
            corrected.add(w, std::move(g));
        }
    }

    MergePruneConfig cfg = reduction;
    cfg.normalize_output = true;
    // Prune threshold is interpreted on the normalized scale.
    const double mass = corrected.total_weight();
    if (mass > 0.0) {
        cfg.prune_threshold = reduction.prune_threshold * mass;
    }
    GaussianMixture spatial = merge_prune(corrected, cfg);
    if (spatial.empty()) {
        spatial = predicted.spatial;
    }

    IidClusterDensity out;
    out.card_pmf = std::move(pmf);
    out.spatial = std::move(spatial);
    return out;
}

std::vector<Vec> extract_states(const IidClusterDensity& density) {
    const int n_hat = density.map_cardinality();
    std::vector<Vec> states;
    if (n_hat == 0) return states;

    std::vector<std::size_t> order(density.spatial.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return density.spatial.components[a].weight > density.spatial.components[b].weight;
    });
    const std::size_t take = std::min<std::size_t>(n_hat, order.size());
    states.reserve(take);
    for (std::size_t i = 0; i < take; ++i) {
        states.push_back(density.spatial.components[order[i]].gaussian.mean);
    }
    return states;
}

Vec truncated_poisson_pmf(double mean, int n_max) {
    Vec pmf(n_max + 1);
    double log_term = -mean;  // log P(0)
    pmf(0) = std::exp(log_term);
    for (int n = 1; n <= n_max; ++n) {
        log_term += std::log(mean) - std::log(static_cast<double>(n));
        pmf(n) = std::exp(log_term);
    }
    const double s = pmf.sum();
    if (s > 0.0) pmf /= s;
    return pmf;
}

}  // namespace regtrack
