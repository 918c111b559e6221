#include "regtrack/gm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace regtrack {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

SpdFactor::SpdFactor(const Mat& p) {
    if (p.rows() != p.cols()) {
        throw std::invalid_argument("SpdFactor: matrix must be square");
    }
    llt_.compute(p);
    if (llt_.info() != Eigen::Success) {
        const double jitter = 1e-9 * p.trace() / static_cast<double>(p.rows());
        Mat repaired = p + jitter * Mat::Identity(p.rows(), p.cols());
        llt_.compute(repaired);
        if (llt_.info() != Eigen::Success) {
            throw numeric_error("covariance not positive definite");
        }
    }
    log_det_ = 0.0;
    const auto& l = llt_.matrixLLT();
    for (Eigen::Index i = 0; i < l.rows(); ++i) {
        const double d = l(i, i);
        if (!(d > 0.0) || !std::isfinite(d)) {
            throw numeric_error("covariance factorization produced invalid diagonal");
        }
        log_det_ += 2.0 * std::log(d);
    }
}

double SpdFactor::log_det_2pi() const {
    return log_det_ + kLog2Pi * static_cast<double>(dim());
}

double SpdFactor::quad_form(const Vec& r) const {
    Vec half = llt_.matrixL().solve(r);
    return half.squaredNorm();
}

Vec SpdFactor::solve(const Vec& r) const { return llt_.solve(r); }

Mat SpdFactor::solve(const Mat& r) const { return llt_.solve(r); }

Mat SpdFactor::inverse() const {
    return llt_.solve(Mat::Identity(dim(), dim()));
}

double log_eval_gaussian(const Gaussian& g, const Vec& x) {
    if (x.size() != g.mean.size()) {
        throw std::invalid_argument("log_eval_gaussian: dimension mismatch");
    }
    SpdFactor f(g.cov);
    return -0.5 * (f.log_det_2pi() + f.quad_form(x - g.mean));
}

double eval_gaussian(const Gaussian& g, const Vec& x) {
    return std::exp(log_eval_gaussian(g, x));
}

ScaledGaussian gaussian_product(const std::vector<Gaussian>& factors) {
    if (factors.empty()) {
        throw std::invalid_argument("gaussian_product: empty factor list");
    }
    const Eigen::Index d = factors.front().dim();
    Mat info = Mat::Zero(d, d);
    Vec info_mean = Vec::Zero(d);
    double sum_quad = 0.0;
    double sum_log_det = 0.0;
    for (const auto& g : factors) {
        if (g.dim() != d) {
            throw std::invalid_argument("gaussian_product: factor dimension mismatch");
        }
        SpdFactor f(g.cov);
        info += f.inverse();
        Vec wi_mu = f.solve(g.mean);
        info_mean += wi_mu;
        sum_quad += g.mean.dot(wi_mu);
        sum_log_det += f.log_det_2pi();
    }
    SpdFactor info_f(info);
    Vec mean = info_f.solve(info_mean);
    Mat cov = info_f.inverse();
    cov = 0.5 * (cov + cov.transpose());
    SpdFactor cov_f(cov);
    // Exponential form of the product scale:
    //   0.5 log det(2 pi Pbar) - sum_j 0.5 log det(2 pi P_j)
    //   - 0.5 [ sum_j mu_j' P_j^-1 mu_j - mubar' Pbar^-1 mubar ]
    const double log_scale =
        0.5 * cov_f.log_det_2pi() - 0.5 * sum_log_det - 0.5 * (sum_quad - info_mean.dot(mean));
    ScaledGaussian out;
    out.log_scale = log_scale;
    out.scale = std::exp(log_scale);
    out.gaussian = Gaussian(std::move(mean), std::move(cov));
    return out;
}

double GaussianMixture::total_weight() const {
    double s = 0.0;
    for (const auto& c : components) s += c.weight;
    return s;
}

void GaussianMixture::normalize() {
    const double s = total_weight();
    if (s <= 0.0) return;
    for (auto& c : components) c.weight /= s;
}

double GaussianMixture::eval(const Vec& x) const {
    double v = 0.0;
    for (const auto& c : components) v += c.weight * eval_gaussian(c.gaussian, x);
    return v;
}

GaussianMixture gm_power(const GaussianMixture& mix, double omega) {
    if (!(omega > 0.0) || omega > 1.0) {
        throw std::invalid_argument("gm_power: omega must lie in (0, 1]");
    }
    GaussianMixture out;
    out.components.reserve(mix.size());
    for (const auto& c : mix.components) {
        if (c.weight < 0.0) throw std::invalid_argument("gm_power: negative weight");
        const Eigen::Index d = c.gaussian.dim();
        SpdFactor f(c.gaussian.cov);
        // log alpha_hat = omega log alpha + (d/2)[(1-omega) log 2pi - log omega]
        //                 + ((1-omega)/2) log det P
        const double log_w = (c.weight > 0.0)
                                 ? omega * std::log(c.weight) +
                                       0.5 * static_cast<double>(d) *
                                           ((1.0 - omega) * kLog2Pi - std::log(omega)) +
                                       0.5 * (1.0 - omega) * f.log_det()
                                 : -std::numeric_limits<double>::infinity();
        GaussianMixture::Component nc;
        nc.weight = std::exp(log_w);
        nc.gaussian = Gaussian(c.gaussian.mean, c.gaussian.cov / omega);
        out.components.push_back(std::move(nc));
    }
    return out;
}

GaussianMixture merge_prune(const GaussianMixture& mix, const MergePruneConfig& cfg) {
    if (cfg.prune_threshold < 0.0 || cfg.merge_distance < 0.0) {
        throw std::invalid_argument("merge_prune: thresholds must be nonnegative");
    }
    const double total_in = mix.total_weight();

    std::vector<GaussianMixture::Component> pool;
    pool.reserve(mix.size());
    for (const auto& c : mix.components) {
        if (c.weight >= cfg.prune_threshold) pool.push_back(c);
    }
    std::stable_sort(pool.begin(), pool.end(),
                     [](const auto& a, const auto& b) { return a.weight > b.weight; });

    GaussianMixture out;
    std::vector<bool> used(pool.size(), false);
    for (std::size_t seed = 0; seed < pool.size(); ++seed) {
        if (used[seed]) continue;
        std::vector<std::size_t> cluster{seed};
        used[seed] = true;
        SpdFactor seed_f(pool[seed].gaussian.cov);
        for (std::size_t i = seed + 1; i < pool.size(); ++i) {
            if (used[i]) continue;
            SpdFactor fi(pool[i].gaussian.cov);
            const Vec diff = pool[i].gaussian.mean - pool[seed].gaussian.mean;
            if (std::sqrt(fi.quad_form(diff)) < cfg.merge_distance) {
                cluster.push_back(i);
                used[i] = true;
            }
        }
        if (cluster.size() == 1) {
            out.components.push_back(pool[seed]);
            continue;
        }
        double w = 0.0;
        for (auto idx : cluster) w += pool[idx].weight;
        const Eigen::Index d = pool[seed].gaussian.dim();
        Vec mean = Vec::Zero(d);
        for (auto idx : cluster) mean += pool[idx].weight * pool[idx].gaussian.mean;
        mean /= w;
        Mat cov = Mat::Zero(d, d);
        for (auto idx : cluster) {
            const Vec dm = pool[idx].gaussian.mean - mean;
            cov += pool[idx].weight * (pool[idx].gaussian.cov + dm * dm.transpose());
        }
        cov /= w;
        out.add(w, Gaussian(std::move(mean), std::move(cov)));
    }

    if (out.size() > cfg.max_components) {
        std::stable_sort(out.components.begin(), out.components.end(),
                         [](const auto& a, const auto& b) { return a.weight > b.weight; });
        out.components.resize(cfg.max_components);
    }

    const double total_out = out.total_weight();
    if (cfg.normalize_output) {
        out.normalize();
    } else if (total_out > 0.0 && total_in > 0.0) {
        // Redistribute pruned/truncated mass so the total is preserved.
        const double s = total_in / total_out;
        for (auto& c : out.components) c.weight *= s;
    }
    return out;
}

namespace {

struct MixtureEvaluator {
    struct Comp {
        double weight;
        Vec mean;
        SpdFactor factor;
        double log_norm;
    };
    std::vector<Comp> comps;
    Eigen::Index dim;

    explicit MixtureEvaluator(const GaussianMixture& mix) {
        dim = mix.components.front().gaussian.dim();
        comps.reserve(mix.size());
        for (const auto& c : mix.components) {
            SpdFactor f(c.gaussian.cov);
            const double log_norm = -0.5 * f.log_det_2pi();
            comps.push_back({c.weight, c.gaussian.mean, std::move(f), log_norm});
        }
    }

    double value(const Vec& x) const {
        double v = 0.0;
        for (const auto& c : comps) {
            v += c.weight * std::exp(c.log_norm - 0.5 * c.factor.quad_form(x - c.mean));
        }
        return v;
    }

    double value_grad_hess(const Vec& x, Vec& grad, Mat& hess) const {
        double v = 0.0;
        grad.setZero(dim);
        hess.setZero(dim, dim);
        for (const auto& c : comps) {
            const Vec r = x - c.mean;
            const Vec pir = c.factor.solve(r);
            const double term = c.weight * std::exp(c.log_norm - 0.5 * r.dot(pir));
            v += term;
            grad -= term * pir;
            hess += term * (pir * pir.transpose() - c.factor.inverse());
        }
        return v;
    }

    /// Covariance of the component contributing most at x; used to scale
    /// gradient steps when the Hessian is not usable.
    const Mat* dominant_cov(const Vec& x, const GaussianMixture& mix) const {
        double best = -1.0;
        std::size_t best_i = 0;
        for (std::size_t i = 0; i < comps.size(); ++i) {
            const auto& c = comps[i];
            const double term =
                c.weight * std::exp(c.log_norm - 0.5 * c.factor.quad_form(x - c.mean));
            if (term > best) {
                best = term;
                best_i = i;
            }
        }
        return &mix.components[best_i].gaussian.cov;
    }
};

}  // namespace

GmArgmaxResult gm_argmax(const GaussianMixture& mix, const std::vector<Vec>& init_points,
                         const GmArgmaxConfig& cfg) {
    if (mix.empty()) throw std::invalid_argument("gm_argmax: empty mixture");
    if (init_points.empty()) throw std::invalid_argument("gm_argmax: no initialization points");

    MixtureEvaluator ev(mix);

    GmArgmaxResult best;
    best.value = -1.0;
    bool any_converged = false;

    for (const auto& x0 : init_points) {
        Vec x = x0;
        double fx = ev.value(x);
        if (fx > best.value) {
            best.value = fx;
            best.argmax = x;
        }
        Vec grad;
        Mat hess;
        bool converged = false;
        for (int it = 0; it < cfg.max_iterations; ++it) {
            fx = ev.value_grad_hess(x, grad, hess);
            if (grad.norm() < cfg.gradient_tolerance * (1.0 + fx)) {
                converged = true;
                break;
            }
            Vec dir;
            bool have_newton = false;
            Eigen::LLT<Mat> neg_h((-hess).eval());
            if (neg_h.info() == Eigen::Success) {
                dir = neg_h.solve(grad);
                have_newton = dir.allFinite();
            }
            if (!have_newton) {
                dir = (*ev.dominant_cov(x, mix)) * grad;  // covariance-scaled ascent
            }
            double t = 1.0;
            bool improved = false;
            for (int ls = 0; ls < 40; ++ls) {
                const Vec cand = x + t * dir;
                const double fc = ev.value(cand);
                if (fc > fx) {
                    x = cand;
                    fx = fc;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if (!improved) {
                converged = grad.norm() < 1e-6 * (1.0 + fx);
                break;
            }
        }
        fx = ev.value(x);
        if (fx > best.value) {
            best.value = fx;
            best.argmax = x;
        }
        any_converged = any_converged || converged;
    }
    best.degraded = !any_converged;
    return best;
}

}  // namespace regtrack
