#include "regtrack/registration.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

#include "regtrack/geometry.hpp"

namespace regtrack {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kInf = std::numeric_limits<double>::infinity();

GaussianMixture cap_and_normalize(const GaussianMixture& mix, std::size_t cap) {
    GaussianMixture out = mix;
    if (out.size() > cap) {
        std::stable_sort(out.components.begin(), out.components.end(),
                         [](const auto& a, const auto& b) { return a.weight > b.weight; });
        out.components.resize(cap);
    }
    out.normalize();
    return out;
}

/// Block-diagonal lift matrix col(T, ..., T) mapping stacked planar drifts to
/// stacked state-space drifts.
Mat stacked_lift(int blocks) {
    Mat t = Mat::Zero(4 * blocks, 2 * blocks);
    for (int m = 0; m < blocks; ++m) {
        t(4 * m + 0, 2 * m + 0) = 1.0;
        t(4 * m + 2, 2 * m + 1) = 1.0;
    }
    return t;
}

Vec lift_stacked_drift(const Vec& drift) {
    const int blocks = static_cast<int>(drift.size()) / 2;
    Vec theta = Vec::Zero(4 * blocks);
    for (int m = 0; m < blocks; ++m) {
        theta(4 * m + 0) = drift(2 * m + 0);
        theta(4 * m + 2) = drift(2 * m + 1);
    }
    return theta;
}

Vec project_stacked_drift(const Vec& theta) {
    const int blocks = static_cast<int>(theta.size()) / 4;
    Vec drift(2 * blocks);
    for (int m = 0; m < blocks; ++m) {
        drift(2 * m + 0) = theta(4 * m + 0);
        drift(2 * m + 1) = theta(4 * m + 2);
    }
    return drift;
}

GaussianMixture mixture_product(const GaussianMixture& a, const GaussianMixture& b) {
    GaussianMixture out;
    out.components.reserve(a.size() * b.size());
    for (const auto& ca : a.components) {
        for (const auto& cb : b.components) {
            auto prod = gaussian_product({ca.gaussian, cb.gaussian});
            const double w = ca.weight * cb.weight * prod.scale;
            if (w > 0.0) out.add(w, std::move(prod.gaussian));
        }
    }
    return out;
}

GaussianMixture scaled_mixture(const GaussianMixture& a, double s) {
    GaussianMixture out = a;
    for (auto& c : out.components) c.weight *= s;
    return out;
}

/// Restriction of a mixture over stacked Theta to the drift subspace
/// Theta = lift(drift): a mixture over the stacked planar drift whose values
/// reproduce the original along the subspace.
GaussianMixture restrict_to_drift(const GaussianMixture& theta_mix) {
    if (theta_mix.empty()) return {};
    const int dim = static_cast<int>(theta_mix.components.front().gaussian.dim());
    const int blocks = dim / 4;
    const Mat lift = stacked_lift(blocks);
    GaussianMixture out;
    out.components.reserve(theta_mix.size());
    for (const auto& c : theta_mix.components) {
        SpdFactor uf(c.gaussian.cov);
        const Mat ui_lift = uf.solve(lift);              // Upsilon^-1 T
        Mat prec = lift.transpose() * ui_lift;           // T' Upsilon^-1 T
        prec = 0.5 * (prec + prec.transpose());
        SpdFactor pf(prec);
        const Vec rhs = ui_lift.transpose() * c.gaussian.mean;
        const Vec mean = pf.solve(rhs);
        Mat cov = pf.inverse();
        cov = 0.5 * (cov + cov.transpose());
        const double quad_full = c.gaussian.mean.dot(uf.solve(c.gaussian.mean));
        const double quad_sub = mean.dot(rhs);
        SpdFactor cf(cov);
        const double log_w = std::log(std::max(c.weight, 0.0)) + 0.5 * cf.log_det_2pi() -
                             0.5 * uf.log_det_2pi() - 0.5 * (quad_full - quad_sub);
        if (std::isfinite(log_w)) out.add(std::exp(log_w), Gaussian(mean, cov));
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// IRF construction

IrfMixture build_irf(const std::vector<IidClusterDensity>& densities,
                     const std::vector<double>& weights, std::size_t self_index,
                     const IrfConfig& cfg) {
    if (densities.size() != weights.size() || densities.empty()) {
        throw std::invalid_argument("build_irf: densities and weights must match");
    }
    if (self_index >= densities.size()) {
        throw std::invalid_argument("build_irf: bad self index");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (w <= 0.0) throw std::invalid_argument("build_irf: weights must be positive");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) {
        throw std::invalid_argument("build_irf: weights must sum to one");
    }
    for (const auto& d : densities) {
        if (d.spatial.empty()) {
            throw registration_unavailable("build_irf: empty spatial mixture in neighborhood");
        }
    }

    IrfMixture irf;
    std::vector<std::vector<double>> log_alpha_hat;  // [node][component], self last
    std::vector<const std::vector<IrfMixture::NodeEntry>*> tables;

    auto make_table = [&](const IidClusterDensity& d, double omega,
                          std::vector<double>& log_ah) {
        GaussianMixture powered = gm_power(cap_and_normalize(d.spatial, cfg.component_cap), omega);
        std::vector<IrfMixture::NodeEntry> table;
        table.reserve(powered.size());
        for (const auto& c : powered.components) {
            IrfMixture::NodeEntry e;
            e.mean = c.gaussian.mean;
            e.cov_omega = c.gaussian.cov;
            SpdFactor f(e.cov_omega);
            e.cov_omega_inv = f.inverse();
            e.log_det_2pi_cov_omega = f.log_det_2pi();
            log_ah.push_back(c.weight > 0.0 ? std::log(c.weight) : -kInf);
            table.push_back(std::move(e));
        }
        return table;
    };

    std::vector<double> self_log_ah;
    irf.self_table_ = make_table(densities[self_index], weights[self_index], self_log_ah);
    std::vector<std::vector<double>> nb_log_ah;
    for (std::size_t j = 0; j < densities.size(); ++j) {
        if (j == self_index) continue;
        std::vector<double> la;
        irf.neighbor_tables_.push_back(make_table(densities[j], weights[j], la));
        nb_log_ah.push_back(std::move(la));
    }

    const int slots = irf.neighbor_count();
    // Odometer over (self, slot_0, ..., slot_{n-1}).
    std::vector<int> limits{static_cast<int>(irf.self_table_.size())};
    for (const auto& t : irf.neighbor_tables_) limits.push_back(static_cast<int>(t.size()));
    std::vector<int> pick(limits.size(), 0);
    while (true) {
        double log_c = self_log_ah[pick[0]] - 0.5 * irf.self_table_[pick[0]].log_det_2pi_cov_omega;
        for (int m = 0; m < slots; ++m) {
            log_c += nb_log_ah[m][pick[m + 1]] -
                     0.5 * irf.neighbor_tables_[m][pick[m + 1]].log_det_2pi_cov_omega;
        }
        if (std::isfinite(log_c)) irf.associations_.push_back({pick, log_c});
        int d = static_cast<int>(pick.size()) - 1;
        while (d >= 0 && ++pick[d] == limits[d]) {
            pick[d] = 0;
            --d;
        }
        if (d < 0) break;
    }

    if (irf.associations_.size() > cfg.association_cap) {
        // Rank by peak value at Gamma = 0.
        std::vector<std::pair<double, std::size_t>> ranked;
        ranked.reserve(irf.associations_.size());
        for (std::size_t k = 0; k < irf.associations_.size(); ++k) {
            const auto& a = irf.associations_[k];
            Mat s = irf.self_table_[a.pick[0]].cov_omega_inv;
            // At Gamma = 0, Psi_m = cov_omega of the picked neighbor component.
            Mat sum = Mat::Zero(4, 4);
            for (int m = 0; m < slots; ++m) {
                sum += irf.neighbor_tables_[m][a.pick[m + 1]].cov_omega_inv;
            }
            SpdFactor sf(Mat(s + sum));
            const double half_logdet_pbar = 0.5 * (4.0 * kLog2Pi) - 0.5 * sf.log_det();
            ranked.emplace_back(a.log_c + half_logdet_pbar, k);
        }
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        std::vector<IrfMixture::Association> kept;
        kept.reserve(cfg.association_cap);
        for (std::size_t i = 0; i < cfg.association_cap; ++i) {
            kept.push_back(std::move(irf.associations_[ranked[i].second]));
        }
        irf.associations_ = std::move(kept);
    }
    return irf;
}

// ---------------------------------------------------------------------------
// IRF evaluation

/// Caches the Gamma-dependent 4x4 pieces of every association so values,
/// drift gradients and orientation derivatives cost O(slots) each.
class IrfEvaluator {
public:
    IrfEvaluator(const IrfMixture& irf, Vec gamma) : irf_(&irf) { set_gamma(std::move(gamma)); }

    const Vec& gamma() const { return gamma_; }

    void set_gamma(Vec gamma) {
        if (gamma.size() != irf_->neighbor_count()) {
            throw std::invalid_argument("IrfEvaluator: gamma size mismatch");
        }
        gamma_ = std::move(gamma);
        const int slots = irf_->neighbor_count();
        rot_.resize(slots);
        rot_deriv_.resize(slots);
        psi_inv_.resize(slots);
        rot_mean_.resize(slots);
        for (int m = 0; m < slots; ++m) refresh_slot(m);
        rebuild_associations();
    }

    void set_gamma_slot(int m, double value) {
        gamma_(m) = value;
        refresh_slot(m);
        rebuild_associations();
    }

    double value(const Vec& drift, double gate = kInf) const {
        return accumulate(drift, gate, nullptr, nullptr, -1, nullptr);
    }

    double value_grad_hess(const Vec& drift, Vec& grad, Mat& hess, double gate) const {
        return accumulate(drift, gate, &grad, &hess, -1, nullptr);
    }

    /// Analytic d/dgamma_m of the IRF value at the (lifted) drift.
    double value_and_gamma_derivative(const Vec& drift, int slot, double gate,
                                      double& derivative) const {
        return accumulate(drift, gate, nullptr, nullptr, slot, &derivative);
    }

private:
    struct AssocCache {
        Eigen::Matrix4d pbar;
        double half_log_det_2pi_pbar;
    };

    void refresh_slot(int m) {
        rot_[m] = rotation_matrix(gamma_(m));
        rot_deriv_[m] = rotation_matrix_derivative(gamma_(m));
        const auto& table = irf_->neighbor_tables_[m];
        psi_inv_[m].resize(table.size());
        rot_mean_[m].resize(table.size());
        for (std::size_t c = 0; c < table.size(); ++c) {
            psi_inv_[m][c] = rot_[m] * table[c].cov_omega_inv * rot_[m].transpose();
            rot_mean_[m][c] = rot_[m] * table[c].mean;
        }
    }

    void rebuild_associations() {
        const int slots = irf_->neighbor_count();
        assoc_.resize(irf_->associations_.size());
        for (std::size_t k = 0; k < irf_->associations_.size(); ++k) {
            const auto& a = irf_->associations_[k];
            Eigen::Matrix4d s = irf_->self_table_[a.pick[0]].cov_omega_inv;
            for (int m = 0; m < slots; ++m) s += psi_inv_[m][a.pick[m + 1]];
            Eigen::LLT<Eigen::Matrix4d> llt(s);
            double log_det_s = 0.0;
            for (int i = 0; i < 4; ++i) log_det_s += 2.0 * std::log(llt.matrixLLT()(i, i));
            assoc_[k].pbar = llt.solve(Eigen::Matrix4d::Identity());
            assoc_[k].half_log_det_2pi_pbar = 0.5 * (4.0 * kLog2Pi) - 0.5 * log_det_s;
        }
    }

    /// Shared accumulation loop. `drift` is the stacked planar drift (2 per
    /// slot). grad/hess, when requested, are with respect to the drift.
    double accumulate(const Vec& drift, double gate, Vec* grad, Mat* hess, int dslot,
                      double* dgamma) const {
        const int slots = irf_->neighbor_count();
        if (drift.size() != 2 * slots) {
            throw std::invalid_argument("IrfEvaluator: drift size mismatch");
        }
        if (grad) grad->setZero(2 * slots);
        if (hess) hess->setZero(2 * slots, 2 * slots);
        if (dgamma) *dgamma = 0.0;

        std::vector<Eigen::Vector4d> r(slots), pir(slots);
        double total = 0.0;
        const bool gated = std::isfinite(gate);
        for (std::size_t k = 0; k < irf_->associations_.size(); ++k) {
            const auto& a = irf_->associations_[k];
            const auto& self = irf_->self_table_[a.pick[0]];
            bool skip = false;
            for (int m = 0; m < slots; ++m) {
                const Eigen::Vector4d phi = self.mean - rot_mean_[m][a.pick[m + 1]];
                r[m] = lift_drift({drift(2 * m), drift(2 * m + 1)}) - phi;
                if (gated && r[m].norm() > gate) {
                    skip = true;
                    break;
                }
            }
            if (skip) continue;

            double quad = 0.0;
            Eigen::Vector4d y = Eigen::Vector4d::Zero();
            for (int m = 0; m < slots; ++m) {
                pir[m] = psi_inv_[m][a.pick[m + 1]] * r[m];
                quad += r[m].dot(pir[m]);
                y += pir[m];
            }
            const Eigen::Vector4d py = assoc_[k].pbar * y;
            quad -= y.dot(py);
            const double term =
                std::exp(a.log_c + assoc_[k].half_log_det_2pi_pbar - 0.5 * quad);
            if (term == 0.0) continue;
            total += term;

            if (grad || hess) {
                // (Upsilon^-1 r)_m = Psi_m^-1 (r_m - Pbar y)
                std::vector<Eigen::Vector4d> u(slots);
                for (int m = 0; m < slots; ++m) {
                    u[m] = psi_inv_[m][a.pick[m + 1]] * (r[m] - py);
                }
                if (grad) {
                    for (int m = 0; m < slots; ++m) {
                        (*grad)(2 * m) -= term * u[m](0);
                        (*grad)(2 * m + 1) -= term * u[m](2);
                    }
                }
                if (hess) {
                    for (int m = 0; m < slots; ++m) {
                        const auto& pim = psi_inv_[m][a.pick[m + 1]];
                        for (int l = 0; l < slots; ++l) {
                            const auto& pil = psi_inv_[l][a.pick[l + 1]];
                            Eigen::Matrix4d uinv_ml = -pim * assoc_[k].pbar * pil;
                            if (l == m) uinv_ml += pim;
                            Eigen::Matrix4d blk =
                                term * (u[m] * u[l].transpose() - uinv_ml);
                            // Project each 4x4 block onto the drift coordinates.
                            (*hess)(2 * m, 2 * l) += blk(0, 0);
                            (*hess)(2 * m, 2 * l + 1) += blk(0, 2);
                            (*hess)(2 * m + 1, 2 * l) += blk(2, 0);
                            (*hess)(2 * m + 1, 2 * l + 1) += blk(2, 2);
                        }
                    }
                }
            }

            if (dgamma) {
                const int m = dslot;
                const auto& entry = irf_->neighbor_tables_[m][a.pick[m + 1]];
                const auto& pim = psi_inv_[m][a.pick[m + 1]];
                const Eigen::Matrix4d dpsi_inv =
                    rot_deriv_[m] * entry.cov_omega_inv * rot_[m].transpose() +
                    rot_[m] * entry.cov_omega_inv * rot_deriv_[m].transpose();
                const Eigen::Vector4d dr = rot_deriv_[m] * entry.mean;
                const double dlogdet_pbar = -(dpsi_inv * assoc_[k].pbar).trace();
                const Eigen::Vector4d dy = pim * dr + dpsi_inv * r[m];
                // d(y' Pbar y) = 2 dy' Pbar y + y' dPbar y with dPbar = -Pbar dS Pbar.
                const double dquad = 2.0 * dr.dot(pir[m]) + r[m].dot(dpsi_inv * r[m]) -
                                     (2.0 * dy.dot(py) - py.dot(dpsi_inv * py));
                *dgamma += term * (0.5 * dlogdet_pbar - 0.5 * dquad);
            }
        }
        return total;
    }

    const IrfMixture* irf_;
    Vec gamma_;
    std::vector<Eigen::Matrix4d> rot_, rot_deriv_;
    std::vector<std::vector<Eigen::Matrix4d>> psi_inv_;
    std::vector<std::vector<Eigen::Vector4d>> rot_mean_;
    std::vector<AssocCache> assoc_;
};

double IrfMixture::eval(const Vec& theta, const Vec& gamma) const {
    IrfEvaluator ev(*this, gamma);
    return ev.value(project_stacked_drift(theta));
}

double irf_orientation_derivative(const IrfMixture& irf, const Vec& theta, const Vec& gamma,
                                  int slot) {
    if (slot < 0 || slot >= irf.neighbor_count()) {
        throw std::invalid_argument("irf_orientation_derivative: bad slot");
    }
    IrfEvaluator ev(irf, gamma);
    double d = 0.0;
    ev.value_and_gamma_derivative(project_stacked_drift(theta), slot, kInf, d);
    return d;
}

IrfComponent IrfMixture::component_at(std::size_t k, const Vec& gamma) const {
    if (k >= associations_.size()) throw std::invalid_argument("component_at: bad index");
    if (gamma.size() != neighbor_count()) {
        throw std::invalid_argument("component_at: gamma size mismatch");
    }
    const auto& a = associations_[k];
    const int slots = neighbor_count();
    const auto& self = self_table_[a.pick[0]];

    IrfComponent out;
    out.phi = Vec(4 * slots);
    out.upsilon = Mat::Zero(4 * slots, 4 * slots);
    Mat s = self.cov_omega_inv;
    for (int m = 0; m < slots; ++m) {
        const Eigen::Matrix4d rot = rotation_matrix(gamma(m));
        const auto& e = neighbor_tables_[m][a.pick[m + 1]];
        out.phi.segment<4>(4 * m) = self.mean - rot * e.mean;
        const Eigen::Matrix4d psi = rot * e.cov_omega * rot.transpose();
        out.upsilon.block<4, 4>(4 * m, 4 * m) += psi;
        s += rot * e.cov_omega_inv * rot.transpose();
        for (int l = 0; l < slots; ++l) {
            out.upsilon.block<4, 4>(4 * m, 4 * l) += self.cov_omega;
        }
    }
    SpdFactor sf(s);
    SpdFactor uf(out.upsilon);
    const double half_logdet_pbar = 0.5 * (4.0 * kLog2Pi) - 0.5 * sf.log_det();
    out.beta = std::exp(a.log_c + half_logdet_pbar + 0.5 * uf.log_det_2pi());
    return out;
}

GaussianMixture IrfMixture::as_mixture(const Vec& gamma) const {
    GaussianMixture out;
    out.components.reserve(associations_.size());
    for (std::size_t k = 0; k < associations_.size(); ++k) {
        IrfComponent c = component_at(k, gamma);
        out.add(c.beta, Gaussian(std::move(c.phi), std::move(c.upsilon)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Instantaneous and total cost

Vec fusion_cardinality_factors(const std::vector<Vec>& card_pmfs,
                               const std::vector<double>& weights) {
    if (card_pmfs.empty() || card_pmfs.size() != weights.size()) {
        throw std::invalid_argument("fusion_cardinality_factors: size mismatch");
    }
    const Eigen::Index len = card_pmfs.front().size();
    for (const auto& p : card_pmfs) {
        if (p.size() != len) {
            throw std::invalid_argument("fusion_cardinality_factors: PMF length mismatch");
        }
    }
    Vec c(len);
    for (Eigen::Index n = 0; n < len; ++n) {
        double lc = 0.0;
        for (std::size_t j = 0; j < card_pmfs.size(); ++j) {
            const double p = card_pmfs[j](n);
            if (p <= 0.0) {
                lc = -kInf;
                break;
            }
            lc += weights[j] * std::log(p);
        }
        c(n) = (lc == -kInf) ? 0.0 : std::exp(lc);
    }
    return c;
}

InstantaneousCostResult instantaneous_cost(const Vec& cardinality_factors, double irf_value) {
    double sum = 0.0;
    double power = 1.0;
    for (Eigen::Index n = 0; n < cardinality_factors.size(); ++n) {
        sum += cardinality_factors(n) * power;
        power *= irf_value;
    }
    if (!(sum > 0.0) || !std::isfinite(sum)) {
        return {kInf, true};
    }
    return {-std::log(sum), false};
}

TotalCostState tc_update(const TotalCostState& state, const GaussianMixture& irf,
                         const Vec& cardinality_factors, const MergePruneConfig* reduction) {
    const Eigen::Index n_max = cardinality_factors.size() - 1;
    const double c0 = cardinality_factors(0);

    auto reduce = [&](GaussianMixture mix) {
        if (reduction != nullptr && !mix.empty()) return merge_prune(mix, *reduction);
        return mix;
    };

    // W_inst = sum_{n>=1} c_n W^n, powers expanded as repeated products.
    GaussianMixture w_inst;
    GaussianMixture power = irf;
    for (Eigen::Index n = 1; n <= n_max; ++n) {
        if (n > 1) power = reduce(mixture_product(power, irf));
        const double cn = cardinality_factors(n);
        if (cn <= 0.0) continue;
        for (const auto& c : power.components) w_inst.add(cn * c.weight, c.gaussian);
    }
    w_inst = reduce(std::move(w_inst));

    TotalCostState next;
    next.log_scale = state.log_scale;
    next.c_hat = state.c_hat * c0;
    GaussianMixture acc = scaled_mixture(state.w_hat, c0);
    for (const auto& c : scaled_mixture(w_inst, state.c_hat).components) {
        acc.add(c.weight, c.gaussian);
    }
    if (!w_inst.empty() && !state.w_hat.empty()) {
        for (const auto& c : mixture_product(w_inst, state.w_hat).components) {
            acc.add(c.weight, c.gaussian);
        }
    }
    next.w_hat = reduce(std::move(acc));

    double top = next.c_hat;
    for (const auto& c : next.w_hat.components) top = std::max(top, c.weight);
    if (top > 0.0) {
        next.c_hat /= top;
        for (auto& c : next.w_hat.components) c.weight /= top;
        next.log_scale += std::log(top);
    }
    return next;
}

DriftEstimate estimate_drift_known_orientation(const TotalCostState& state,
                                               const Vec& previous_estimate,
                                               std::size_t extra_starts) {
    DriftEstimate out;
    out.theta = previous_estimate;
    if (state.w_hat.empty()) {
        return out;
    }
    GaussianMixture drift_mix = restrict_to_drift(state.w_hat);
    if (drift_mix.empty()) return out;

    std::vector<Vec> inits{project_stacked_drift(previous_estimate)};
    std::vector<std::size_t> order(drift_mix.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return drift_mix.components[a].weight > drift_mix.components[b].weight;
    });
    for (std::size_t i = 0; i < std::min(extra_starts, order.size()); ++i) {
        inits.push_back(drift_mix.components[order[i]].gaussian.mean);
    }
    auto res = gm_argmax(drift_mix, inits);
    out.theta = lift_stacked_drift(res.argmax);
    out.value = res.value;
    out.updated = true;
    return out;
}

// ---------------------------------------------------------------------------
// Triplet initialization

namespace {

struct UnitLsqSolution {
    double gamma = 0.0;
    double residual = 0.0;
    bool ambiguous = false;
};

/// min over ||w|| = 1 of ||A w - b||^2 with w = (cos g, sin g): 720-point grid
/// plus Newton refinement; flags rank deficiency and near-tied minima.
UnitLsqSolution unit_least_squares(const Mat& a, const Vec& b) {
    const Eigen::Matrix2d q = a.transpose() * a;
    const Eigen::Vector2d u = a.transpose() * b;
    const double c0 = b.squaredNorm();

    auto f = [&](double g) {
        const Eigen::Vector2d w(std::cos(g), std::sin(g));
        return w.dot(q * w) - 2.0 * u.dot(w) + c0;
    };
    auto fp = [&](double g) {
        const Eigen::Vector2d w(std::cos(g), std::sin(g));
        const Eigen::Vector2d wp(-std::sin(g), std::cos(g));
        return wp.dot(2.0 * (q * w - u));
    };
    auto fpp = [&](double g) {
        const Eigen::Vector2d w(std::cos(g), std::sin(g));
        const Eigen::Vector2d wp(-std::sin(g), std::cos(g));
        return -w.dot(2.0 * (q * w - u)) + wp.dot(2.0 * (q * wp));
    };

    const int n = 720;
    std::vector<double> vals(n);
    for (int i = 0; i < n; ++i) vals[i] = f(-M_PI + 2.0 * M_PI * i / n);

    struct Minimum {
        double gamma;
        double value;
    };
    std::vector<Minimum> minima;
    for (int i = 0; i < n; ++i) {
        const double prev = vals[(i + n - 1) % n];
        const double next = vals[(i + 1) % n];
        if (vals[i] <= prev && vals[i] <= next) {
            double g = -M_PI + 2.0 * M_PI * i / n;
            for (int it = 0; it < 60; ++it) {
                const double d1 = fp(g), d2 = fpp(g);
                if (!(d2 > 0.0)) break;
                const double step = d1 / d2;
                g -= step;
                if (std::abs(step) < 1e-14) break;
            }
            g = wrap_angle(g);
            minima.push_back({g, f(g)});
        }
    }
    std::sort(minima.begin(), minima.end(),
              [](const Minimum& x, const Minimum& y) { return x.value < y.value; });
    // Collapse refinements that landed on the same angle.
    std::vector<Minimum> distinct;
    for (const auto& m : minima) {
        bool dup = false;
        for (const auto& d : distinct) {
            if (std::abs(wrap_angle(m.gamma - d.gamma)) < 1e-3) {
                dup = true;
                break;
            }
        }
        if (!dup) distinct.push_back(m);
    }

    UnitLsqSolution out;
    out.gamma = distinct.front().gamma;
    out.residual = distinct.front().value;
    if (distinct.size() > 1 &&
        distinct[1].value - distinct[0].value <= 1e-6 * (1.0 + std::abs(distinct[0].value))) {
        out.ambiguous = true;
    }
    Eigen::JacobiSVD<Mat> svd(a);
    const auto& sing = svd.singularValues();
    if (sing(sing.size() - 1) <= 1e-9 * std::max(1.0, sing(0))) {
        out.ambiguous = true;
    }
    return out;
}

Eigen::Matrix2d position_matrix(const Vec& mean) {
    Eigen::Matrix2d a;
    a << mean(0), -mean(2), mean(2), mean(0);
    return a;
}

}  // namespace

TripletInit triplet_initial_point(const IrfMixture& irf,
                                  const std::array<std::size_t, 3>& triplet) {
    for (std::size_t t : triplet) {
        if (t >= irf.association_count()) {
            throw std::invalid_argument("triplet_initial_point: bad association index");
        }
    }
    if (triplet[0] == triplet[1] || triplet[0] == triplet[2] || triplet[1] == triplet[2]) {
        throw std::invalid_argument("triplet_initial_point: associations must be distinct");
    }
    const int slots = irf.neighbor_count();
    const auto& assoc = irf.associations();

    std::array<Eigen::Vector2d, 3> b_self;
    for (int t = 0; t < 3; ++t) {
        const auto& mean = irf.self_table()[assoc[triplet[t]].pick[0]].mean;
        b_self[t] = Eigen::Vector2d(mean(0), mean(2));
    }

    TripletInit out;
    out.theta = Vec::Zero(4 * slots);
    out.gamma = Vec::Zero(slots);
    for (int m = 0; m < slots; ++m) {
        std::array<Eigen::Matrix2d, 3> a_nb;
        for (int t = 0; t < 3; ++t) {
            a_nb[t] = position_matrix(irf.neighbor_tables()[m][assoc[triplet[t]].pick[m + 1]].mean);
        }
        auto solve_pairing = [&](const std::array<int, 3>& perm) {
            Mat a(4, 2);
            a.topRows<2>() = a_nb[perm[0]] - a_nb[perm[1]];
            a.bottomRows<2>() = a_nb[perm[0]] - a_nb[perm[2]];
            Vec b(4);
            b.head<2>() = b_self[0] - b_self[1];
            b.tail<2>() = b_self[0] - b_self[2];
            return unit_least_squares(a, b);
        };

        const UnitLsqSolution sol = solve_pairing({0, 1, 2});
        const Eigen::Vector2d w(std::cos(sol.gamma), std::sin(sol.gamma));
        Eigen::Vector2d drift = Eigen::Vector2d::Zero();
        for (int t = 0; t < 3; ++t) drift += (b_self[t] - a_nb[t] * w) / 3.0;

        // A rotation-symmetric track constellation matches equally well under a
        // re-pairing of the tracks (equilateral triangles, symmetric polygons);
        // such registrations are geometrically ambiguous.
        bool ambiguous = sol.ambiguous;
        const double scale = 1.0 + (b_self[0] - b_self[1]).squaredNorm() +
                             (b_self[0] - b_self[2]).squaredNorm();
        static constexpr std::array<std::array<int, 3>, 5> kAltPairings{
            {{0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}}};
        for (const auto& perm : kAltPairings) {
            if (ambiguous) break;
            const UnitLsqSolution alt = solve_pairing(perm);
            if (alt.residual - sol.residual <= 1e-6 * scale &&
                std::abs(wrap_angle(alt.gamma - sol.gamma)) > 1e-3) {
                ambiguous = true;
            }
        }

        out.gamma(m) = sol.gamma;
        out.theta.segment<4>(4 * m) = lift_drift(drift);
        out.residual += sol.residual;
        out.ambiguous = out.ambiguous || ambiguous;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Instantaneous estimate: triplet-initialized joint ascent

namespace {

struct AscentResult {
    Vec drift;
    Vec gamma;
    double value = 0.0;
};

AscentResult joint_ascent(IrfEvaluator& ev, Vec drift, Vec gamma,
                          const InstantaneousEstimateConfig& cfg) {
    const int slots = static_cast<int>(gamma.size());
    ev.set_gamma(gamma);
    double value = ev.value(drift, cfg.gate_radius);
    int gamma_budget = cfg.gamma_newton_iterations;

    for (int outer = 0; outer < cfg.max_outer_iterations; ++outer) {
        const double value_before = value;

        // Drift mode at fixed orientation: Newton with backtracking.
        for (int it = 0; it < cfg.theta_newton_iterations; ++it) {
            Vec grad;
            Mat hess;
            const double fx = ev.value_grad_hess(drift, grad, hess, cfg.gate_radius);
            if (grad.norm() < 1e-10 * (1.0 + fx)) break;
            Vec dir;
            Eigen::LLT<Mat> neg_h((-hess).eval());
            if (neg_h.info() == Eigen::Success) {
                dir = neg_h.solve(grad);
            } else {
                dir = grad * (10.0 / std::max(grad.norm(), 1e-300));
            }
            double t = 1.0;
            bool improved = false;
            for (int ls = 0; ls < 30; ++ls) {
                const Vec cand = drift + t * dir;
                const double fc = ev.value(cand, cfg.gate_radius);
                if (fc > value) {
                    drift = cand;
                    value = fc;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if (!improved) break;
        }

        // One-dimensional Newton per orientation angle, analytic first
        // derivative, differenced second derivative.
        for (int m = 0; m < slots && gamma_budget > 0; ++m) {
            for (int it = 0; it < 8 && gamma_budget > 0; ++it, --gamma_budget) {
                double d1 = 0.0;
                ev.value_and_gamma_derivative(drift, m, cfg.gate_radius, d1);
                const double g0 = ev.gamma()(m);
                const double h = 1e-5;
                double d1p = 0.0, d1m = 0.0;
                ev.set_gamma_slot(m, g0 + h);
                ev.value_and_gamma_derivative(drift, m, cfg.gate_radius, d1p);
                ev.set_gamma_slot(m, g0 - h);
                ev.value_and_gamma_derivative(drift, m, cfg.gate_radius, d1m);
                ev.set_gamma_slot(m, g0);
                const double d2 = (d1p - d1m) / (2.0 * h);

                double step;
                if (d2 < 0.0) {
                    step = -d1 / d2;
                } else {
                    step = (d1 > 0.0 ? 0.05 : -0.05);
                }
                step = std::clamp(step, -0.3, 0.3);
                if (std::abs(step) < 1e-12) break;
                bool improved = false;
                for (int ls = 0; ls < 12; ++ls) {
                    ev.set_gamma_slot(m, wrap_angle(g0 + step));
                    const double fc = ev.value(drift, cfg.gate_radius);
                    if (fc > value) {
                        value = fc;
                        improved = true;
                        break;
                    }
                    step *= 0.5;
                }
                if (!improved) {
                    ev.set_gamma_slot(m, g0);
                    break;
                }
            }
        }

        if (value <= value_before * (1.0 + 1e-12)) break;
    }
    return {std::move(drift), ev.gamma(), value};
}

}  // namespace

std::optional<InstantaneousEstimate> instantaneous_estimate(
    const IrfMixture& irf, const InstantaneousEstimateConfig& cfg) {
    if (irf.association_count() < 3) return std::nullopt;
    const int slots = irf.neighbor_count();
    const auto& assoc = irf.associations();

    // Rank associations by their Gamma = 0 log peak value
    // log_c + 0.5 log det(2 pi Pbar).
    IrfEvaluator ev(irf, Vec::Zero(slots));
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(assoc.size());
    for (std::size_t k = 0; k < assoc.size(); ++k) {
        const auto& a = assoc[k];
        Mat s = irf.self_table()[a.pick[0]].cov_omega_inv;
        for (int m = 0; m < slots; ++m) {
            s += irf.neighbor_tables()[m][a.pick[m + 1]].cov_omega_inv;
        }
        SpdFactor sf(s);
        ranked.emplace_back(a.log_c + 0.5 * (4.0 * kLog2Pi) - 0.5 * sf.log_det(), k);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const std::size_t shortlist =
        std::min<std::size_t>(cfg.candidate_associations, ranked.size());

    // Enumerate triplets with distinct tracks at the self node and every slot.
    auto distinct_tracks = [&](std::size_t x, std::size_t y, std::size_t z) {
        const auto& px = assoc[x].pick;
        const auto& py = assoc[y].pick;
        const auto& pz = assoc[z].pick;
        for (std::size_t c = 0; c < px.size(); ++c) {
            if (px[c] == py[c] || px[c] == pz[c] || py[c] == pz[c]) return false;
        }
        return true;
    };
    struct Candidate {
        double score;
        std::array<std::size_t, 3> triplet;
    };
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < shortlist; ++i) {
        for (std::size_t j = i + 1; j < shortlist; ++j) {
            for (std::size_t l = j + 1; l < shortlist; ++l) {
                const std::size_t a = ranked[i].second, b = ranked[j].second,
                                  c = ranked[l].second;
                if (!distinct_tracks(a, b, c)) continue;
                candidates.push_back(
                    {ranked[i].first + ranked[j].first + ranked[l].first, {a, b, c}});
            }
        }
    }
    if (candidates.empty()) return std::nullopt;
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    if (candidates.size() > cfg.triplet_cap) candidates.resize(cfg.triplet_cap);

    // Score every triplet's initial point by the (gated) IRF value.
    struct Start {
        double value;
        Vec drift;
        Vec gamma;
    };
    std::vector<Start> starts;
    starts.reserve(candidates.size());
    for (const auto& cand : candidates) {
        TripletInit init = triplet_initial_point(irf, cand.triplet);
        ev.set_gamma(init.gamma);
        const Vec drift = project_stacked_drift(init.theta);
        starts.push_back({ev.value(drift, cfg.gate_radius), drift, init.gamma});
    }
    std::stable_sort(starts.begin(), starts.end(),
                     [](const Start& a, const Start& b) { return a.value > b.value; });
    const std::size_t n_starts = std::min<std::size_t>(cfg.ascent_starts, starts.size());

    AscentResult best;
    best.value = -1.0;
    for (std::size_t s = 0; s < n_starts; ++s) {
        AscentResult res = joint_ascent(ev, starts[s].drift, starts[s].gamma, cfg);
        if (res.value > best.value) best = std::move(res);
    }
    if (!(best.value >= 0.0) || best.drift.size() == 0) return std::nullopt;

    InstantaneousEstimate out;
    out.theta = lift_stacked_drift(best.drift);
    out.gamma = best.gamma;
    for (int m = 0; m < slots; ++m) out.gamma(m) = wrap_angle(out.gamma(m));
    ev.set_gamma(out.gamma);
    out.reward = ev.value(best.drift);  // exact, ungated
    return out;
}

// ---------------------------------------------------------------------------
// Multi-hypothesis combination

const Hypothesis& hypothesis_update(HypothesisSet& set, const InstantaneousEstimate& estimate,
                                    const HypothesisConfig& cfg) {
    if (estimate.reward < 0.0) {
        throw std::invalid_argument("hypothesis_update: negative reward");
    }
    const int blocks = static_cast<int>(estimate.gamma.size());
    const double thr_theta = cfg.delta_theta * std::sqrt(static_cast<double>(std::max(blocks, 1)));
    const double thr_gamma = cfg.delta_gamma * std::sqrt(static_cast<double>(std::max(blocks, 1)));

    std::vector<std::size_t> matched;
    for (std::size_t h = 0; h < set.items.size(); ++h) {
        const auto& hyp = set.items[h];
        const double d_theta = (estimate.theta - hyp.theta).norm();
        double g2 = 0.0;
        for (int m = 0; m < blocks; ++m) {
            const double d = wrap_angle(estimate.gamma(m) - hyp.gamma(m));
            g2 += d * d;
        }
        if (d_theta <= thr_theta && std::sqrt(g2) <= thr_gamma) matched.push_back(h);
    }

    if (matched.empty()) {
        set.items.push_back({estimate.theta, estimate.gamma, estimate.reward});
    } else {
        for (std::size_t h : matched) {
            auto& hyp = set.items[h];
            const double mix = estimate.reward / (hyp.weight + estimate.reward);
            hyp.theta = mix * estimate.theta + (1.0 - mix) * hyp.theta;
            for (int m = 0; m < blocks; ++m) {
                hyp.gamma(m) =
                    wrap_angle(hyp.gamma(m) + mix * wrap_angle(estimate.gamma(m) - hyp.gamma(m)));
            }
            hyp.weight += estimate.reward;
        }
    }

    if (set.items.size() > cfg.max_hypotheses) {
        std::size_t drop = 0;
        for (std::size_t h = 1; h < set.items.size(); ++h) {
            if (set.items[h].weight < set.items[drop].weight) drop = h;
        }
        set.items.erase(set.items.begin() + static_cast<std::ptrdiff_t>(drop));
    }

    std::size_t best = 0;
    for (std::size_t h = 1; h < set.items.size(); ++h) {
        if (set.items[h].weight > set.items[best].weight) best = h;
    }
    return set.items[best];
}

}  // namespace regtrack
