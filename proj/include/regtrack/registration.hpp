#pragma once

#include <optional>
#include <vector>

#include "regtrack/cphd.hpp"
#include "regtrack/fusion.hpp"
#include "regtrack/gm.hpp"

namespace regtrack {

/// Signals that registration cannot run on the current inputs (empty neighbor
/// mixture, too few associations). Tracking continues with prior estimates.
class registration_unavailable : public std::runtime_error {
public:
    explicit registration_unavailable(const std::string& what) : std::runtime_error(what) {}
};

struct IrfConfig {
    std::size_t component_cap = 8;      // per-mixture pre-prune (N_cap)
    std::size_t association_cap = 512;  // associations kept, ranked at Gamma = 0
};

/// Explicit weight/mean/covariance of one IRF component at a given Gamma.
struct IrfComponent {
    double beta = 0.0;
    Vec phi;      // stacked drift mean, 4 * neighbor_count
    Mat upsilon;  // stacked covariance
};

/// The instantaneous reward factor
///   W(Theta, Gamma) = sum_k beta_k(Gamma) G(Theta; phi_k(Gamma), Upsilon_k(Gamma))
/// over all component associations between the neighborhood mixtures. Stores
/// the power-scaled per-component ingredients so every component is
/// re-evaluable at arbitrary orientations; evaluation works block-wise in 4x4
/// pieces and never forms the stacked covariance.
class IrfMixture {
public:
    struct NodeEntry {
        Vec mean;          // component mean in the owner's frame
        Mat cov_omega;     // P / omega
        Mat cov_omega_inv;
        double log_det_2pi_cov_omega;
    };

    /// Per-association index tuple: entry 0 is the self component, entries
    /// 1..n are the neighbor slots in order.
    struct Association {
        std::vector<int> pick;
        double log_c;  // Gamma-invariant part of log beta
    };

    int neighbor_count() const { return static_cast<int>(neighbor_tables_.size()); }
    Eigen::Index theta_dim() const { return 4 * neighbor_count(); }
    std::size_t association_count() const { return associations_.size(); }
    const std::vector<Association>& associations() const { return associations_; }
    const std::vector<NodeEntry>& self_table() const { return self_table_; }
    const std::vector<std::vector<NodeEntry>>& neighbor_tables() const { return neighbor_tables_; }

    /// Full IRF value; no gating, exact per the stored representation.
    double eval(const Vec& theta, const Vec& gamma) const;
    /// beta, phi, Upsilon of association k at the given orientations.
    IrfComponent component_at(std::size_t k, const Vec& gamma) const;
    /// Materializes the IRF as a Gaussian mixture over Theta at fixed Gamma.
    GaussianMixture as_mixture(const Vec& gamma) const;

    friend IrfMixture build_irf(const std::vector<IidClusterDensity>& densities,
                                const std::vector<double>& weights, std::size_t self_index,
                                const IrfConfig& cfg);
    friend class IrfEvaluator;

private:
    std::vector<NodeEntry> self_table_;
    std::vector<std::vector<NodeEntry>> neighbor_tables_;  // [slot][component]
    std::vector<Association> associations_;
};

/// Builds the IRF for the neighborhood given by `densities` (self included at
/// `self_index`) with the consensus weight row. Neighbor slots keep the input
/// order with the self entry removed. Throws registration_unavailable when a
/// spatial mixture is empty.
IrfMixture build_irf(const std::vector<IidClusterDensity>& densities,
                     const std::vector<double>& weights, std::size_t self_index,
                     const IrfConfig& cfg = {});

/// Analytic d/dgamma(slot) of the IRF value at (theta, gamma); drives the
/// orientation ascent.
double irf_orientation_derivative(const IrfMixture& irf, const Vec& theta, const Vec& gamma,
                                  int slot);

/// Fusion cardinality factors c_n = prod_j [p_j(n)]^(w_j).
Vec fusion_cardinality_factors(const std::vector<Vec>& card_pmfs,
                               const std::vector<double>& weights);

struct InstantaneousCostResult {
    double value = 0.0;
    bool underflow = false;  // value is +inf
};

/// Instantaneous cost -log( sum_n c_n W^n ) with the sum truncated at the PMF
/// length.
InstantaneousCostResult instantaneous_cost(const Vec& cardinality_factors, double irf_value);

/// Total-cost recursion state. The true pair is
///   C = exp(log_scale) * c_hat,  W_tilde(Theta) = exp(log_scale) * w_hat(Theta)
/// and the total cost is -log(C + W_tilde(Theta)). The shared scale keeps the
/// recursion in range over long runs; the argmax is scale-invariant.
struct TotalCostState {
    double c_hat = 1.0;
    GaussianMixture w_hat;
    double log_scale = 0.0;

    /// (c_hat + w_hat(theta)); multiply by exp(log_scale) for the true value.
    double scaled_value(const Vec& theta) const { return c_hat + w_hat.eval(theta); }
};

/// One step of the total-cost recursion with the known-orientation IRF given
/// as a Gaussian mixture over Theta. `reduction` bounds the mixture size; pass
/// nullptr to keep the expansion exact.
TotalCostState tc_update(const TotalCostState& state, const GaussianMixture& irf,
                         const Vec& cardinality_factors,
                         const MergePruneConfig* reduction = nullptr);

struct DriftEstimate {
    Vec theta;
    double value = 0.0;
    bool updated = false;  // false when the TC mixture was empty
};

/// Maximizes the total-cost mixture from the previous estimate plus the
/// top-weight component means.
DriftEstimate estimate_drift_known_orientation(const TotalCostState& state,
                                               const Vec& previous_estimate,
                                               std::size_t extra_starts = 5);

struct TripletInit {
    Vec theta;   // stacked drift, velocity entries zero
    Vec gamma;   // one angle per neighbor slot
    double residual = 0.0;
    bool ambiguous = false;  // rank-deficient or multiple equivalent rotations
};

/// Appendix-style initializer: matches the three association tracks of every
/// neighbor by a rotation (unit-vector least squares on a 720-point grid with
/// Newton refinement) followed by the mean residual translation.
TripletInit triplet_initial_point(const IrfMixture& irf, const std::array<std::size_t, 3>& triplet);

struct InstantaneousEstimateConfig {
    std::size_t candidate_associations = 24;  // shortlist for triplet enumeration
    std::size_t triplet_cap = 200;            // T_cap
    std::size_t ascent_starts = 4;            // best triplet inits refined by ascent
    int max_outer_iterations = 25;
    int theta_newton_iterations = 15;
    int gamma_newton_iterations = 50;  // total 1-dim Newton budget per start
    double gate_radius = std::numeric_limits<double>::infinity();  // per-block skip radius
};

struct InstantaneousEstimate {
    Vec theta;
    Vec gamma;
    double reward = 0.0;
};

/// Maximizes W(Theta, Gamma) by multiple initialization over association
/// triplets. Returns nullopt when fewer than three associations exist.
std::optional<InstantaneousEstimate> instantaneous_estimate(
    const IrfMixture& irf, const InstantaneousEstimateConfig& cfg = {});

struct Hypothesis {
    Vec theta;
    Vec gamma;
    double weight = 0.0;  // accumulated reward
};

struct HypothesisSet {
    std::vector<Hypothesis> items;
};

struct HypothesisConfig {
    double delta_theta = 50.0;                 // [m], scaled by sqrt(block count)
    double delta_gamma = 5.0 * M_PI / 180.0;   // [rad], scaled by sqrt(angle count)
    std::size_t max_hypotheses = 20;
};

/// Gated association/estimation update of the hypothesis set; returns the
/// highest-weight hypothesis after the update.
const Hypothesis& hypothesis_update(HypothesisSet& set, const InstantaneousEstimate& estimate,
                                    const HypothesisConfig& cfg);

}  // namespace regtrack
