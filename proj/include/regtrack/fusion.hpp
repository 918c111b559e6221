#pragma once

#include <string>
#include <utility>
#include <vector>

#include "regtrack/cphd.hpp"
#include "regtrack/geometry.hpp"
#include "regtrack/gm.hpp"

namespace regtrack {

/// Raised when GCI fusion loses all probability mass to underflow.
class fusion_degenerate_error : public std::runtime_error {
public:
    explicit fusion_degenerate_error(const std::string& what) : std::runtime_error(what) {}
};

/// Drift and orientation of one neighbor relative to a node's frame.
struct EdgeTransform {
    Eigen::Vector2d drift = Eigen::Vector2d::Zero();  // [m]
    double orientation = 0.0;                         // radians, wrapped to [-pi, pi)
};

/// Per-node registration parameters keyed by the node's fixed neighbor order.
struct RegistrationParams {
    std::vector<int> neighbors;         // excludes self
    std::vector<EdgeTransform> edges;   // aligned with neighbors

    const EdgeTransform& edge(int neighbor) const;
    EdgeTransform& edge(int neighbor);
};

struct NetworkGraph {
    int node_count = 0;
    std::vector<std::vector<int>> in_neighbors;  // sorted, includes self
    Mat weights;                                 // row-stochastic consensus weights

    void validate() const;
    /// Builds the graph from undirected edges with Metropolis weights
    /// 1/max(|N_i|, |N_j|) off-diagonal and the remainder on self.
    static NetworkGraph from_undirected_edges(int nodes,
                                              const std::vector<std::pair<int, int>>& edges);
};

/// Applies x -> M(gamma) x + theta to every spatial component; the cardinality
/// PMF is untouched and normalization is preserved (|det M| = 1).
IidClusterDensity transform_density(const IidClusterDensity& d, const Vec& theta, double gamma);

inline IidClusterDensity transform_density(const IidClusterDensity& d, const EdgeTransform& e) {
    return transform_density(d, lift_drift(e.drift), e.orientation);
}

struct FusionConfig {
    MergePruneConfig reduction;
    std::size_t max_input_components = 30;
    std::size_t max_intermediate_components = 150;
    double intermediate_prune_rel = 1e-13;
};

/// GCI / weighted KLA fusion of i.i.d. cluster densities expressed in a common
/// frame. The fused spatial PDF is the normalized product of gm_power outputs;
/// the fused PMF uses the closed-form spatial overlap integral.
IidClusterDensity gci_fuse(const std::vector<IidClusterDensity>& densities,
                           const std::vector<double>& weights, const FusionConfig& cfg = {});

struct GciDivergenceResult {
    double value = 0.0;
    bool underflow = false;  // value is +inf
};

/// -log of the set integral of the weighted geometric mean (the minimum
/// weighted average KLD attained by the fused density).
GciDivergenceResult gci_divergence(const std::vector<IidClusterDensity>& densities,
                                   const std::vector<double>& weights,
                                   const FusionConfig& cfg = {});

/// L synchronous consensus iterations: each node transforms the neighbor
/// densities into its own frame with its registration parameters and fuses
/// with its weight row. params[i] must cover every in-neighbor of node i.
std::vector<IidClusterDensity> consensus_round(const std::vector<IidClusterDensity>& densities,
                                               const NetworkGraph& graph,
                                               const std::vector<RegistrationParams>& params,
                                               int iterations, const FusionConfig& cfg = {});

/// Debug text form: cardinality PMF plus one line per spatial component
/// (weight, mean, row-major covariance). Round-trips through
/// density_from_text.
std::string density_to_text(const IidClusterDensity& d);
IidClusterDensity density_from_text(const std::string& text);

}  // namespace regtrack
