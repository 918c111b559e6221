#pragma once

#include <vector>

#include "regtrack/cphd.hpp"
#include "regtrack/fusion.hpp"
#include "regtrack/registration.hpp"

namespace regtrack {

struct RegistrationRuntimeConfig {
    bool known_orientation = false;
    int registration_ell = 1;      // consensus iteration at which registration runs
    int min_cardinality = 3;       // MAP-cardinality gate (self and neighbors), unknown case
    int min_cardinality_known = 1; // gate for the known-orientation path
    IrfConfig irf;
    InstantaneousEstimateConfig estimate;
    HypothesisConfig hypotheses;
    MergePruneConfig tc_reduction{1e-12, 4.0, 40, false};
};

struct JointStepConfig {
    int consensus_iterations = 3;  // L
    bool consensus_enabled = false;
    bool registration_enabled = true;
    FusionConfig fusion;
    MergePruneConfig cphd_reduction;
    RegistrationRuntimeConfig registration;
};

/// Per-node tracking and registration state. The neighbor list is sorted and
/// fixes the block order of the stacked estimates.
struct NodeState {
    int id = 0;
    std::vector<int> neighbors;  // excludes self
    IidClusterDensity density;

    Vec theta_est;   // stacked lifted drift, 4 per neighbor
    Vec gamma_est;   // one angle per neighbor
    HypothesisSet hypotheses;
    TotalCostState total_cost;

    /// Current estimated edge transforms in RegistrationParams form.
    RegistrationParams params() const;
    EdgeTransform edge_estimate(int neighbor) const;
    void set_edge_estimate(int neighbor, const EdgeTransform& e);
};

NodeState make_node_state(int id, const NetworkGraph& graph, IidClusterDensity initial);

/// One full time step of the joint algorithm across the network: local CPHD
/// prediction/correction, then L synchronous iterations of exchange, optional
/// registration (at the configured iteration) and optional GCI fusion.
/// Registration failures leave the previous estimates in place.
void joint_step(std::vector<NodeState>& nodes, const std::vector<std::vector<Vec>>& measurements,
                const std::vector<MotionModel>& motions, const std::vector<SensorModel>& sensors,
                const NetworkGraph& graph, const JointStepConfig& cfg);

}  // namespace regtrack
