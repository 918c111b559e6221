#include "regtrack/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace regtrack {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const std::vector<double>& v) {
    double m = kNegInf;
    for (double x : v) m = std::max(m, x);
    if (m == kNegInf) return kNegInf;
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

struct LogComponent {
    double log_weight;
    Gaussian gaussian;
};

/// Keeps the strongest components: hard cap plus a relative floor.
void prune_log_components(std::vector<LogComponent>& comps, std::size_t max_count,
                          double rel_floor) {
    if (comps.empty()) return;
    double best = kNegInf;
    for (const auto& c : comps) best = std::max(best, c.log_weight);
    const double floor = best + std::log(rel_floor);
    comps.erase(std::remove_if(comps.begin(), comps.end(),
                               [&](const LogComponent& c) { return c.log_weight < floor; }),
                comps.end());
    if (comps.size() > max_count) {
        std::stable_sort(comps.begin(), comps.end(), [](const auto& a, const auto& b) {
            return a.log_weight > b.log_weight;
        });
        comps.resize(max_count);
    }
}

GaussianMixture cap_components(const GaussianMixture& mix, std::size_t max_count) {
    if (mix.size() <= max_count) return mix;
    GaussianMixture out = mix;
    std::stable_sort(out.components.begin(), out.components.end(),
                     [](const auto& a, const auto& b) { return a.weight > b.weight; });
    out.components.resize(max_count);
    out.normalize();
    return out;
}

/// Product of the powered spatial mixtures in log-weight space. Returns the
/// components and the log of the total mass (the spatial overlap integral).
std::pair<std::vector<LogComponent>, double> powered_product(
    const std::vector<const GaussianMixture*>& mixtures, const std::vector<double>& omegas,
    const FusionConfig& cfg) {
    std::vector<LogComponent> current;
    bool first = true;
    for (std::size_t j = 0; j < mixtures.size(); ++j) {
        GaussianMixture powered = gm_power(cap_components(*mixtures[j], cfg.max_input_components),
                                           omegas[j]);
        if (first) {
            for (const auto& c : powered.components) {
                if (c.weight <= 0.0) continue;
                current.push_back({std::log(c.weight), c.gaussian});
            }
            first = false;
            continue;
        }
        std::vector<LogComponent> next;
        next.reserve(current.size() * powered.size());
        for (const auto& a : current) {
            for (const auto& b : powered.components) {
                if (b.weight <= 0.0) continue;
                auto prod = gaussian_product({a.gaussian, b.gaussian});
                next.push_back(
                    {a.log_weight + std::log(b.weight) + prod.log_scale, std::move(prod.gaussian)});
            }
        }
        prune_log_components(next, cfg.max_intermediate_components, cfg.intermediate_prune_rel);
        current = std::move(next);
    }
    std::vector<double> logs;
    logs.reserve(current.size());
    for (const auto& c : current) logs.push_back(c.log_weight);
    return {std::move(current), log_sum_exp(logs)};
}

}  // namespace

const EdgeTransform& RegistrationParams::edge(int neighbor) const {
    for (std::size_t k = 0; k < neighbors.size(); ++k) {
        if (neighbors[k] == neighbor) return edges[k];
    }
    throw std::invalid_argument("RegistrationParams: unknown neighbor");
}

EdgeTransform& RegistrationParams::edge(int neighbor) {
    for (std::size_t k = 0; k < neighbors.size(); ++k) {
        if (neighbors[k] == neighbor) return edges[k];
    }
    throw std::invalid_argument("RegistrationParams: unknown neighbor");
}

void NetworkGraph::validate() const {
    if (node_count <= 0) throw std::invalid_argument("graph: no nodes");
    if (static_cast<int>(in_neighbors.size()) != node_count ||
        weights.rows() != node_count || weights.cols() != node_count) {
        throw std::invalid_argument("graph: inconsistent sizes");
    }
    for (int i = 0; i < node_count; ++i) {
        bool self = false;
        double row = 0.0;
        for (int j : in_neighbors[i]) {
            if (j < 0 || j >= node_count) throw std::invalid_argument("graph: bad neighbor index");
            if (j == i) self = true;
            if (weights(i, j) < 0.0) throw std::invalid_argument("graph: negative weight");
            row += weights(i, j);
        }
        if (!self) throw std::invalid_argument("graph: node missing from own neighborhood");
        if (std::abs(row - 1.0) > 1e-12) {
            throw std::invalid_argument("graph: weight row does not sum to one");
        }
    }
}

NetworkGraph NetworkGraph::from_undirected_edges(int nodes,
                                                 const std::vector<std::pair<int, int>>& edges) {
    NetworkGraph g;
    g.node_count = nodes;
    g.in_neighbors.assign(nodes, {});
    for (int i = 0; i < nodes; ++i) g.in_neighbors[i].push_back(i);
    for (auto [a, b] : edges) {
        if (a < 0 || b < 0 || a >= nodes || b >= nodes || a == b) {
            throw std::invalid_argument("graph: invalid edge");
        }
        g.in_neighbors[a].push_back(b);
        g.in_neighbors[b].push_back(a);
    }
    for (auto& nb : g.in_neighbors) {
        std::sort(nb.begin(), nb.end());
        nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    g.weights = Mat::Zero(nodes, nodes);
    for (int i = 0; i < nodes; ++i) {
        double off = 0.0;
        for (int j : g.in_neighbors[i]) {
            if (j == i) continue;
            const double w = 1.0 / static_cast<double>(std::max(g.in_neighbors[i].size(),
                                                                g.in_neighbors[j].size()));
            g.weights(i, j) = w;
            off += w;
        }
        g.weights(i, i) = 1.0 - off;
    }
    g.validate();
    return g;
}

IidClusterDensity transform_density(const IidClusterDensity& d, const Vec& theta, double gamma) {
    if (theta.size() != 4) throw std::invalid_argument("transform_density: theta must be 4-dim");
    const Eigen::Matrix4d m = rotation_matrix(gamma);
    IidClusterDensity out;
    out.card_pmf = d.card_pmf;
    out.spatial.components.reserve(d.spatial.size());
    for (const auto& c : d.spatial.components) {
        Gaussian g;
        g.mean = m * c.gaussian.mean + theta;
        g.cov = m * c.gaussian.cov * m.transpose();
        out.spatial.add(c.weight, std::move(g));
    }
    return out;
}

namespace {

struct PreparedFusion {
    std::vector<LogComponent> components;
    double log_overlap;
    Vec log_pmf;  // unnormalized
};

PreparedFusion prepare_fusion(const std::vector<IidClusterDensity>& densities,
                              const std::vector<double>& weights, const FusionConfig& cfg) {
    if (densities.empty() || densities.size() != weights.size()) {
        throw std::invalid_argument("gci_fuse: densities and weights must match and be nonempty");
    }
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw std::invalid_argument("gci_fuse: negative weight");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9) {
        throw std::invalid_argument("gci_fuse: weights must sum to one");
    }

    std::vector<const GaussianMixture*> mixes;
    std::vector<double> omegas;
    std::vector<std::size_t> active;
    for (std::size_t j = 0; j < densities.size(); ++j) {
        if (weights[j] <= 0.0) continue;  // zero-power factor is the constant one
        mixes.push_back(&densities[j].spatial);
        omegas.push_back(weights[j]);
        active.push_back(j);
    }
    if (mixes.empty()) throw std::invalid_argument("gci_fuse: all weights are zero");
    for (auto* m : mixes) {
        if (m->empty()) throw std::invalid_argument("gci_fuse: empty spatial mixture");
    }

    auto [comps, log_overlap] = powered_product(mixes, omegas, cfg);

    const int n_max = densities.front().n_max();
    for (const auto& d : densities) {
        if (d.n_max() != n_max) throw std::invalid_argument("gci_fuse: PMF length mismatch");
    }
    Vec log_pmf(n_max + 1);
    for (int n = 0; n <= n_max; ++n) {
        double lp = 0.0;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const double p = densities[active[a]].card_pmf(n);
            if (p <= 0.0) {
                lp = kNegInf;
                break;
            }
            lp += omegas[a] * std::log(p);
        }
        if (lp != kNegInf) lp += n * log_overlap;
        log_pmf(n) = lp;
    }
    return {std::move(comps), log_overlap, std::move(log_pmf)};
}

}  // namespace

IidClusterDensity gci_fuse(const std::vector<IidClusterDensity>& densities,
                           const std::vector<double>& weights, const FusionConfig& cfg) {
    PreparedFusion f = prepare_fusion(densities, weights, cfg);

    std::vector<double> lp(f.log_pmf.data(), f.log_pmf.data() + f.log_pmf.size());
    const double log_norm = log_sum_exp(lp);
    if (log_norm == kNegInf || !std::isfinite(log_norm)) {
        throw fusion_degenerate_error("gci_fuse: fused cardinality PMF has no mass");
    }

    IidClusterDensity out;
    out.card_pmf = Vec(f.log_pmf.size());
    for (int n = 0; n < f.log_pmf.size(); ++n) {
        out.card_pmf(n) = (f.log_pmf(n) == kNegInf) ? 0.0 : std::exp(f.log_pmf(n) - log_norm);
    }

    for (auto& c : f.components) {
        const double w = std::exp(c.log_weight - f.log_overlap);
        if (w > 0.0) out.spatial.add(w, std::move(c.gaussian));
    }
    if (out.spatial.empty()) {
        throw fusion_degenerate_error("gci_fuse: fused spatial mixture has no mass");
    }
    MergePruneConfig red = cfg.reduction;
    red.normalize_output = true;
    out.spatial = merge_prune(out.spatial, red);
    return out;
}

GciDivergenceResult gci_divergence(const std::vector<IidClusterDensity>& densities,
                                   const std::vector<double>& weights, const FusionConfig& cfg) {
    PreparedFusion f = prepare_fusion(densities, weights, cfg);
    std::vector<double> lp(f.log_pmf.data(), f.log_pmf.data() + f.log_pmf.size());
    const double log_set_integral = log_sum_exp(lp);
    if (log_set_integral == kNegInf) {
        return {std::numeric_limits<double>::infinity(), true};
    }
    return {std::max(0.0, -log_set_integral), false};
}

std::vector<IidClusterDensity> consensus_round(const std::vector<IidClusterDensity>& densities,
                                               const NetworkGraph& graph,
                                               const std::vector<RegistrationParams>& params,
                                               int iterations, const FusionConfig& cfg) {
    if (iterations < 0) throw std::invalid_argument("consensus_round: negative iteration count");
    graph.validate();
    if (static_cast<int>(densities.size()) != graph.node_count ||
        static_cast<int>(params.size()) != graph.node_count) {
        throw std::invalid_argument("consensus_round: size mismatch with graph");
    }
    std::vector<IidClusterDensity> current = densities;
    for (int ell = 0; ell < iterations; ++ell) {
        std::vector<IidClusterDensity> next(current.size());
        for (int i = 0; i < graph.node_count; ++i) {
            std::vector<IidClusterDensity> local;
            std::vector<double> w;
            local.reserve(graph.in_neighbors[i].size());
            for (int j : graph.in_neighbors[i]) {
                if (j == i) {
                    local.push_back(current[i]);
                } else {
                    local.push_back(transform_density(current[j], params[i].edge(j)));
                }
                w.push_back(graph.weights(i, j));
            }
            next[i] = gci_fuse(local, w, cfg);
        }
        current = std::move(next);
    }
    return current;
}

std::string density_to_text(const IidClusterDensity& d) {
    std::ostringstream os;
    os.precision(17);
    os << "pmf:";
    for (int n = 0; n < d.card_pmf.size(); ++n) os << ' ' << d.card_pmf(n);
    os << '\n';
    for (const auto& c : d.spatial.components) {
        os << "component: " << c.weight << " |";
        for (int i = 0; i < c.gaussian.mean.size(); ++i) os << ' ' << c.gaussian.mean(i);
        os << " |";
        for (int r = 0; r < c.gaussian.cov.rows(); ++r) {
            for (int k = 0; k < c.gaussian.cov.cols(); ++k) os << ' ' << c.gaussian.cov(r, k);
        }
        os << '\n';
    }
    return os.str();
}

IidClusterDensity density_from_text(const std::string& text) {
    IidClusterDensity d;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "pmf:") {
            std::vector<double> vals;
            double v;
            while (ls >> v) vals.push_back(v);
            d.card_pmf = Eigen::Map<Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
        } else if (tag == "component:") {
            double w;
            std::string bar;
            ls >> w >> bar;
            std::vector<double> nums;
            std::string tok;
            while (ls >> tok) {
                if (tok == "|") {
                    nums.push_back(std::numeric_limits<double>::quiet_NaN());  // separator
                } else {
                    nums.push_back(std::stod(tok));
                }
            }
            // Split on the NaN separator: mean then covariance.
            std::vector<double> mean, cov;
            bool after = false;
            for (double v : nums) {
                if (std::isnan(v)) {
                    after = true;
                    continue;
                }
                (after ? cov : mean).push_back(v);
            }
            const auto dim = static_cast<Eigen::Index>(mean.size());
            if (dim * dim != static_cast<Eigen::Index>(cov.size())) {
                throw std::invalid_argument("density_from_text: malformed component line");
            }
            Gaussian g;
            g.mean = Eigen::Map<Vec>(mean.data(), dim);
            g.cov = Eigen::Map<Mat>(cov.data(), dim, dim);
            g.cov = Mat(g.cov.transpose());  // row-major text order
            d.spatial.add(w, std::move(g));
        } else {
            throw std::invalid_argument("density_from_text: unknown line tag '" + tag + "'");
        }
    }
    if (d.card_pmf.size() == 0) throw std::invalid_argument("density_from_text: missing pmf line");
    return d;
}

}  // namespace regtrack
