#include "regtrack/registration.hpp"

#include <array>
#include <cmath>
#include <random>

#include "doctest.h"
#include "regtrack/geometry.hpp"

using namespace regtrack;

namespace {

Mat random_spd2(std::mt19937& rng, double scale) {
    std::normal_distribution<double> n(0.0, 1.0);
    Mat a(2, 2);
    a << n(rng), n(rng), n(rng), n(rng);
    return scale * (a * a.transpose()) + 0.4 * scale * Mat::Identity(2, 2);
}

/// 4x4 covariance with independent position block and unit velocity block, in
/// the interleaved state order [xi, xi_dot, eta, eta_dot].
Mat block_cov(const Mat& pos_cov) {
    Mat p = Mat::Identity(4, 4);
    p(0, 0) = pos_cov(0, 0);
    p(0, 2) = pos_cov(0, 1);
    p(2, 0) = pos_cov(1, 0);
    p(2, 2) = pos_cov(1, 1);
    return p;
}

Vec state_from(double xi, double eta, double vxi = 0.0, double veta = 0.0) {
    Vec x(4);
    x << xi, vxi, eta, veta;
    return x;
}

IidClusterDensity density_from_components(const std::vector<Vec>& means,
                                          const std::vector<Mat>& covs) {
    IidClusterDensity d;
    d.card_pmf = Vec::Zero(static_cast<Eigen::Index>(means.size()) + 1);
    d.card_pmf(static_cast<Eigen::Index>(means.size())) = 1.0;
    for (std::size_t k = 0; k < means.size(); ++k) {
        d.spatial.add(1.0 / static_cast<double>(means.size()), Gaussian(means[k], covs[k]));
    }
    return d;
}

/// Expresses a node-i density in the frame of a node whose pose relative to i
/// is (drift, gamma): x^i = M(gamma) x^j + lift(drift).
IidClusterDensity to_neighbor_frame(const IidClusterDensity& in_i, const Eigen::Vector2d& drift,
                                    double gamma) {
    const Vec theta_inv = -(rotation_matrix(-gamma) * lift_drift(drift));
    return transform_density(in_i, theta_inv, -gamma);
}

/// Midpoint/Simpson quadrature of the true weighted geometric mean of the
/// position marginals; the velocity marginals are constructed to integrate to
/// one exactly.
double irf_position_quadrature(const std::vector<GaussianMixture>& pos_mixtures,
                               const std::vector<double>& omegas,
                               const std::vector<Eigen::Vector2d>& drifts,
                               const std::vector<double>& gammas, double center_x,
                               double center_y, double half_width, int cells) {
    const double h = 2.0 * half_width / cells;
    auto integrand = [&](double px, double py) {
        double prod = 1.0;
        for (std::size_t j = 0; j < pos_mixtures.size(); ++j) {
            const Eigen::Matrix2d rinv = rotation2(-gammas[j]);
            const Eigen::Vector2d local =
                rinv * (Eigen::Vector2d(px, py) - drifts[j]);
            Vec x(2);
            x << local(0), local(1);
            const double s = pos_mixtures[j].eval(x);
            if (s <= 0.0) return 0.0;
            prod *= std::pow(s, omegas[j]);
        }
        return prod;
    };
    // Simpson in both axes (cells must be even).
    double sum = 0.0;
    for (int i = 0; i <= cells; ++i) {
        const double wx = (i == 0 || i == cells) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        const double px = center_x - half_width + i * h;
        for (int j = 0; j <= cells; ++j) {
            const double wy = (j == 0 || j == cells) ? 1.0 : (j % 2 == 1 ? 4.0 : 2.0);
            const double py = center_y - half_width + j * h;
            sum += wx * wy * integrand(px, py);
        }
    }
    return sum * h * h / 9.0;
}

GaussianMixture position_marginal(const IidClusterDensity& d) {
    GaussianMixture out;
    for (const auto& c : d.spatial.components) {
        Vec m(2);
        m << c.gaussian.mean(0), c.gaussian.mean(2);
        Mat p(2, 2);
        p << c.gaussian.cov(0, 0), c.gaussian.cov(0, 2), c.gaussian.cov(2, 0),
            c.gaussian.cov(2, 2);
        out.add(c.weight, Gaussian(m, p));
    }
    return out;
}

}  // namespace

TEST_CASE("build_irf association counts and singleton mean") {
    auto self = density_from_components({state_from(3.0, 1.0)}, {Mat::Identity(4, 4)});
    auto nb = density_from_components({state_from(-2.0, 4.0)}, {Mat::Identity(4, 4)});
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
    CHECK(irf.association_count() == 1);
    CHECK(irf.neighbor_count() == 1);

    auto comp = irf.component_at(0, Vec::Zero(1));
    Vec expected = self.spatial.components[0].gaussian.mean - nb.spatial.components[0].gaussian.mean;
    CHECK((comp.phi - expected).norm() < 1e-12);

    auto self2 = density_from_components({state_from(0, 0), state_from(10, 10)},
                                         {Mat::Identity(4, 4), Mat::Identity(4, 4)});
    auto nb3 = density_from_components(
        {state_from(1, 1), state_from(5, 5), state_from(9, 9)},
        {Mat::Identity(4, 4), Mat::Identity(4, 4), Mat::Identity(4, 4)});
    auto irf6 = build_irf({self2, nb3}, {0.5, 0.5}, 0);
    CHECK(irf6.association_count() == 6);
}

TEST_CASE("build_irf signals unavailable on empty neighbor mixtures") {
    auto self = density_from_components({state_from(0, 0)}, {Mat::Identity(4, 4)});
    IidClusterDensity empty;
    empty.card_pmf = Vec::Zero(2);
    empty.card_pmf(0) = 1.0;
    CHECK_THROWS_AS(build_irf({self, empty}, {0.5, 0.5}, 0), registration_unavailable);
}

TEST_CASE("IRF block evaluation agrees with the materialized mixture") {
    std::mt19937 rng(51);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    std::uniform_real_distribution<double> ang(-M_PI, M_PI);
    // Three-node neighborhood (two slots) with two components each.
    auto mk = [&]() {
        return density_from_components(
            {state_from(u(rng), u(rng), u(rng) * 0.1, u(rng) * 0.1),
             state_from(u(rng) + 20.0, u(rng) - 15.0)},
            {block_cov(random_spd2(rng, 2.0)), block_cov(random_spd2(rng, 2.0))});
    };
    auto self = mk(), nb1 = mk(), nb2 = mk();
    auto irf = build_irf({self, nb1, nb2}, {0.4, 0.3, 0.3}, 0);
    CHECK(irf.association_count() == 8);

    for (int trial = 0; trial < 10; ++trial) {
        Vec gamma(2);
        gamma << ang(rng), ang(rng);
        Vec theta = Vec::Zero(8);
        theta(0) = u(rng);
        theta(2) = u(rng);
        theta(4) = u(rng);
        theta(6) = u(rng);
        const double fast = irf.eval(theta, gamma);
        const double direct = irf.as_mixture(gamma).eval(theta);
        CHECK(fast == doctest::Approx(direct).epsilon(1e-10));
    }
}

TEST_CASE("IRF matches position quadrature for single-component neighbors") {
    std::mt19937 rng(52);
    std::uniform_real_distribution<double> u(-8.0, 8.0);
    std::uniform_real_distribution<double> ud(-5.0, 5.0);
    std::uniform_real_distribution<double> ang(-M_PI, M_PI);

    for (int trial = 0; trial < 12; ++trial) {
        auto self = density_from_components({state_from(u(rng), u(rng))},
                                            {block_cov(random_spd2(rng, 2.0))});
        auto nb = density_from_components({state_from(u(rng), u(rng))},
                                          {block_cov(random_spd2(rng, 2.0))});
        const double w_self = 0.5, w_nb = 0.5;
        auto irf = build_irf({self, nb}, {w_self, w_nb}, 0);

        const Eigen::Vector2d drift(ud(rng), ud(rng));
        const double gamma = ang(rng);
        const double impl = irf.eval(lift_drift(drift), Vec::Constant(1, gamma));

        // Box around both transformed means.
        const Eigen::Vector2d m_self(self.spatial.components[0].gaussian.mean(0),
                                     self.spatial.components[0].gaussian.mean(2));
        const Eigen::Vector2d m_nb_local(nb.spatial.components[0].gaussian.mean(0),
                                         nb.spatial.components[0].gaussian.mean(2));
        const Eigen::Vector2d m_nb = rotation2(gamma) * m_nb_local + drift;
        const Eigen::Vector2d mid = 0.5 * (m_self + m_nb);
        const double spread = (m_self - m_nb).norm() / 2.0 + 40.0;

        const double quad = irf_position_quadrature(
            {position_marginal(self), position_marginal(nb)}, {w_self, w_nb},
            {Eigen::Vector2d::Zero(), drift}, {0.0, gamma}, mid(0), mid(1), spread, 900);

        if (quad > 1e-200) {
            CHECK(std::abs(impl - quad) / quad < 1e-4);
        }
    }
}

TEST_CASE("IRF within 5 percent of quadrature for two-component neighbors") {
    std::mt19937 rng(53);
    std::uniform_real_distribution<double> u(-6.0, 6.0);
    std::uniform_real_distribution<double> ud(-4.0, 4.0);
    std::uniform_real_distribution<double> ang(-0.6, 0.6);

    for (int trial = 0; trial < 6; ++trial) {
        // Components separated by ~10 sigma so the power approximation is tight.
        auto mk = [&]() {
            const double cx = u(rng), cy = u(rng);
            return density_from_components(
                {state_from(cx, cy), state_from(cx + 18.0, cy + 14.0)},
                {block_cov(random_spd2(rng, 1.2)), block_cov(random_spd2(rng, 1.2))});
        };
        auto self = mk(), nb = mk();
        auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);

        const Eigen::Vector2d drift(ud(rng), ud(rng));
        const double gamma = ang(rng);
        const double impl = irf.eval(lift_drift(drift), Vec::Constant(1, gamma));

        const double quad = irf_position_quadrature(
            {position_marginal(self), position_marginal(nb)}, {0.5, 0.5},
            {Eigen::Vector2d::Zero(), drift}, {0.0, gamma}, 0.0, 0.0, 70.0, 1400);

        if (quad > 1e-100) {
            CHECK(std::abs(impl - quad) / quad < 0.05);
        }
    }
}

TEST_CASE("analytic orientation derivative matches finite differences") {
    std::mt19937 rng(54);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    auto self = density_from_components(
        {state_from(u(rng), u(rng), 0.3, -0.2), state_from(u(rng) + 8, u(rng) - 8)},
        {block_cov(random_spd2(rng, 1.5)), block_cov(random_spd2(rng, 1.5))});
    auto nb = density_from_components(
        {state_from(u(rng), u(rng)), state_from(u(rng) - 7, u(rng) + 9, -0.1, 0.4)},
        {block_cov(random_spd2(rng, 1.5)), block_cov(random_spd2(rng, 1.5))});
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);

    for (int trial = 0; trial < 8; ++trial) {
        Vec gamma = Vec::Constant(1, u(rng) * 0.3);
        Vec theta = lift_drift({u(rng), u(rng)});
        const double d_analytic = irf_orientation_derivative(irf, theta, gamma, 0);
        const double h = 1e-6;
        const double fp = irf.eval(theta, Vec::Constant(1, gamma(0) + h));
        const double fm = irf.eval(theta, Vec::Constant(1, gamma(0) - h));
        const double d_fd = (fp - fm) / (2.0 * h);
        CHECK(d_analytic == doctest::Approx(d_fd).epsilon(1e-5));
    }
}

TEST_CASE("instantaneous_cost closed form and degeneracies") {
    // Empty scene: c_0 = 1 regardless of W.
    Vec c = Vec::Zero(4);
    c(0) = 1.0;
    auto r = instantaneous_cost(c, 0.123);
    CHECK_FALSE(r.underflow);
    CHECK(r.value == doctest::Approx(0.0));

    // Self-fusion: single node with weight one, W = 1 => cost 0.
    Vec pmf(3);
    pmf << 0.3, 0.5, 0.2;
    Vec cf = fusion_cardinality_factors({pmf}, {1.0});
    CHECK((cf - pmf).norm() < 1e-15);
    auto rs = instantaneous_cost(cf, 1.0);
    CHECK(rs.value == doctest::Approx(0.0).epsilon(1e-12));

    // Direct-sum oracle.
    std::mt19937 rng(55);
    Vec p1(4), p2(4);
    double s1 = 0, s2 = 0;
    for (int n = 0; n < 4; ++n) {
        p1(n) = std::generate_canonical<double, 53>(rng);
        p2(n) = std::generate_canonical<double, 53>(rng);
        s1 += p1(n);
        s2 += p2(n);
    }
    p1 /= s1;
    p2 /= s2;
    const double w = 0.7;
    Vec cf2 = fusion_cardinality_factors({p1, p2}, {0.35, 0.65});
    double direct = 0.0;
    for (int n = 0; n < 4; ++n) {
        direct += std::pow(p1(n), 0.35) * std::pow(p2(n), 0.65) * std::pow(w, n);
    }
    auto r2 = instantaneous_cost(cf2, w);
    CHECK(r2.value == doctest::Approx(-std::log(direct)).epsilon(1e-12));

    // Underflow flag.
    Vec zero = Vec::Zero(3);
    CHECK(instantaneous_cost(zero, 0.5).underflow);
}

TEST_CASE("Prop 1: instantaneous cost equals the brute-force set integral") {
    // Two nodes, one-dimensional surrogate spatial PDFs, N_max in {1, 2}.
    std::mt19937 rng(56);
    std::uniform_real_distribution<double> u(-2.0, 2.0);

    for (int n_max : {1, 2}) {
        GaussianMixture s1, s2;
        s1.add(0.6, Gaussian(Vec::Constant(1, u(rng)), Mat::Constant(1, 1, 1.1)));
        s1.add(0.4, Gaussian(Vec::Constant(1, u(rng) + 3.0), Mat::Constant(1, 1, 0.8)));
        s2.add(1.0, Gaussian(Vec::Constant(1, u(rng)), Mat::Constant(1, 1, 1.4)));

        Vec p1(n_max + 1), p2(n_max + 1);
        double a = 0, b = 0;
        for (int n = 0; n <= n_max; ++n) {
            p1(n) = 0.3 + std::generate_canonical<double, 53>(rng);
            p2(n) = 0.3 + std::generate_canonical<double, 53>(rng);
            a += p1(n);
            b += p2(n);
        }
        p1 /= a;
        p2 /= b;
        const double w1 = 0.45, w2 = 0.55;

        // 2001-point grid over [-20, 20].
        const int grid = 2001;
        const double lo = -20.0, hi = 20.0, h = (hi - lo) / (grid - 1);
        std::vector<double> gm(grid);  // weighted geometric mean samples
        for (int i = 0; i < grid; ++i) {
            Vec x = Vec::Constant(1, lo + i * h);
            gm[i] = std::pow(s1.eval(x), w1) * std::pow(s2.eval(x), w2);
        }
        auto trapz = [&](auto&& f) {
            double acc = 0.0;
            for (int i = 0; i < grid; ++i) {
                const double wq = (i == 0 || i == grid - 1) ? 0.5 : 1.0;
                acc += wq * f(i);
            }
            return acc * h;
        };
        const double overlap = trapz([&](int i) { return gm[i]; });

        // Appendix-style expansion: sum_n (1/n!) * prod_j (n! p_j(n))^(w_j) *
        // (n-fold product integral). The n-fold integral factorizes on the grid.
        double set_integral = 0.0;
        for (int n = 0; n <= n_max; ++n) {
            double inv_fact = 1.0;
            for (int i = 2; i <= n; ++i) inv_fact /= i;
            double fact_pow = 1.0;  // prod_j (n!)^(w_j) = n!
            for (int i = 2; i <= n; ++i) fact_pow *= i;
            const double card = std::pow(p1(n), w1) * std::pow(p2(n), w2);
            double nfold = 1.0;
            for (int i = 0; i < n; ++i) nfold *= overlap;
            set_integral += inv_fact * fact_pow * card * nfold;
        }
        const double oracle = -std::log(set_integral);

        Vec cf = fusion_cardinality_factors({p1, p2}, {w1, w2});
        auto res = instantaneous_cost(cf, overlap);
        CHECK(std::abs(res.value - oracle) < 1e-5);
    }
}

TEST_CASE("IC minimization coincides with IRF maximization on a grid") {
    auto self = density_from_components({state_from(2.0, -1.0)}, {block_cov(random_spd2(
                                            *(new std::mt19937(57)), 2.0))});
    auto nb = density_from_components({state_from(-3.0, 2.0)}, {Mat::Identity(4, 4)});
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
    Vec pmf(3);
    pmf << 0.2, 0.5, 0.3;
    Vec cf = fusion_cardinality_factors({pmf, pmf}, {0.5, 0.5});

    double best_w = -1.0, best_cost = std::numeric_limits<double>::infinity();
    int arg_w = -1, arg_cost = -1;
    int idx = 0;
    for (double x = -10.0; x <= 10.0; x += 0.5) {
        for (double y = -10.0; y <= 10.0; y += 0.5, ++idx) {
            const double w = irf.eval(lift_drift({x, y}), Vec::Zero(1));
            const double cost = instantaneous_cost(cf, w).value;
            if (w > best_w) {
                best_w = w;
                arg_w = idx;
            }
            if (cost < best_cost) {
                best_cost = cost;
                arg_cost = idx;
            }
        }
    }
    CHECK(arg_w == arg_cost);
}

TEST_CASE("total cost recursion matches the direct product expansion") {
    std::mt19937 rng(58);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    const int n_max = 2;

    // Three steps of small two-node IRFs; keep every component (no pruning).
    std::vector<GaussianMixture> irfs;
    std::vector<Vec> factors;
    std::vector<IidClusterDensity> selves, nbs;
    for (int s = 0; s < 3; ++s) {
        auto self = density_from_components({state_from(u(rng), u(rng))},
                                            {block_cov(random_spd2(rng, 2.0))});
        auto nb = density_from_components({state_from(u(rng), u(rng))},
                                          {block_cov(random_spd2(rng, 2.0))});
        auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
        irfs.push_back(irf.as_mixture(Vec::Zero(1)));
        Vec p1(n_max + 1), p2(n_max + 1);
        p1 << 0.2, 0.5, 0.3;
        p2 << 0.15, 0.45, 0.4;
        factors.push_back(fusion_cardinality_factors({p1, p2}, {0.5, 0.5}));
    }

    TotalCostState state;
    for (int s = 0; s < 3; ++s) state = tc_update(state, irfs[s], factors[s], nullptr);

    // Pointwise oracle on a 50x50 drift grid.
    for (int gx = 0; gx < 50; gx += 7) {
        for (int gy = 0; gy < 50; gy += 7) {
            const double x = -8.0 + 16.0 * gx / 49.0;
            const double y = -8.0 + 16.0 * gy / 49.0;
            const Vec theta = lift_drift({x, y});
            double direct = 1.0;
            for (int s = 0; s < 3; ++s) {
                const double w = irfs[s].eval(theta);
                double sum = factors[s](0);
                double pw = 1.0;
                for (int n = 1; n <= n_max; ++n) {
                    pw *= w;
                    sum += factors[s](n) * pw;
                }
                direct *= sum;
            }
            const double via = std::exp(state.log_scale) * state.scaled_value(theta);
            CHECK(via == doctest::Approx(direct).epsilon(1e-6));
        }
    }
}

TEST_CASE("tc_update trivial first step and empty-scene steps") {
    GaussianMixture irf;
    irf.add(0.4, Gaussian(lift_drift({1.0, 2.0}), Mat::Identity(4, 4)));
    Vec cf(3);
    cf << 0.5, 0.3, 0.2;

    TotalCostState s0;
    auto s1 = tc_update(s0, irf, cf, nullptr);
    // W_tilde after the first update equals the instantaneous mixture.
    Vec probe = lift_drift({1.0, 2.0});
    double w_inst = 0.3 * irf.eval(probe);
    {
        auto pair_prod = [&](const Vec& x) {
            GaussianMixture sq;
            for (const auto& a : irf.components) {
                for (const auto& b : irf.components) {
                    auto p = gaussian_product({a.gaussian, b.gaussian});
                    sq.add(a.weight * b.weight * p.scale, p.gaussian);
                }
            }
            return sq.eval(x);
        };
        w_inst += 0.2 * pair_prod(probe);
    }
    CHECK(std::exp(s1.log_scale) * s1.w_hat.eval(probe) == doctest::Approx(w_inst).epsilon(1e-10));
    CHECK(std::exp(s1.log_scale) * s1.c_hat == doctest::Approx(0.5).epsilon(1e-12));

    // Empty scene (c_0 = 1, all other factors 0) changes nothing.
    Vec empty_cf = Vec::Zero(3);
    empty_cf(0) = 1.0;
    TotalCostState t0;
    auto t1 = tc_update(t0, irf, empty_cf, nullptr);
    auto t2 = tc_update(t1, irf, empty_cf, nullptr);
    CHECK(std::exp(t2.log_scale) * t2.c_hat == doctest::Approx(1.0));
    CHECK(t2.w_hat.empty());
}

TEST_CASE("estimate_drift_known_orientation finds construction truth") {
    // Single-Gaussian TC mixture: argmax at its (lifted) mean.
    TotalCostState state;
    state.c_hat = 0.0;
    state.w_hat.add(1.0, Gaussian(lift_drift({4.0, -2.0}), Mat::Identity(4, 4)));
    auto est = estimate_drift_known_orientation(state, Vec::Zero(4));
    CHECK(est.updated);
    CHECK((est.theta - lift_drift({4.0, -2.0})).norm() < 1e-6);

    // Exact singleton association between two nodes displaced by a known drift.
    const Eigen::Vector2d true_drift(7.0, -3.0);
    auto self = density_from_components({state_from(10.0, 5.0, 1.0, -0.5)},
                                        {Mat::Identity(4, 4)});
    auto nb = to_neighbor_frame(self, true_drift, 0.0);
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
    Vec pmf(2);
    pmf << 0.0, 1.0;
    Vec cf = fusion_cardinality_factors({pmf, pmf}, {0.5, 0.5});
    TotalCostState s0;
    auto s1 = tc_update(s0, irf.as_mixture(Vec::Zero(1)), cf, nullptr);
    auto est2 = estimate_drift_known_orientation(s1, Vec::Zero(4));
    CHECK((project_drift(est2.theta) - true_drift).norm() < 1e-6);

    // Ascent guarantee relative to the previous estimate.
    Vec prev = lift_drift({100.0, 100.0});
    auto est3 = estimate_drift_known_orientation(s1, prev);
    const GaussianMixture irf_gm = irf.as_mixture(Vec::Zero(1));
    CHECK(std::exp(s1.log_scale) * s1.scaled_value(est3.theta) >=
          std::exp(s1.log_scale) * s1.scaled_value(prev) - 1e-15);

    // Empty mixture: no update.
    TotalCostState empty;
    auto est4 = estimate_drift_known_orientation(empty, prev);
    CHECK_FALSE(est4.updated);
    CHECK((est4.theta - prev).norm() == 0.0);
}

TEST_CASE("triplet_initial_point recovers exact noiseless registrations") {
    std::mt19937 rng(59);
    std::uniform_real_distribution<double> pos(-300.0, 300.0);
    std::uniform_real_distribution<double> ang(-M_PI, M_PI);
    std::uniform_real_distribution<double> dr(-150.0, 150.0);

    int recovered = 0;
    for (int trial = 0; trial < 100; ++trial) {
        // Three well-separated targets with non-degenerate geometry.
        std::vector<Vec> means;
        for (int t = 0; t < 3; ++t) means.push_back(state_from(pos(rng), pos(rng)));
        const Eigen::Vector2d d01(means[0](0) - means[1](0), means[0](2) - means[1](2));
        const Eigen::Vector2d d02(means[0](0) - means[2](0), means[0](2) - means[2](2));
        if (d01.norm() < 40.0 || d02.norm() < 40.0 ||
            std::abs(d01(0) * d02(1) - d01(1) * d02(0)) < 500.0) {
            continue;  // skip collinear or tight geometry
        }
        const Eigen::Vector2d true_drift(dr(rng), dr(rng));
        const double true_gamma = ang(rng);

        auto self = density_from_components(
            means, {Mat::Identity(4, 4), Mat::Identity(4, 4), Mat::Identity(4, 4)});
        auto nb = to_neighbor_frame(self, true_drift, true_gamma);
        auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
        REQUIRE(irf.association_count() == 9);

        // Diagonal associations (t, t): find their indices.
        std::array<std::size_t, 3> triplet{};
        for (std::size_t k = 0; k < irf.association_count(); ++k) {
            const auto& p = irf.associations()[k].pick;
            if (p[0] == p[1] && p[0] < 3) triplet[static_cast<std::size_t>(p[0])] = k;
        }
        auto init = triplet_initial_point(irf, triplet);
        CHECK((project_drift(Eigen::Vector4d(init.theta)) - true_drift).norm() < 1e-9);
        CHECK(std::abs(wrap_angle(init.gamma(0) - true_gamma)) < 1e-9);
        CHECK_FALSE(init.ambiguous);
        ++recovered;
    }
    CHECK(recovered > 60);
}

TEST_CASE("triplet_initial_point flags the equilateral ambiguity") {
    // Equal-sided triangle centered at the origin.
    const double r = 100.0;
    std::vector<Vec> means;
    for (int t = 0; t < 3; ++t) {
        const double a = 2.0 * M_PI * t / 3.0;
        means.push_back(state_from(r * std::cos(a), r * std::sin(a)));
    }
    auto self = density_from_components(
        means, {Mat::Identity(4, 4), Mat::Identity(4, 4), Mat::Identity(4, 4)});
    auto nb = to_neighbor_frame(self, {0.0, 0.0}, 0.0);
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
    std::array<std::size_t, 3> triplet{};
    for (std::size_t k = 0; k < irf.association_count(); ++k) {
        const auto& p = irf.associations()[k].pick;
        if (p[0] == p[1]) triplet[static_cast<std::size_t>(p[0])] = k;
    }
    auto init = triplet_initial_point(irf, triplet);
    CHECK(init.ambiguous);
    CHECK((init.theta.size() == 4));
}

TEST_CASE("triplet_initial_point with zero rotation and axis-aligned targets") {
    auto self = density_from_components(
        {state_from(100, 0), state_from(200, 0), state_from(150, 80)},
        {Mat::Identity(4, 4), Mat::Identity(4, 4), Mat::Identity(4, 4)});
    auto nb = to_neighbor_frame(self, {30.0, -20.0}, 0.0);
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
    std::array<std::size_t, 3> triplet{};
    for (std::size_t k = 0; k < irf.association_count(); ++k) {
        const auto& p = irf.associations()[k].pick;
        if (p[0] == p[1]) triplet[static_cast<std::size_t>(p[0])] = k;
    }
    auto init = triplet_initial_point(irf, triplet);
    CHECK(std::abs(init.gamma(0)) < 1e-9);
    CHECK((project_drift(Eigen::Vector4d(init.theta)) - Eigen::Vector2d(30.0, -20.0)).norm() <
          1e-9);
}

TEST_CASE("instantaneous_estimate recovers a noiseless 3-target scene") {
    auto self = density_from_components(
        {state_from(120, 40, 1, 0), state_from(-80, 210, 0, 1), state_from(30, -160, -1, 0)},
        {4.0 * Mat::Identity(4, 4), 4.0 * Mat::Identity(4, 4), 4.0 * Mat::Identity(4, 4)});
    const Eigen::Vector2d true_drift(55.0, -35.0);
    const double true_gamma = 0.8;
    auto nb = to_neighbor_frame(self, true_drift, true_gamma);
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);

    auto est = instantaneous_estimate(irf);
    REQUIRE(est.has_value());
    CHECK((project_drift(Eigen::Vector4d(est->theta)) - true_drift).norm() < 1e-6);
    CHECK(std::abs(wrap_angle(est->gamma(0) - true_gamma)) < 1e-6);

    // Reward dominates every triplet initial point.
    for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = a + 1; b < 6; ++b) {
            for (std::size_t c = b + 1; c < 9; ++c) {
                const auto& pa = irf.associations()[a].pick;
                const auto& pb = irf.associations()[b].pick;
                const auto& pc = irf.associations()[c].pick;
                bool distinct = true;
                for (int m = 0; m < 2; ++m) {
                    if (pa[m] == pb[m] || pa[m] == pc[m] || pb[m] == pc[m]) distinct = false;
                }
                if (!distinct) continue;
                auto init = triplet_initial_point(irf, {a, b, c});
                CHECK(est->reward >= irf.eval(init.theta, init.gamma) - 1e-9);
            }
        }
    }
}

TEST_CASE("instantaneous_estimate on identical frames returns the identity") {
    auto self = density_from_components(
        {state_from(100, 0), state_from(-50, 120), state_from(10, -90)},
        {9.0 * Mat::Identity(4, 4), 9.0 * Mat::Identity(4, 4), 9.0 * Mat::Identity(4, 4)});
    auto irf = build_irf({self, self}, {0.5, 0.5}, 0);
    auto est = instantaneous_estimate(irf);
    REQUIRE(est.has_value());
    CHECK(est->theta.norm() < 1e-6);
    CHECK(std::abs(est->gamma(0)) < 1e-6);
}

TEST_CASE("instantaneous_estimate requires three associations") {
    auto self = density_from_components({state_from(0, 0)}, {Mat::Identity(4, 4)});
    auto nb = density_from_components({state_from(5, 5)}, {Mat::Identity(4, 4)});
    auto irf = build_irf({self, nb}, {0.5, 0.5}, 0);
    CHECK_FALSE(instantaneous_estimate(irf).has_value());
}

TEST_CASE("hypothesis_update follows the association and estimation rules") {
    HypothesisConfig cfg;
    cfg.delta_theta = 50.0;
    cfg.delta_gamma = 5.0 * M_PI / 180.0;
    cfg.max_hypotheses = 3;

    HypothesisSet set;
    InstantaneousEstimate e;
    e.theta = lift_drift({10.0, 20.0});
    e.gamma = Vec::Constant(1, 0.3);
    e.reward = 2.0;

    const auto& first = hypothesis_update(set, e, cfg);
    CHECK(set.items.size() == 1);
    CHECK(first.weight == doctest::Approx(2.0));
    CHECK((first.theta - e.theta).norm() == 0.0);

    // Repeated identical estimates: location fixed, weight accumulates.
    for (int i = 0; i < 4; ++i) hypothesis_update(set, e, cfg);
    CHECK(set.items.size() == 1);
    CHECK(set.items[0].weight == doctest::Approx(10.0));
    CHECK((set.items[0].theta - e.theta).norm() < 1e-12);
    CHECK(std::abs(set.items[0].gamma(0) - 0.3) < 1e-12);

    // Two alternating well-separated estimates with rewards 3w and w.
    HypothesisSet race;
    InstantaneousEstimate strong, weak;
    strong.theta = lift_drift({200.0, 0.0});
    strong.gamma = Vec::Constant(1, 1.0);
    strong.reward = 3.0;
    weak.theta = lift_drift({-400.0, 100.0});
    weak.gamma = Vec::Constant(1, -1.2);
    weak.reward = 1.0;
    for (int round = 0; round < 3; ++round) {
        hypothesis_update(race, strong, cfg);
        const auto& best = hypothesis_update(race, weak, cfg);
        if (round >= 1) CHECK((best.theta - strong.theta).norm() < 1e-9);
    }

    // Weights never decrease for surviving hypotheses.
    double w_strong = 0.0;
    for (const auto& h : race.items) w_strong = std::max(w_strong, h.weight);
    CHECK(w_strong == doctest::Approx(9.0));
}

TEST_CASE("hypothesis_update wraps angle gates across the cut") {
    HypothesisConfig cfg;
    cfg.delta_theta = 50.0;
    cfg.delta_gamma = 5.0 * M_PI / 180.0;

    HypothesisSet set;
    InstantaneousEstimate a, b;
    a.theta = lift_drift({0.0, 0.0});
    a.gamma = Vec::Constant(1, M_PI - 0.01);
    a.reward = 1.0;
    b.theta = lift_drift({1.0, 0.0});
    b.gamma = Vec::Constant(1, -M_PI + 0.01);
    b.reward = 1.0;
    hypothesis_update(set, a, cfg);
    hypothesis_update(set, b, cfg);
    CHECK(set.items.size() == 1);  // gated together across the wrap
    CHECK(set.items[0].weight == doctest::Approx(2.0));
}

TEST_CASE("hypothesis_update enforces the capacity limit") {
    HypothesisConfig cfg;
    cfg.delta_theta = 1.0;
    cfg.delta_gamma = 0.001;
    cfg.max_hypotheses = 2;
    HypothesisSet set;
    for (int i = 0; i < 4; ++i) {
        InstantaneousEstimate e;
        e.theta = lift_drift({1000.0 * i, 0.0});
        e.gamma = Vec::Constant(1, 0.0);
        e.reward = 1.0 + i;
        hypothesis_update(set, e, cfg);
    }
    CHECK(set.items.size() == 2);
    double min_w = 1e9;
    for (const auto& h : set.items) min_w = std::min(min_w, h.weight);
    CHECK(min_w >= 3.0);  // the weakest ones were dropped
}
