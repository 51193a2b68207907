#include <cmath>

#include <gtest/gtest.h>

#include "dynrisk/dgp.hpp"

using namespace dynrisk;

namespace {

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }
double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// E[Y^{theta=0}] for T=2 by midpoint quadrature over the baseline pair. Given
// the baseline, S_{1,2} and S_{2,2} are normal (clipping ignored, its mass is
// below 1e-12 here) and E[S I(S < 0)] = m Phi(-m/s) - s phi(m/s).
double quadrature_mean_theta0(const DgpConfig& cfg) {
    const double sb = cfg.noise_sd_baseline, st = cfg.noise_sd_transition;
    const int G = 600;
    const double lim = 8.0 * sb, h = 2.0 * lim / G;
    double acc = 0.0;
    for (int i = 0; i < G; ++i) {
        const double s1 = -lim + (i + 0.5) * h;
        for (int j = 0; j < G; ++j) {
            const double s2 = -lim + (j + 0.5) * h;
            const int a1 = s1 < 0.0 ? 1 : 0;
            const auto m = transition_mean({s1, s2}, a1);
            const double ey = m.s1 - m.s2 + m.s1 * normal_cdf(-m.s1 / st) - st * normal_pdf(m.s1 / st);
            acc += ey * normal_pdf(s1 / sb) * normal_pdf(s2 / sb) / (sb * sb) * h * h;
        }
    }
    return acc;
}

} // namespace

TEST(Dgp, NoiseFreeTransitionAndOutcome) {
    const DgpConfig cfg;
    const Covariates s2 = transition(cfg, {1.0, 0.5}, 1, 0.0, 0.0);
    EXPECT_NEAR(s2.s1, 1.825, 1e-15);
    EXPECT_NEAR(s2.s2, -0.875, 1e-15);
    EXPECT_NEAR(outcome_mean(s2, 1), 4.525, 1e-14);
}

TEST(Dgp, TransitionClips) {
    const DgpConfig cfg;
    const Covariates hi = transition(cfg, {5.0, 5.0}, 1, 0.0, 0.0);
    EXPECT_EQ(hi.s1, 8.0);
    const Covariates lo = transition(cfg, {5.0, 0.0}, 1, 0.0, -20.0);
    EXPECT_EQ(lo.s2, -4.0);
}

TEST(Dgp, LaterCovariatesStayInsideClipRange) {
    DgpConfig cfg;
    cfg.n = 20000;
    cfg.T = 4;
    cfg.noise_sd_transition = 3.0; // wide enough that the bounds bind
    cfg.seed = 5;
    const auto ds = simulate_observed(cfg);
    for (int t = 2; t <= cfg.T; ++t) {
        EXPECT_GE(ds.covariates(t).minCoeff(), cfg.clip_lo);
        EXPECT_LE(ds.covariates(t).maxCoeff(), cfg.clip_hi);
    }
    EXPECT_EQ(ds.covariates(4).maxCoeff(), cfg.clip_hi);
}

TEST(Dgp, SeedDeterminism) {
    DgpConfig cfg;
    cfg.n = 300;
    cfg.seed = 42;
    const auto a = simulate_observed(cfg);
    const auto b = simulate_observed(cfg);
    for (int t = 1; t <= 2; ++t) EXPECT_EQ(a.covariates(t), b.covariates(t));
    EXPECT_EQ(a.treatments(), b.treatments());
    EXPECT_EQ(a.outcome(), b.outcome());
    cfg.seed = 43;
    EXPECT_NE(simulate_observed(cfg).outcome(), a.outcome());
}

TEST(Dgp, RandomizedShareWithinBinomialBound) {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        DgpConfig cfg;
        cfg.n = 2000;
        cfg.seed = seed;
        cfg.treatment_mode = TreatmentMode::randomized;
        const auto ds = simulate_observed(cfg);
        const double cells = static_cast<double>(ds.treatments().size());
        const double share = ds.treatments().cast<double>().sum() / cells;
        EXPECT_LE(std::abs(share - 0.5), 4.0 / std::sqrt(2.0 * static_cast<double>(cfg.n))) << seed;
    }
}

TEST(Dgp, FirstStageTreatmentRateNearZeroCovariate) {
    // Baseline sd shrunk so S_{1,1} sits near 0 for every subject.
    DgpConfig cfg;
    cfg.n = 100000;
    cfg.T = 1;
    cfg.noise_sd_baseline = 1e-3;
    cfg.seed = 3;
    const auto ds = simulate_observed(cfg);
    const double rate = ds.treatments().col(0).cast<double>().mean();
    EXPECT_NEAR(rate, 0.525, 0.01);
    EXPECT_NEAR(observational_propensity(0.0), 0.52497918747894, 1e-12);
}

TEST(Dgp, InvalidConfigRejected) {
    DgpConfig cfg;
    cfg.noise_sd_outcome = 0.0;
    EXPECT_THROW(simulate_observed(cfg), Error);
    cfg = DgpConfig{};
    cfg.clip_lo = 9.0;
    EXPECT_THROW(simulate_observed(cfg), Error);
}

TEST(Counterfactual, ExtremeThresholdsAreConstantPolicies) {
    DgpConfig cfg;
    cfg.n = 500;
    const auto fam = dgp_regime();
    EXPECT_EQ(simulate_counterfactual(cfg, fam, {1e6}, 500, 9),
              simulate_with_policy(cfg, 500, 9, constant_policy(1)).outcome());
    EXPECT_EQ(simulate_counterfactual(cfg, fam, {-1e6}, 500, 9),
              simulate_with_policy(cfg, 500, 9, constant_policy(0)).outcome());
}

TEST(Counterfactual, FrozenMeanAtThetaZero) {
    const DgpConfig cfg;
    const Eigen::VectorXd y = simulate_counterfactual(cfg, dgp_regime(), {0.0}, 1000000, 7);
    const double mean = y.mean();
    // Recorded from this implementation; guards the draw order.
    EXPECT_NEAR(mean, -1.2026792742635473, 1e-12);
    const double se = std::sqrt((y.array() - mean).square().sum() / (y.size() - 1.0) / y.size());
    EXPECT_LT(std::abs(mean - quadrature_mean_theta0(cfg)), 4.0 * se);
}

TEST(Oracle, ConstantMeanModelGivesVariance) {
    const DgpConfig cfg;
    const auto fam = dgp_regime();
    const auto thetas = theta_grid({{0.2}});
    const std::size_t n_mc = 200000;
    const Eigen::VectorXd y = simulate_counterfactual(cfg, fam, {0.2}, n_mc, oracle_seed(11, 0));
    const double mean = y.mean();
    const double var = (y.array() - mean).square().mean();
    const auto v = true_risk_oracle(cfg, fam, [mean](const Theta&, const Eigen::VectorXd&) { return mean; }, thetas,
                                    n_mc, 11);
    EXPECT_NEAR(v.value, var, 1e-9 * var);
    const auto z = true_risk_oracle(cfg, fam, [](const Theta&, const Eigen::VectorXd&) { return 0.0; }, thetas, n_mc, 11);
    EXPECT_NEAR(z.value, y.array().square().mean(), 1e-9 * z.value);
}

TEST(Oracle, DoubledDrawsAgree) {
    const DgpConfig cfg;
    const auto fam = dgp_regime();
    const auto thetas = theta_draws({0.0, 0.1}, 5, 3);
    const ModelFn m = [](const Theta& th, const Eigen::VectorXd&) { return -1.2 + 0.5 * th[0]; };
    const auto a = true_risk_oracle(cfg, fam, m, thetas, 50000, 21);
    const auto b = true_risk_oracle(cfg, fam, m, thetas, 100000, 22);
    EXPECT_LT(std::abs(a.value - b.value), 4.0 * a.se);
}

TEST(Oracle, TableMatchesDirectRisk) {
    const DgpConfig cfg;
    const auto fam = dgp_regime();
    const auto thetas = theta_draws({0.0, 0.1}, 4, 8);
    const auto tab = oracle_table(cfg, fam, thetas, 20000, 5);
    for (double b1 : {0.0, 0.7, -2.0}) {
        const auto mth = [b1](const Theta& th) { return 2.0 + b1 * th[0]; };
        const auto direct = true_risk_oracle(
            cfg, fam, [&](const Theta& th, const Eigen::VectorXd&) { return mth(th); }, thetas, 20000, 5);
        const auto tabled = tab.risk(mth);
        EXPECT_NEAR(tabled.value, direct.value, 1e-10 * direct.value);
        EXPECT_NEAR(tabled.se, direct.se, 1e-4 * direct.se);
    }
}
