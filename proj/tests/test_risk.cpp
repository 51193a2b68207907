#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "dynrisk/csv.hpp"
#include "dynrisk/dgp.hpp"
#include "dynrisk/risk.hpp"
#include "dynrisk/study.hpp"
#include "support/instances.hpp"

using namespace dynrisk;

namespace {

const RegimeFamily kBelow{RegimeKind::scalar_threshold_below, 0};

// Constant mu at every stage: linear regressor with only an intercept.
MuSequence constant_mu(const LongitudinalDataset& ds, const ThetaMeasure& thetas, double c) {
    MuSequence mu;
    mu.thetas = thetas;
    for (int t = 1; t <= ds.stages(); ++t) {
        MuStageFit f;
        f.stage = t;
        f.regressor = MuRegressor::linear;
        f.coef = Eigen::VectorXd::Zero(ds.history_features(t).cols() + 2);
        f.coef(0) = c;
        mu.stages.push_back(f);
    }
    return mu;
}

const ModelFn kZero = [](const Theta&, const Eigen::VectorXd&) { return 0.0; };

// Four one-stage subjects with hand-checkable IPW terms.
LongitudinalDataset four_subjects() {
    Eigen::MatrixXd s(4, 2);
    s << -1.0, 0.0, -0.5, 1.0, 0.5, 0.0, 2.0, 1.0;
    Eigen::MatrixXi a(4, 1);
    a << 1, 0, 0, 1;
    const Eigen::Vector4d y(1.0, 2.0, -1.0, 3.0);
    return LongitudinalDataset({s}, a, y, {0, 1});
}

LongitudinalDataset dgp_data(std::size_t n, std::uint64_t seed, TreatmentMode mode = TreatmentMode::observational) {
    DgpConfig cfg;
    cfg.n = n;
    cfg.seed = seed;
    cfg.treatment_mode = mode;
    return simulate_observed(cfg);
}

// Cheap parametric nuisances for tests that exercise the cross-fitting.
EstimatorConfig parametric_config(std::uint64_t seed) {
    EstimatorConfig c;
    c.fam = dgp_regime();
    c.thetas = theta_draws({0.0, 0.1}, 6, seed);
    c.prop.method = PropensityMethod::logistic;
    c.mu.regressor = MuRegressor::linear;
    c.prop.hal.basis = {1, 5}; // undersmoothed estimators still fit HAL paths
    return c;
}

} // namespace

// ---------------------------------------------------------------------------
// Enumerable instance

TEST(Enumeration, EstimatesMatchEnumeratedRisk) {
    const auto inst = fixtures::make_enumeration_instance();
    const auto rep = estimate_all(inst.data, inst.plan, inst.cfg, {EstimatorKind::ipw, EstimatorKind::mr});
    for (const auto& m : rep.get(EstimatorKind::ipw).models) {
        EXPECT_NEAR(m.beta(0), inst.beta0, 1e-10);
        EXPECT_NEAR(m.beta(1), inst.beta1, 1e-10);
    }
    EXPECT_NEAR(rep.get(EstimatorKind::ipw).point, inst.psi, 1e-8);
    EXPECT_NEAR(rep.get(EstimatorKind::mr).point, inst.psi, 1e-8);
}

TEST(Enumeration, AugmentationVanishesWithExactPropensity) {
    const auto inst = fixtures::make_enumeration_instance();
    const auto rep = estimate_all(inst.data, inst.plan, inst.cfg, {EstimatorKind::ipw, EstimatorKind::mr});
    EXPECT_NEAR(rep.get(EstimatorKind::mr).point - rep.get(EstimatorKind::ipw).point, 0.0, 1e-10);

    const auto& ds = inst.data;
    const ModelFn m = rep.get(EstimatorKind::mr).models[0].as_function();
    const auto mu = fit_mu_sequence(ds.subset(inst.plan.training(1)), m, inst.cfg.fam, inst.cfg.thetas, inst.cfg.mu);
    Eigen::MatrixXd p1(static_cast<Eigen::Index>(ds.n()), 1);
    for (Eigen::Index i = 0; i < p1.rows(); ++i) p1(i, 0) = fixtures::enum_pi(ds.covariates(1)(i, 0), ds.covariates(1)(i, 1));
    double aug = 0.0;
    for (std::size_t i = 0; i < ds.n(); ++i)
        aug += ipw_loss_contribution(ds, i, p1, m, inst.cfg.fam, inst.cfg.thetas) -
               eif_contribution(ds, i, p1, mu, m, inst.cfg.fam, inst.cfg.thetas);
    EXPECT_NEAR(aug / static_cast<double>(ds.n()), 0.0, 1e-10);
}

TEST(Eif, CenteredAtOracleRisk) {
    const auto chk = fixtures::eif_centering_check(10000, 3);
    EXPECT_LT(std::abs(chk.mean_centered), 3.0 * chk.se) << chk.mean_centered << " se " << chk.se;
}

// ---------------------------------------------------------------------------
// Per-subject contributions

TEST(Contribution, IpwByHand) {
    const auto ds = four_subjects();
    const auto thetas = theta_grid({{0.0}, {1.0}}, {1.0, 3.0});
    const ModelFn m = [](const Theta& th, const Eigen::VectorXd&) { return 0.5 + th[0]; };
    Eigen::MatrixXd p1(4, 1);
    p1 << 0.4, 0.25, 0.8, 0.5;
    // d = I(S1 < theta): theta 0 -> (1, 1, 0, 0), theta 1 -> (1, 1, 1, 0).
    const double w0 = 0.25, w1 = 0.75;
    const double first = w0 * (0.25 / 0.4) + w1 * (0.25 / 0.4); // treated, prescribed at both points
    const double third = w0 * (1.5 * 1.5 / 0.2);                 // complies only at theta 0
    EXPECT_NEAR(ipw_loss_contribution(ds, 0, p1, m, kBelow, thetas), first, 1e-12);
    EXPECT_EQ(ipw_loss_contribution(ds, 1, p1, m, kBelow, thetas), 0.0);
    EXPECT_NEAR(ipw_loss_contribution(ds, 2, p1, m, kBelow, thetas), third, 1e-12);
    // Subject 4 is treated but never prescribed treatment.
    EXPECT_EQ(ipw_loss_contribution(ds, 3, p1, m, kBelow, thetas), 0.0);
}

TEST(Contribution, CertainComplianceGivesSquaredResidual) {
    const auto ds = four_subjects();
    const auto thetas = theta_grid({{10.0}});
    const Eigen::MatrixXd p1 = Eigen::MatrixXd::Ones(4, 1);
    const ModelFn m = [](const Theta&, const Eigen::VectorXd&) { return 0.25; };
    EXPECT_EQ(ipw_loss_contribution(ds, 3, p1, m, kBelow, thetas), (3.0 - 0.25) * (3.0 - 0.25));
    EXPECT_EQ(dcar_term(ds, 3, 1, p1, constant_mu(ds, thetas, 2.0), kBelow, thetas), 0.0);
}

TEST(Contribution, EifWithZeroMuIsIpw) {
    const auto ds = dgp_data(40, 4);
    const auto thetas = theta_draws({0.0, 0.1}, 5, 4);
    const ModelFn m = [](const Theta& th, const Eigen::VectorXd&) { return -1.0 + th[0]; };
    const Eigen::MatrixXd p1 = Eigen::MatrixXd::Constant(40, 2, 0.3);
    const auto mu = constant_mu(ds, thetas, 0.0);
    for (std::size_t i = 0; i < ds.n(); ++i)
        EXPECT_EQ(eif_contribution(ds, i, p1, mu, m, dgp_regime(), thetas),
                  ipw_loss_contribution(ds, i, p1, m, dgp_regime(), thetas));
}

TEST(Contribution, OneStageEifByHand) {
    const auto ds = four_subjects();
    const auto thetas = theta_grid({{0.0}});
    Eigen::MatrixXd p1(4, 1);
    p1 << 0.4, 0.25, 0.8, 0.5;
    const auto mu = constant_mu(ds, thetas, 2.0);
    // Subject 1: prescribed and treated. (1/0.4) L - (1 - 0.4)/0.4 * 2.
    const double L = 0.5 * 0.5;
    EXPECT_NEAR(eif_contribution(ds, 0, p1, mu, kZero, kBelow, thetas), (1.0 / 0.4) * 1.0 - 0.6 / 0.4 * 2.0, 1e-12);
    EXPECT_NEAR(eif_contribution(ds, 0, p1, mu, [](const Theta&, const Eigen::VectorXd&) { return 0.5; }, kBelow, thetas),
                L / 0.4 - 0.6 / 0.4 * 2.0, 1e-12);
    // Subject 2: prescribed but untreated. -(0 - 0.25)/0.25 * 2.
    EXPECT_NEAR(eif_contribution(ds, 1, p1, mu, kZero, kBelow, thetas), 2.0, 1e-12);
    EXPECT_NEAR(dcar_term(ds, 1, 1, p1, mu, kBelow, thetas), -2.0, 1e-12);
}

TEST(Contribution, TwoStageDcarByHand) {
    Eigen::MatrixXd s1(2, 2), s2(2, 2);
    s1 << -1.0, 0.0, -1.0, 0.0;
    s2 << -1.0, 0.0, 1.0, 0.0;
    Eigen::MatrixXi a(2, 2);
    a << 1, 1, 1, 1;
    const LongitudinalDataset ds({s1, s2}, a, Eigen::Vector2d(0.0, 0.0), {0, 1});
    const auto thetas = theta_grid({{0.0}});
    Eigen::MatrixXd p1(2, 2);
    p1 << 0.5, 0.8, 0.5, 0.8;
    const auto mu = constant_mu(ds, thetas, 3.0);
    // Subject 1 follows d = (1, 1): stage 2 term (1 - 0.8)/0.8 * 3 * (1/0.5).
    EXPECT_NEAR(dcar_term(ds, 0, 1, p1, mu, kBelow, thetas), 0.5 / 0.5 * 3.0, 1e-12);
    EXPECT_NEAR(dcar_term(ds, 0, 2, p1, mu, kBelow, thetas), 0.2 / 0.8 * 3.0 * 2.0, 1e-12);
    // Subject 2 is prescribed 0 at stage 2 and treated: (0 - 0.2)/0.2 * 3 * 2.
    EXPECT_NEAR(dcar_term(ds, 1, 2, p1, mu, kBelow, thetas), -6.0, 1e-12);
    EXPECT_THROW(dcar_term(ds, 0, 3, p1, mu, kBelow, thetas), Error);
}

// ---------------------------------------------------------------------------
// Intervals

TEST(Interval, NormalQuantile) {
    EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-12);
    for (double p : {1e-10, 0.001, 0.2, 0.5, 0.7, 0.999}) {
        const double z = normal_quantile(p);
        EXPECT_NEAR(0.5 * std::erfc(-z / std::sqrt(2.0)), p, 1e-12 * std::max(p, 1e-3)) << p;
    }
    EXPECT_THROW(normal_quantile(1.0), Error);
}

TEST(Interval, WidthAndNesting) {
    const auto ci = confidence_interval(1.0, 1.0, 100);
    EXPECT_NEAR(ci.hi - 1.0, 0.1959963984540054, 1e-12);
    EXPECT_NEAR(1.0 - ci.lo, 0.1959963984540054, 1e-12);
    const auto flat = confidence_interval(2.0, 0.0, 10);
    EXPECT_EQ(flat.lo, 2.0);
    EXPECT_EQ(flat.hi, 2.0);
    const auto narrow = confidence_interval(0.0, 3.0, 50, 0.8);
    const auto wide = confidence_interval(0.0, 3.0, 50, 0.99);
    EXPECT_LT(wide.lo, narrow.lo);
    EXPECT_GT(wide.hi, narrow.hi);
}

// ---------------------------------------------------------------------------
// Selectors

TEST(Selector, DcarIndexTiesGoToLargerLambda) {
    EXPECT_EQ(select_dcar_index({0.1, -0.1, 0.3}), 0u);
    EXPECT_EQ(select_dcar_index({0.2, 0.05, -0.05}), 1u);
    EXPECT_EQ(select_dcar_index({-3.0, 2.0, 0.5}), 2u);
    EXPECT_THROW(select_dcar_index({}), Error);
}

TEST(Selector, DcarPicksTheSignChange) {
    const auto inst = fixtures::make_sign_change_instance();
    const auto& brute = inst.brute;
    const std::size_t G = brute.size();
    const auto diag = select_lambda_dcar(inst.data, inst.plan, inst.paths, inst.mu, kBelow, inst.thetas);
    for (std::size_t j = 0; j < G; ++j) EXPECT_NEAR(diag.mean[0][j], brute[j], 1e-12);
    std::size_t best = 0;
    for (std::size_t j = 1; j < G; ++j)
        if (std::abs(brute[j]) < std::abs(brute[best])) best = j;
    const std::size_t k = diag.selected_index[0];
    EXPECT_EQ(k, best);
    ASSERT_GT(brute.front(), 0.0);
    ASSERT_LT(brute.back(), 0.0);
    const bool adjacent = (k + 1 < G && brute[k] * brute[k + 1] <= 0.0) || (k > 0 && brute[k - 1] * brute[k] <= 0.0);
    EXPECT_TRUE(adjacent);
    EXPECT_EQ(diag.selected[0], inst.paths.stages[0].grid[k]);
}

TEST(Contribution, DcarVanishesUnderCertainCompliance) {
    const auto c = fixtures::make_certain_compliance(300, 5);
    const auto mu = constant_mu(c.data, c.thetas, 1.7);
    for (std::size_t i = 0; i < c.data.n(); ++i)
        for (int t = 1; t <= 2; ++t) EXPECT_EQ(dcar_term(c.data, i, t, c.p1, mu, dgp_regime(), c.thetas), 0.0);
}

TEST(Selector, ScoreRule) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    // Criterion minimum at index 3; the J floor is reached at index 2.
    auto pick = select_score_index({3.0, 1.0, 2.0, 0.5}, {0.0, 1.0, 3.0, 5.0}, 3);
    EXPECT_EQ(pick.tilde_index, 3u);
    EXPECT_EQ(pick.j_index, 2u);
    EXPECT_EQ(pick.selected, 2u);
    // Floor never reached: the last index stands in and the criterion wins.
    pick = select_score_index({nan, 2.0, 1.0, 4.0}, {0.0, 1.0, 1.0, 2.0}, 10);
    EXPECT_EQ(pick.j_index, 3u);
    EXPECT_EQ(pick.selected, 2u);
    try {
        select_score_index({nan, nan}, {0.0, 0.0}, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::convergence);
    }
}

TEST(Selector, ScoreTermFloorsTheNorm) {
    EXPECT_EQ(score_term(2.0, 4.0, 1e-8), 0.5);
    EXPECT_EQ(score_term(2.0, 0.0, 1e-8), 2e8);
}

// ---------------------------------------------------------------------------
// Estimators

TEST(Estimator, ZeroMuReducesToIpwBitForBit) {
    const auto ds = read_dataset_csv(std::string(DYNRISK_TEST_DATA) + "/fixture50.csv");
    const StudyConfig sc;
    EstimatorConfig cfg = sc.estimator_config();
    cfg.mu.regressor = MuRegressor::zero;
    const auto plan = make_folds(ds.n(), sc.B, derive_seed(sc.seed, "folds"));
    const auto rep = estimate_all(ds, plan, cfg, {EstimatorKind::ipw, EstimatorKind::mr});
    const auto& ipw = rep.get(EstimatorKind::ipw);
    const auto& mr = rep.get(EstimatorKind::mr);
    EXPECT_EQ(mr.point, ipw.point);
    EXPECT_EQ(mr.if_variance, ipw.if_variance);
    EXPECT_EQ(mr.per_fold, ipw.per_fold);
}

TEST(Estimator, Deterministic) {
    const auto ds = dgp_data(200, 5);
    const auto plan = make_folds(200, 5, 6);
    const auto cfg = parametric_config(7);
    const auto a = estimate_all(ds, plan, cfg, all_estimators());
    const auto b = estimate_all(ds, plan, cfg, all_estimators());
    ASSERT_EQ(a.estimates.size(), b.estimates.size());
    for (std::size_t k = 0; k < a.estimates.size(); ++k) {
        EXPECT_EQ(a.estimates[k].point, b.estimates[k].point);
        EXPECT_EQ(a.estimates[k].if_variance, b.estimates[k].if_variance);
    }
}

TEST(Estimator, SubjectOrderDoesNotMatter) {
    const auto ds = dgp_data(150, 8);
    const auto plan = make_folds(150, 5, 9);
    Indices perm(150);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), Rng(10));
    CrossValPlan pp = plan;
    for (std::size_t i = 0; i < perm.size(); ++i) pp.assignment[i] = plan.assignment[perm[i]];
    const auto cfg = parametric_config(11);
    for (auto k : {EstimatorKind::ipw, EstimatorKind::mr}) {
        const auto a = estimate_all(ds, plan, cfg, {k}).get(k);
        const auto b = estimate_all(ds.subset(perm), pp, cfg, {k}).get(k);
        EXPECT_NEAR(a.point, b.point, 1e-10 * std::abs(a.point));
        EXPECT_NEAR(a.if_variance, b.if_variance, 1e-9 * a.if_variance);
    }
}

TEST(Estimator, IdenticalFoldsGiveIdenticalFoldEstimates) {
    const auto half = dgp_data(60, 12);
    const auto both = LongitudinalDataset(
        {[&] { Eigen::MatrixXd c(120, 2); c << half.covariates(1), half.covariates(1); return c; }(),
         [&] { Eigen::MatrixXd c(120, 2); c << half.covariates(2), half.covariates(2); return c; }()},
        [&] { Eigen::MatrixXi x(120, 2); x << half.treatments(), half.treatments(); return x; }(),
        [&] { Eigen::VectorXd y(120); y << half.outcome(), half.outcome(); return y; }(), {0, 1});
    std::vector<int> fold(120, 1);
    for (std::size_t i = 60; i < 120; ++i) fold[i] = 2;
    const CrossValPlan plan{120, 2, 0, fold};
    const auto e = ipw_risk(both, plan, parametric_config(13));
    ASSERT_EQ(e.per_fold.size(), 2u);
    EXPECT_EQ(e.per_fold[0], e.per_fold[1]);
    EXPECT_EQ(e.point, e.per_fold[0]);
}

TEST(Estimator, RandomizedKnownPropensityMatchesOracle) {
    DgpConfig dgp;
    dgp.n = 5000;
    dgp.seed = 14;
    dgp.treatment_mode = TreatmentMode::randomized;
    const auto ds = simulate_observed(dgp);
    EstimatorConfig cfg;
    cfg.fam = dgp_regime();
    cfg.thetas = theta_draws({0.0, 0.1}, 10, 15);
    cfg.prop.method = PropensityMethod::known;
    cfg.prop.known = [](int, const Eigen::RowVectorXd&) { return 0.5; };
    cfg.msm.fixed = kZero;
    const auto e = ipw_risk(ds, make_folds(5000, 5, 16), cfg);
    const auto truth = true_risk_oracle(dgp, cfg.fam, kZero, cfg.thetas, 200000, 17);
    const double se = std::sqrt(e.if_variance / 5000.0 + truth.se * truth.se);
    EXPECT_LT(std::abs(e.point - truth.value), 3.0 * se) << e.point << " vs " << truth.value;
}

TEST(Estimator, SingleLambdaUndersmoothingIsIpw) {
    const auto ds = dgp_data(120, 18);
    const auto plan = make_folds(120, 3, 19);
    EstimatorConfig cfg;
    cfg.fam = dgp_regime();
    cfg.thetas = theta_draws({0.0, 0.1}, 4, 20);
    cfg.prop.hal.basis = {1, 5};
    cfg.prop.hal.grid = {0.01};
    cfg.mu.regressor = MuRegressor::linear;
    const auto rep = estimate_all(ds, plan, cfg, {EstimatorKind::ipw, EstimatorKind::uipw_dcar});
    EXPECT_EQ(rep.get(EstimatorKind::uipw_dcar).point, rep.get(EstimatorKind::ipw).point);
    EXPECT_EQ(rep.get(EstimatorKind::uipw_dcar).lambda, std::vector<double>({0.01, 0.01}));
}

TEST(Estimator, FoldModelIgnoresItsValidationSubjects) {
    const auto ds = dgp_data(150, 21);
    const auto plan = make_folds(150, 5, 22);
    const auto cfg = parametric_config(23);
    const auto before = ipw_risk(ds, plan, cfg);
    Eigen::VectorXd y = ds.outcome();
    for (auto i : plan.validation(3)) y(static_cast<Eigen::Index>(i)) += 50.0;
    const LongitudinalDataset mutated({ds.covariates(1), ds.covariates(2)}, ds.treatments(), y, {0, 1});
    const auto after = ipw_risk(mutated, plan, cfg);
    EXPECT_EQ(after.models[2].beta, before.models[2].beta);
    EXPECT_NE(after.models[0].beta, before.models[0].beta);
}

TEST(Estimator, JsonCarriesTheEstimate) {
    const auto inst = fixtures::make_enumeration_instance();
    const auto e = ipw_risk(inst.data, inst.plan, inst.cfg);
    const auto j = to_json(e);
    for (const char* key : {"estimator", "point", "if_variance", "ci_lo", "ci_hi", "level", "per_fold", "n", "B", "seed",
                            "lambda", "models"})
        EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_EQ(j["estimator"], "ipw");
    EXPECT_EQ(j["point"].template get<double>(), e.point);
    EXPECT_EQ(j["models"].size(), 5u);
}
