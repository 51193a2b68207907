#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "dynrisk/dgp.hpp"
#include "dynrisk/msm.hpp"

using namespace dynrisk;

namespace {

const RegimeFamily kBelow{RegimeKind::scalar_threshold_below, 0};

struct Pooled {
    Eigen::VectorXd theta, y, w;
};

// Rows (subject, theta point) with their IPW weights, built without the
// library's regime cache.
Pooled pooled_rows(const LongitudinalDataset& ds, const Eigen::MatrixXd& p1, const ThetaMeasure& thetas) {
    std::vector<double> th, yy, ww;
    for (std::size_t k = 0; k < thetas.size(); ++k)
        for (std::size_t i = 0; i < ds.n(); ++i) {
            double w = thetas.weights[k];
            for (int t = 1; t <= ds.stages(); ++t) {
                const int d = ds.covariates(t)(static_cast<Eigen::Index>(i), 0) < thetas.points[k][0] ? 1 : 0;
                const double p = p1(static_cast<Eigen::Index>(i), t - 1);
                w *= ds.treatment(i, t) == d ? 1.0 / (d == 1 ? p : 1.0 - p) : 0.0;
            }
            if (w == 0.0) continue;
            th.push_back(thetas.points[k][0]);
            yy.push_back(ds.outcome()(static_cast<Eigen::Index>(i)));
            ww.push_back(w);
        }
    Pooled out;
    out.theta = Eigen::Map<Eigen::VectorXd>(th.data(), static_cast<Eigen::Index>(th.size()));
    out.y = Eigen::Map<Eigen::VectorXd>(yy.data(), static_cast<Eigen::Index>(yy.size()));
    out.w = Eigen::Map<Eigen::VectorXd>(ww.data(), static_cast<Eigen::Index>(ww.size()));
    return out;
}

double pooled_loss(const Pooled& r, const WorkingModel& m, const Eigen::VectorXd& beta) {
    double s = 0.0;
    for (Eigen::Index j = 0; j < r.y.size(); ++j) {
        WorkingModel probe = m;
        probe.beta = beta;
        const double e = r.y(j) - probe.predict({r.theta(j)});
        s += r.w(j) * e * e;
    }
    return s;
}

LongitudinalDataset dgp_data(std::size_t n, std::uint64_t seed) {
    DgpConfig cfg;
    cfg.n = n;
    cfg.seed = seed;
    return simulate_observed(cfg);
}

// True clipped propensities of the observational design.
Eigen::MatrixXd true_p1(const LongitudinalDataset& ds) {
    Eigen::MatrixXd p(static_cast<Eigen::Index>(ds.n()), ds.stages());
    for (int t = 1; t <= ds.stages(); ++t)
        for (Eigen::Index i = 0; i < p.rows(); ++i) p(i, t - 1) = observational_propensity(ds.covariates(t)(i, 0));
    return p;
}

} // namespace

TEST(PredictM, ParametricFamilies) {
    WorkingModel lin;
    lin.beta = Eigen::Vector2d(1.0, 2.0);
    EXPECT_EQ(predict_m(lin, {0.5}), 2.0);
    WorkingModel quad;
    quad.family = MsmFamily::quadratic_theta;
    quad.beta = Eigen::Vector3d(0.0, 0.0, 1.0);
    EXPECT_EQ(predict_m(quad, {3.0}), 9.0);
    EXPECT_THROW(predict_m(lin, {std::nan("")}), Error);
}

TEST(FitMsm, EqualWeightsGiveOrdinaryLeastSquares) {
    const auto ds = dgp_data(400, 2);
    const auto thetas = theta_draws({0.0, 0.3}, 8, 4);
    const Eigen::MatrixXd half = Eigen::MatrixXd::Constant(400, 2, 0.5);
    const auto m = fit_msm(ds, MsmOptions{}, half, kBelow, thetas);
    const Pooled r = pooled_rows(ds, half, thetas);
    ASSERT_NEAR(r.w.maxCoeff(), r.w.minCoeff(), 1e-15);
    const double tm = r.theta.mean(), ym = r.y.mean();
    const double slope = ((r.theta.array() - tm) * (r.y.array() - ym)).sum() / (r.theta.array() - tm).square().sum();
    EXPECT_NEAR(m.beta(1), slope, 1e-10);
    EXPECT_NEAR(m.beta(0), ym - slope * tm, 1e-10);
}

TEST(FitMsm, SingleThetaGivesWeightedMeanAndZeroSlope) {
    const auto ds = dgp_data(300, 3);
    const auto thetas = theta_grid({{0.1}});
    const Eigen::MatrixXd p1 = true_p1(ds);
    const auto m = fit_msm(ds, MsmOptions{}, p1, kBelow, thetas);
    const Pooled r = pooled_rows(ds, p1, thetas);
    EXPECT_EQ(m.beta(1), 0.0);
    EXPECT_NEAR(m.beta(0), r.w.dot(r.y) / r.w.sum(), 1e-12);
}

TEST(FitMsm, WeightedLossIsMinimal) {
    const auto ds = dgp_data(500, 5);
    const auto thetas = theta_draws({0.0, 0.2}, 10, 6);
    const Eigen::MatrixXd p1 = true_p1(ds);
    for (auto fam : {MsmFamily::linear_theta, MsmFamily::quadratic_theta}) {
        MsmOptions opt;
        opt.family = fam;
        const auto m = fit_msm(ds, opt, p1, kBelow, thetas);
        const Pooled r = pooled_rows(ds, p1, thetas);
        const double best = pooled_loss(r, m, m.beta);
        Rng rng(7);
        std::normal_distribution<double> z(0.0, 1.0);
        for (int k = 0; k < 20; ++k) {
            Eigen::VectorXd b = m.beta;
            for (auto& v : b) v += 0.01 * z(rng);
            EXPECT_LE(best, pooled_loss(r, m, b));
        }
    }
}

TEST(FitMsm, HalThetaInterpolatesCellMeansWithoutPenalty) {
    const auto ds = dgp_data(400, 8);
    const auto thetas = theta_grid({{-0.2}, {0.0}, {0.2}});
    const Eigen::MatrixXd p1 = true_p1(ds);
    MsmOptions opt;
    opt.family = MsmFamily::hal_theta;
    opt.hal.grid = {0.0};
    opt.hal.basis = {1, 0};
    const auto m = fit_msm(ds, opt, p1, kBelow, thetas);
    const Pooled r = pooled_rows(ds, p1, thetas);
    for (const auto& th : thetas.points) {
        double sw = 0.0, swy = 0.0;
        for (Eigen::Index j = 0; j < r.y.size(); ++j)
            if (r.theta(j) == th[0]) {
                sw += r.w(j);
                swy += r.w(j) * r.y(j);
            }
        EXPECT_NEAR(predict_m(m, th), swy / sw, 1e-7);
    }
}

TEST(FitMsm, InterceptAtZeroMatchesCounterfactualMean) {
    const auto ds = dgp_data(5000, 9);
    const auto thetas = theta_draws({0.0, 0.1}, 10, 9);
    const Eigen::MatrixXd p1 = true_p1(ds);
    const auto m = fit_msm(ds, MsmOptions{}, p1, kBelow, thetas);
    // Sandwich SE of the intercept, clustered by subject.
    const Pooled r = pooled_rows(ds, p1, thetas);
    Eigen::Matrix2d bread = Eigen::Matrix2d::Zero();
    for (Eigen::Index j = 0; j < r.y.size(); ++j) {
        const Eigen::Vector2d x(1.0, r.theta(j));
        bread += r.w(j) * x * x.transpose();
    }
    Eigen::MatrixXd score = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ds.n()), 2);
    for (std::size_t k = 0; k < thetas.size(); ++k)
        for (std::size_t i = 0; i < ds.n(); ++i) {
            const auto I = static_cast<Eigen::Index>(i);
            double w = thetas.weights[k];
            for (int t = 1; t <= 2; ++t) {
                const int d = ds.covariates(t)(I, 0) < thetas.points[k][0] ? 1 : 0;
                w *= ds.treatment(i, t) == d ? 1.0 / (d == 1 ? p1(I, t - 1) : 1.0 - p1(I, t - 1)) : 0.0;
            }
            const double e = ds.outcome()(I) - m.predict(thetas.points[k]);
            score.row(I) += w * e * Eigen::RowVector2d(1.0, thetas.points[k][0]);
        }
    const Eigen::Matrix2d binv = bread.inverse();
    const Eigen::Matrix2d cov = binv * (score.transpose() * score) * binv;
    const double oracle = -1.2026792742635473; // E[Y^{theta=0}], 1e6 counterfactual draws
    EXPECT_LT(std::abs(predict_m(m, {0.0}) - oracle), 3.0 * std::sqrt(cov(0, 0) + 0.0015 * 0.0015));
}

TEST(FitMsm, NoCompliersIsAnError) {
    const auto ds = dgp_data(50, 10);
    const Eigen::MatrixXd p1 = true_p1(ds);
    // theta = 1e6 prescribes treatment at both stages and nobody is treated.
    const LongitudinalDataset none({ds.covariates(1), ds.covariates(2)}, Eigen::MatrixXi::Zero(50, 2), ds.outcome(),
                                   {0, 1});
    try {
        fit_msm(none, MsmOptions{}, p1, kBelow, theta_grid({{1e6}}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::no_compliers);
    }
}

TEST(FitMsm, FoldIsolation) {
    const auto ds = dgp_data(200, 11);
    const auto plan = make_folds(200, 5, 1);
    const auto thetas = theta_draws({0.0, 0.1}, 10, 2);
    const auto train = plan.training(2);
    const auto fit_on = [&](const LongitudinalDataset& d) {
        const auto tr = d.subset(train);
        return fit_msm(tr, MsmOptions{}, true_p1(tr), kBelow, thetas).beta;
    };
    const Eigen::VectorXd before = fit_on(ds);
    Eigen::VectorXd y = ds.outcome();
    std::vector<Eigen::MatrixXd> cov{ds.covariates(1), ds.covariates(2)};
    Eigen::MatrixXi a = ds.treatments();
    for (auto i : plan.validation(2)) {
        const auto I = static_cast<Eigen::Index>(i);
        y(I) += 100.0;
        cov[0](I, 0) = -cov[0](I, 0);
        a(I, 1) = 1 - a(I, 1);
    }
    const LongitudinalDataset mutated(cov, a, y, {0, 1});
    EXPECT_EQ(fit_on(mutated), before);
}

TEST(Curve, CsvHasOneColumnPerModel) {
    WorkingModel a, b;
    a.beta = Eigen::Vector2d(1.0, 2.0);
    b.beta = Eigen::Vector2d(0.0, -1.0);
    std::ostringstream out;
    write_curve_csv(out, {a, b}, {{0.0}, {0.5}});
    EXPECT_EQ(out.str(), "theta,m1,m2\n0,1,0\n0.5,2,-0.5\n");
}
