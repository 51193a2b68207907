#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "dynrisk/core.hpp"
#include "dynrisk/csv.hpp"

using namespace dynrisk;

namespace {

// n subjects, T stages, two covariates per stage, filled from a seeded stream.
LongitudinalDataset random_dataset(std::size_t n, int T, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Eigen::MatrixXd> cov;
    for (int t = 0; t < T; ++t) {
        Eigen::MatrixXd s(static_cast<Eigen::Index>(n), 2);
        for (Eigen::Index i = 0; i < s.rows(); ++i) s.row(i) << u(rng), u(rng);
        cov.push_back(s);
    }
    Eigen::MatrixXi a(static_cast<Eigen::Index>(n), T);
    Eigen::VectorXd y(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (int t = 0; t < T; ++t) a(i, t) = u(rng) > 0.0 ? 1 : 0;
        y(i) = u(rng);
    }
    return LongitudinalDataset(cov, a, y, {0, 1});
}

} // namespace

TEST(Folds, TenIntoFiveIsBalanced) {
    const auto plan = make_folds(10, 5, 1);
    EXPECT_EQ(plan.fold_sizes(), std::vector<std::size_t>(5, 2));
}

TEST(Folds, SameSeedSameAssignment) {
    EXPECT_EQ(make_folds(10, 5, 1).assignment, make_folds(10, 5, 1).assignment);
    EXPECT_NE(make_folds(200, 5, 1).assignment, make_folds(200, 5, 2).assignment);
}

TEST(Folds, SevenIntoThree) {
    auto sz = make_folds(7, 3, 9).fold_sizes();
    std::sort(sz.begin(), sz.end());
    EXPECT_EQ(sz, (std::vector<std::size_t>{2, 2, 3}));
}

TEST(Folds, PartitionProperty) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const std::size_t n = 5 + seed * 7;
        const int B = 2 + static_cast<int>(seed % 6);
        const auto plan = make_folds(n, B, seed);
        std::vector<int> hits(n, 0);
        for (int b = 1; b <= B; ++b) {
            const auto v = plan.validation(b);
            const auto tr = plan.training(b);
            EXPECT_EQ(v.size() + tr.size(), n);
            for (auto i : v) ++hits[i];
        }
        EXPECT_TRUE(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
        const auto sz = plan.fold_sizes();
        EXPECT_LE(*std::max_element(sz.begin(), sz.end()) - *std::min_element(sz.begin(), sz.end()), 1u);
    }
}

TEST(Folds, InvalidCounts) {
    for (auto [n, B] : {std::pair<std::size_t, int>{10, 1}, {3, 4}, {0, 2}}) {
        try {
            make_folds(n, B, 1);
            FAIL() << "expected invalid_plan";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::invalid_plan);
        }
    }
}

TEST(Regime, ScalarThresholdBelow) {
    std::vector<Eigen::MatrixXd> cov{(Eigen::MatrixXd(1, 2) << 0.3, 0.0).finished()};
    const LongitudinalDataset ds(cov, Eigen::MatrixXi::Ones(1, 1), Eigen::VectorXd::Zero(1));
    const RegimeFamily fam{RegimeKind::scalar_threshold_below, 0};
    EXPECT_EQ(prescriptions(ds, fam, {0.5}, 1)(0), 1);
    EXPECT_EQ(regime_indicator(ds, fam, {0.5}, 1)(0), 1);
    EXPECT_EQ(prescriptions(ds, fam, {0.1}, 1)(0), 0);
    EXPECT_EQ(regime_indicator(ds, fam, {0.1}, 1)(0), 0);
}

TEST(Regime, LinearThresholdAtZeroPrescribesNothing) {
    const auto ds = random_dataset(40, 1, 3);
    const RegimeFamily fam{RegimeKind::linear_threshold, 0};
    EXPECT_EQ(prescriptions(ds, fam, {0.0, 0.0}, 1).sum(), 0);
}

TEST(Regime, ThetaDimensionMismatch) {
    const auto ds = random_dataset(5, 1, 3);
    try {
        prescriptions(ds, RegimeFamily{RegimeKind::linear_threshold, 0}, {1.0}, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::dimension_mismatch);
    }
}

TEST(Regime, IndicatorIdempotentAndPermutationInvariant) {
    const auto ds = random_dataset(60, 2, 11);
    const RegimeFamily fam{RegimeKind::scalar_threshold_above, 1};
    Indices perm(ds.n());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(5);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto pds = ds.subset(perm);
    for (int t = 1; t <= 2; ++t)
        for (double th : {-0.5, 0.0, 0.4}) {
            const Eigen::ArrayXi a = regime_indicator(ds, fam, {th}, t);
            EXPECT_TRUE((a == regime_indicator(ds, fam, {th}, t)).all());
            const Eigen::ArrayXi b = regime_indicator(pds, fam, {th}, t);
            for (std::size_t r = 0; r < perm.size(); ++r)
                EXPECT_EQ(b(static_cast<Eigen::Index>(r)), a(static_cast<Eigen::Index>(perm[r])));
        }
}

TEST(Regime, CumulativeComplianceIsMonotone) {
    const auto ds = random_dataset(80, 3, 21);
    const RegimeFamily fam{RegimeKind::scalar_threshold_below, 0};
    for (double th : {-0.3, 0.0, 0.3}) {
        const Eigen::ArrayXi last = cumulative_compliance(ds, fam, {th}, 3);
        for (int t = 1; t <= 3; ++t) {
            const Eigen::ArrayXi c = cumulative_compliance(ds, fam, {th}, t);
            EXPECT_TRUE((last <= c).all());
            Eigen::ArrayXi direct = Eigen::ArrayXi::Ones(80);
            for (int s = 1; s <= t; ++s) direct *= regime_indicator(ds, fam, {th}, s);
            EXPECT_TRUE((c == direct).all());
        }
    }
}

TEST(Regime, AllComplyOrAnyDeviates) {
    // One subject; S1 = -1 at both stages, theta = 0 prescribes treatment.
    std::vector<Eigen::MatrixXd> cov(2, (Eigen::MatrixXd(1, 2) << -1.0, 0.0).finished());
    const RegimeFamily fam{RegimeKind::scalar_threshold_below, 0};
    const LongitudinalDataset both(cov, (Eigen::MatrixXi(1, 2) << 1, 1).finished(), Eigen::VectorXd::Zero(1));
    const LongitudinalDataset second(cov, (Eigen::MatrixXi(1, 2) << 1, 0).finished(), Eigen::VectorXd::Zero(1));
    EXPECT_EQ(cumulative_compliance(both, fam, {0.0}, 2)(0), 1);
    EXPECT_EQ(cumulative_compliance(second, fam, {0.0}, 2)(0), 0);
}

TEST(ThetaDraws, EqualWeightsAndDeterminism) {
    const auto m = theta_draws({0.0, 0.1}, 50, 3);
    ASSERT_EQ(m.size(), 50u);
    for (double w : m.weights) EXPECT_DOUBLE_EQ(w, 0.02);
    EXPECT_EQ(m.points, theta_draws({0.0, 0.1}, 50, 3).points);
}

TEST(ThetaDraws, SampleMeanWithinFourStandardErrors) {
    for (std::uint64_t seed = 1; seed <= 25; ++seed) {
        const auto m = theta_draws({0.0, 0.1}, 50, seed);
        double mean = 0.0;
        for (const auto& p : m.points) mean += p[0] / 50.0;
        EXPECT_LT(std::abs(mean), 4.0 * 0.1 / std::sqrt(50.0)) << "seed " << seed;
    }
}

TEST(ThetaDraws, ZeroDrawsRejected) {
    EXPECT_THROW(theta_draws({0.0, 0.1}, 0, 1), Error);
}

TEST(ThetaGrid, WeightsNormalized) {
    const auto g = theta_grid({{-1.0}, {0.0}, {1.0}}, {1.0, 2.0, 1.0});
    EXPECT_DOUBLE_EQ(g.weights[1], 0.5);
    EXPECT_THROW(ThetaMeasure({{0.0}}, {0.5}), Error);
}

TEST(Dataset, HistoryLayout) {
    const auto ds = random_dataset(4, 2, 1);
    const auto h = ds.history_features(2);
    ASSERT_EQ(h.cols(), 5);
    EXPECT_EQ(h(2, 0), ds.covariates(1)(2, 0));
    EXPECT_EQ(h(2, 3), ds.covariates(2)(2, 1));
    EXPECT_EQ(h(2, 4), ds.treatment(2, 1));
}

TEST(Dataset, RejectsBadInput) {
    std::vector<Eigen::MatrixXd> cov{Eigen::MatrixXd::Zero(3, 2)};
    EXPECT_THROW(LongitudinalDataset(cov, Eigen::MatrixXi::Constant(3, 1, 2), Eigen::VectorXd::Zero(3)), Error);
    EXPECT_THROW(LongitudinalDataset(cov, Eigen::MatrixXi::Zero(2, 1), Eigen::VectorXd::Zero(3)), Error);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(3);
    y(1) = std::nan("");
    EXPECT_THROW(LongitudinalDataset(cov, Eigen::MatrixXi::Zero(3, 1), y), Error);
}

TEST(Csv, RoundTripIsExact) {
    const auto ds = random_dataset(25, 3, 8);
    std::stringstream ss;
    write_dataset_csv(ss, ds);
    const auto back = read_dataset_csv(ss, {0, 1});
    ASSERT_EQ(back.n(), ds.n());
    ASSERT_EQ(back.stages(), 3);
    for (int t = 1; t <= 3; ++t) EXPECT_EQ(back.covariates(t), ds.covariates(t));
    EXPECT_EQ(back.treatments(), ds.treatments());
    EXPECT_EQ(back.outcome(), ds.outcome());
}

TEST(Csv, OutcomeOnLastRowOnly) {
    std::stringstream ss("id,stage,S1,A,Y\na,1,0.5,1,\na,2,0.25,0,3\nb,1,1,0,\nb,2,2,1,4\n");
    const auto ds = read_dataset_csv(ss);
    EXPECT_EQ(ds.n(), 2u);
    EXPECT_EQ(ds.outcome()(1), 4.0);
    EXPECT_EQ(ds.covariates(2)(0, 0), 0.25);
}

TEST(Csv, MalformedInputIsAnIoError) {
    for (const char* text : {"", "x,y\n", "id,stage,S1,A,Y\na,1,zz,1,2\n", "id,stage,S1,A,Y\na,1,1,2,2\n",
                             "id,stage,S1,A,Y\na,1,1,1,2\na,2,1,1,3\n"}) {
        std::stringstream ss(text);
        try {
            read_dataset_csv(ss);
            FAIL() << text;
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::io) << text;
        }
    }
}

TEST(Seeds, DerivedSeedsDiffer) {
    std::set<std::uint64_t> seen;
    for (std::uint64_t k = 0; k < 1000; ++k) seen.insert(derive_seed(7, {k}));
    EXPECT_EQ(seen.size(), 1000u);
    EXPECT_EQ(derive_seed(7, "x"), derive_seed(7, {fnv1a("x")}));
}
