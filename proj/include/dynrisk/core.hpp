#pragma once

// Data model: longitudinal observations, regime families, theta measures and
// cross-validation plans. Stages are 1-based throughout the public API
// (1 <= t <= T); subjects are 0-based row indices.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/error.hpp"
#include "dynrisk/rng.hpp"

namespace dynrisk {

using Theta = std::vector<double>;
using Indices = std::vector<std::size_t>;

// A regimen-response function m(theta, V).
using ModelFn = std::function<double(const Theta&, const Eigen::VectorXd&)>;

class LongitudinalDataset {
public:
    LongitudinalDataset() = default;

    // covariates[t-1] is n x d_t; treatments is n x T with entries in {0,1}.
    LongitudinalDataset(std::vector<Eigen::MatrixXd> covariates,
                        Eigen::MatrixXi treatments,
                        Eigen::VectorXd outcome,
                        Indices baseline_selector = {})
        : covariates_(std::move(covariates)),
          treatments_(std::move(treatments)),
          outcome_(std::move(outcome)),
          baseline_(std::move(baseline_selector)) {
        validate();
    }

    std::size_t n() const noexcept { return static_cast<std::size_t>(outcome_.size()); }
    int stages() const noexcept { return static_cast<int>(covariates_.size()); }

    std::size_t stage_dim(int t) const {
        check_stage(t);
        return static_cast<std::size_t>(covariates_[t - 1].cols());
    }

    const Eigen::MatrixXd& covariates(int t) const {
        check_stage(t);
        return covariates_[t - 1];
    }

    int treatment(std::size_t i, int t) const {
        check_stage(t);
        return treatments_(static_cast<Eigen::Index>(i), t - 1);
    }

    const Eigen::MatrixXi& treatments() const noexcept { return treatments_; }
    const Eigen::VectorXd& outcome() const noexcept { return outcome_; }
    const Indices& baseline_selector() const noexcept { return baseline_; }

    // V_i: the selected coordinates of S_1 for subject i.
    Eigen::VectorXd baseline(std::size_t i) const {
        Eigen::VectorXd v(static_cast<Eigen::Index>(baseline_.size()));
        for (std::size_t k = 0; k < baseline_.size(); ++k)
            v(static_cast<Eigen::Index>(k)) =
                covariates_[0](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(baseline_[k]));
        return v;
    }

    Eigen::MatrixXd baseline_matrix() const {
        Eigen::MatrixXd v(static_cast<Eigen::Index>(n()), static_cast<Eigen::Index>(baseline_.size()));
        for (std::size_t k = 0; k < baseline_.size(); ++k)
            v.col(static_cast<Eigen::Index>(k)) = covariates_[0].col(static_cast<Eigen::Index>(baseline_[k]));
        return v;
    }

    // Width of the flattened history (S_1..S_t, A_1..A_{t-1}).
    std::size_t history_dim(int t) const {
        check_stage(t);
        std::size_t d = static_cast<std::size_t>(t - 1);
        for (int s = 1; s <= t; ++s) d += stage_dim(s);
        return d;
    }

    // Flattened histories H_t, one row per subject.
    Eigen::MatrixXd history_features(int t) const {
        check_stage(t);
        Eigen::MatrixXd h(static_cast<Eigen::Index>(n()), static_cast<Eigen::Index>(history_dim(t)));
        Eigen::Index c = 0;
        for (int s = 1; s <= t; ++s) {
            const auto& x = covariates_[s - 1];
            h.middleCols(c, x.cols()) = x;
            c += x.cols();
        }
        for (int s = 1; s < t; ++s) h.col(c++) = treatments_.col(s - 1).cast<double>();
        return h;
    }

    LongitudinalDataset subset(const Indices& rows) const {
        std::vector<Eigen::MatrixXd> cov;
        cov.reserve(covariates_.size());
        const auto m = static_cast<Eigen::Index>(rows.size());
        for (const auto& x : covariates_) {
            Eigen::MatrixXd s(m, x.cols());
            for (Eigen::Index r = 0; r < m; ++r) s.row(r) = x.row(static_cast<Eigen::Index>(rows[r]));
            cov.push_back(std::move(s));
        }
        Eigen::MatrixXi a(m, treatments_.cols());
        Eigen::VectorXd y(m);
        for (Eigen::Index r = 0; r < m; ++r) {
            a.row(r) = treatments_.row(static_cast<Eigen::Index>(rows[r]));
            y(r) = outcome_(static_cast<Eigen::Index>(rows[r]));
        }
        return LongitudinalDataset(std::move(cov), std::move(a), std::move(y), baseline_);
    }

private:
    void check_stage(int t) const {
        require(t >= 1 && t <= stages(), ErrorKind::invalid_argument,
                "stage " + std::to_string(t) + " outside 1.." + std::to_string(stages()));
    }

    void validate() const {
        require(!covariates_.empty(), ErrorKind::invalid_argument, "dataset needs at least one stage");
        const auto n = outcome_.size();
        require(treatments_.rows() == n && treatments_.cols() == static_cast<Eigen::Index>(covariates_.size()),
                ErrorKind::dimension_mismatch, "treatment matrix must be n x T");
        for (const auto& x : covariates_) {
            require(x.rows() == n, ErrorKind::dimension_mismatch, "covariate block row count differs from n");
            require(x.allFinite(), ErrorKind::non_finite, "covariates must be finite");
        }
        require(outcome_.allFinite(), ErrorKind::non_finite, "outcome must be finite");
        require(((treatments_.array() == 0) || (treatments_.array() == 1)).all(), ErrorKind::invalid_argument,
                "treatments must be 0 or 1");
        for (auto j : baseline_)
            require(j < static_cast<std::size_t>(covariates_[0].cols()), ErrorKind::dimension_mismatch,
                    "baseline selector index outside S_1");
    }

    std::vector<Eigen::MatrixXd> covariates_;
    Eigen::MatrixXi treatments_;
    Eigen::VectorXd outcome_;
    Indices baseline_;
};

// ---------------------------------------------------------------------------
// Regimes

enum class RegimeKind {
    linear_threshold,       // d = I(theta' S_t > 0)
    scalar_threshold_below, // d = I(S_{index,t} < theta)
    scalar_threshold_above, // d = I(S_{index,t} > theta)
};

struct RegimeFamily {
    RegimeKind kind = RegimeKind::scalar_threshold_below;
    std::size_t index = 0;

    std::size_t theta_dim(std::size_t stage_dim) const {
        return kind == RegimeKind::linear_threshold ? stage_dim : 1;
    }

    // Prescribed treatment for one covariate row of stage t.
    template <class Row>
    int prescribe(const Row& s, const Theta& theta) const {
        switch (kind) {
        case RegimeKind::linear_threshold: {
            double acc = 0.0;
            for (Eigen::Index j = 0; j < s.size(); ++j) acc += theta[static_cast<std::size_t>(j)] * s(j);
            return acc > 0.0 ? 1 : 0;
        }
        case RegimeKind::scalar_threshold_below:
            return s(static_cast<Eigen::Index>(index)) < theta[0] ? 1 : 0;
        case RegimeKind::scalar_threshold_above:
            return s(static_cast<Eigen::Index>(index)) > theta[0] ? 1 : 0;
        }
        return 0;
    }

    void check(std::size_t stage_dim, const Theta& theta) const {
        require(theta.size() == theta_dim(stage_dim), ErrorKind::dimension_mismatch,
                "theta has dimension " + std::to_string(theta.size()) + ", regime expects " +
                    std::to_string(theta_dim(stage_dim)));
        if (kind != RegimeKind::linear_threshold)
            require(index < stage_dim, ErrorKind::dimension_mismatch, "regime covariate index outside S_t");
    }
};

inline std::string to_string(RegimeKind k) {
    switch (k) {
    case RegimeKind::linear_threshold: return "linear_threshold";
    case RegimeKind::scalar_threshold_below: return "scalar_threshold_below";
    case RegimeKind::scalar_threshold_above: return "scalar_threshold_above";
    }
    return "?";
}

inline RegimeKind regime_kind_from_string(const std::string& s) {
    if (s == "linear_threshold") return RegimeKind::linear_threshold;
    if (s == "scalar_threshold_below") return RegimeKind::scalar_threshold_below;
    if (s == "scalar_threshold_above") return RegimeKind::scalar_threshold_above;
    fail(ErrorKind::invalid_argument, "unknown regime kind '" + s + "'");
}

// Prescriptions d_t^theta for every subject at stage t.
inline Eigen::ArrayXi prescriptions(const LongitudinalDataset& ds, const RegimeFamily& fam, const Theta& theta,
                                    int t) {
    const auto& s = ds.covariates(t);
    fam.check(static_cast<std::size_t>(s.cols()), theta);
    Eigen::ArrayXi d(s.rows());
    for (Eigen::Index i = 0; i < s.rows(); ++i) d(i) = fam.prescribe(s.row(i), theta);
    return d;
}

// I(A_t = d_t^theta) per subject.
inline Eigen::ArrayXi regime_indicator(const LongitudinalDataset& ds, const RegimeFamily& fam, const Theta& theta,
                                       int t) {
    const Eigen::ArrayXi d = prescriptions(ds, fam, theta, t);
    return (ds.treatments().col(t - 1).array() == d).cast<int>();
}

// prod_{s <= upto} I(A_s = d_s^theta) per subject.
inline Eigen::ArrayXi cumulative_compliance(const LongitudinalDataset& ds, const RegimeFamily& fam,
                                            const Theta& theta, int upto) {
    require(upto >= 1 && upto <= ds.stages(), ErrorKind::invalid_argument, "upto outside 1..T");
    Eigen::ArrayXi c = Eigen::ArrayXi::Ones(static_cast<Eigen::Index>(ds.n()));
    for (int t = 1; t <= upto; ++t) c *= regime_indicator(ds, fam, theta, t);
    return c;
}

// ---------------------------------------------------------------------------
// Theta measures

struct NormalSpec {
    double mean = 0.0;
    double sd = 0.1;
};

struct ThetaMeasure {
    enum class Provenance { monte_carlo, grid };

    std::vector<Theta> points;
    std::vector<double> weights;
    Provenance provenance = Provenance::grid;
    NormalSpec dist{};
    std::uint64_t seed = 0;

    ThetaMeasure() = default;
    ThetaMeasure(std::vector<Theta> pts, std::vector<double> w, Provenance prov = Provenance::grid)
        : points(std::move(pts)), weights(std::move(w)), provenance(prov) {
        validate();
    }

    std::size_t size() const noexcept { return points.size(); }

    void validate() const {
        require(!points.empty() && points.size() == weights.size(), ErrorKind::invalid_argument,
                "theta measure needs matching nonempty points and weights");
        double total = 0.0;
        for (std::size_t k = 0; k < points.size(); ++k) {
            require(weights[k] >= 0.0 && std::isfinite(weights[k]), ErrorKind::invalid_argument,
                    "theta weights must be nonnegative");
            for (double v : points[k]) require(std::isfinite(v), ErrorKind::non_finite, "theta points must be finite");
            require(points[k].size() == points[0].size(), ErrorKind::dimension_mismatch,
                    "theta points must share a dimension");
            total += weights[k];
        }
        require(std::abs(total - 1.0) <= 1e-12, ErrorKind::invalid_argument, "theta weights must sum to 1");
    }
};

// K equal-weight Monte-Carlo draws from a normal distribution.
inline ThetaMeasure theta_draws(NormalSpec dist, std::size_t K, std::uint64_t seed) {
    require(K >= 1, ErrorKind::invalid_argument, "theta_draws needs K >= 1");
    require(dist.sd > 0.0 && std::isfinite(dist.mean), ErrorKind::invalid_argument, "theta_draws needs sd > 0");
    Rng rng(derive_seed(seed, "theta"));
    std::normal_distribution<double> z(dist.mean, dist.sd);
    std::vector<Theta> pts(K);
    for (auto& p : pts) p = {z(rng)};
    ThetaMeasure m(std::move(pts), std::vector<double>(K, 1.0 / static_cast<double>(K)),
                   ThetaMeasure::Provenance::monte_carlo);
    m.dist = dist;
    m.seed = seed;
    return m;
}

// Deterministic grid; weights are normalized.
inline ThetaMeasure theta_grid(std::vector<Theta> points, std::vector<double> weights = {}) {
    if (weights.empty()) weights.assign(points.size(), 1.0);
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    require(total > 0.0, ErrorKind::invalid_argument, "theta grid weights must have positive sum");
    for (auto& w : weights) w /= total;
    return ThetaMeasure(std::move(points), std::move(weights), ThetaMeasure::Provenance::grid);
}

// ---------------------------------------------------------------------------
// Cross-validation plans

struct CrossValPlan {
    std::size_t n = 0;
    int B = 0;
    std::uint64_t seed = 0;
    std::vector<int> assignment; // fold id in 1..B per subject

    Indices validation(int b) const {
        Indices out;
        for (std::size_t i = 0; i < n; ++i)
            if (assignment[i] == b) out.push_back(i);
        return out;
    }

    Indices training(int b) const {
        Indices out;
        for (std::size_t i = 0; i < n; ++i)
            if (assignment[i] != b) out.push_back(i);
        return out;
    }

    std::vector<std::size_t> fold_sizes() const {
        std::vector<std::size_t> sz(static_cast<std::size_t>(B), 0);
        for (int f : assignment) ++sz[static_cast<std::size_t>(f - 1)];
        return sz;
    }
};

// Balanced random partition: shuffled round-robin over a seeded permutation.
inline CrossValPlan make_folds(std::size_t n, int B, std::uint64_t seed) {
    require(B >= 2 && static_cast<std::size_t>(B) <= n, ErrorKind::invalid_plan,
            "fold count must satisfy 2 <= B <= n (B=" + std::to_string(B) + ", n=" + std::to_string(n) + ")");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "folds"));
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_below(rng, i)]);
    CrossValPlan plan{n, B, seed, std::vector<int>(n, 0)};
    for (std::size_t k = 0; k < n; ++k) plan.assignment[perm[k]] = static_cast<int>(k % static_cast<std::size_t>(B)) + 1;
    return plan;
}

// Plan over an arbitrary row grouping: rows sharing a group id land in one fold.
inline std::vector<int> expand_plan(const CrossValPlan& groups, const Indices& row_group) {
    std::vector<int> out(row_group.size());
    for (std::size_t r = 0; r < row_group.size(); ++r) out[r] = groups.assignment[row_group[r]];
    return out;
}

} // namespace dynrisk
