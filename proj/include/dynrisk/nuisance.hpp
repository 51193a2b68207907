#pragma once

// Nuisance learners: stage-wise propensities P(A_t = 1 | H_t) and the
// backward sequential regressions mu^t for a fixed working model.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/core.hpp"
#include "dynrisk/hal.hpp"

namespace dynrisk {

// Settings shared by HAL nuisance learners.
struct HalSettings {
    hal::BasisOptions basis{2, 20};
    hal::SolverOptions solver{};
    std::size_t grid_size = 50;
    double grid_ratio = 1e-4;
    std::vector<double> grid; // explicit grid; overrides size/ratio when set

    std::vector<double> make_grid(double lambda_max) const {
        if (!grid.empty()) {
            hal::check_grid(grid);
            return grid;
        }
        return hal::default_grid(lambda_max, grid_size, grid_ratio);
    }
};

// Per-row regime bookkeeping for one dataset: prescription d_t^theta_k and
// compliance I(A_t = d_t^theta_k) as n x K matrices per stage.
struct RegimeCache {
    std::vector<Eigen::MatrixXi> prescribed;
    std::vector<Eigen::MatrixXi> complies;

    RegimeCache() = default;
    RegimeCache(const LongitudinalDataset& ds, const RegimeFamily& fam, const ThetaMeasure& thetas) {
        thetas.validate();
        const auto n = static_cast<Eigen::Index>(ds.n());
        const auto K = static_cast<Eigen::Index>(thetas.size());
        for (int t = 1; t <= ds.stages(); ++t) {
            Eigen::MatrixXi d(n, K), c(n, K);
            for (Eigen::Index k = 0; k < K; ++k) {
                const Eigen::ArrayXi dk = prescriptions(ds, fam, thetas.points[static_cast<std::size_t>(k)], t);
                d.col(k) = dk.matrix();
                c.col(k) = (ds.treatments().col(t - 1).array() == dk).cast<int>().matrix();
            }
            prescribed.push_back(std::move(d));
            complies.push_back(std::move(c));
        }
    }

    int stages() const noexcept { return static_cast<int>(prescribed.size()); }
};

// ---------------------------------------------------------------------------
// Propensity

enum class PropensityMethod { hal_cv, hal_fixed, logistic, known };

inline std::string to_string(PropensityMethod m) {
    switch (m) {
    case PropensityMethod::hal_cv: return "hal_cv";
    case PropensityMethod::hal_fixed: return "hal_fixed";
    case PropensityMethod::logistic: return "logistic";
    case PropensityMethod::known: return "known";
    }
    return "?";
}

inline PropensityMethod propensity_method_from_string(const std::string& s) {
    if (s == "hal_cv" || s == "hal") return PropensityMethod::hal_cv;
    if (s == "hal_fixed") return PropensityMethod::hal_fixed;
    if (s == "logistic") return PropensityMethod::logistic;
    if (s == "known") return PropensityMethod::known;
    fail(ErrorKind::invalid_argument, "unknown propensity method '" + s + "'");
}

// P(A_t = 1 | H_t = h) supplied by the caller.
using KnownPropensity = std::function<double(int t, const Eigen::RowVectorXd& h)>;

struct PropensityOptions {
    PropensityMethod method = PropensityMethod::hal_cv;
    double lambda = 0.0; // hal_fixed
    double clip = 0.01;
    HalSettings hal{};
    KnownPropensity known;
};

inline double clip_probability(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

// Probability of the prescribed direction, from a clipped P(A = 1).
inline double direction_probability(double p1, int d) { return d == 1 ? p1 : 1.0 - p1; }

struct LogisticFit {
    Eigen::VectorXd coef;       // intercept first
    Eigen::MatrixXd covariance; // inverse observed information
    int iterations = 0;
};

// Unpenalized logistic regression by Newton-Raphson.
inline LogisticFit logistic_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int max_iter = 100,
                                       double tol = 1e-10) {
    const Eigen::Index n = X.rows(), p = X.cols() + 1;
    require(y.size() == n, ErrorKind::dimension_mismatch, "logistic response length differs from rows");
    Eigen::MatrixXd Z(n, p);
    Z.col(0).setOnes();
    Z.rightCols(p - 1) = X;
    LogisticFit fit;
    fit.coef = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd H(p, p);
    for (int it = 1; it <= max_iter; ++it) {
        const Eigen::VectorXd prob = (Z * fit.coef).unaryExpr([](double e) { return hal::expit(e); });
        const Eigen::VectorXd wt = prob.array() * (1.0 - prob.array());
        H.noalias() = Z.transpose() * wt.asDiagonal() * Z;
        const Eigen::VectorXd grad = Z.transpose() * (y - prob);
        const Eigen::VectorXd step = H.ldlt().solve(grad);
        require(step.allFinite(), ErrorKind::convergence, "logistic regression: singular information matrix");
        fit.coef += step;
        fit.iterations = it;
        if (step.norm() <= tol * (1.0 + fit.coef.norm())) {
            fit.covariance = H.ldlt().solve(Eigen::MatrixXd::Identity(p, p));
            return fit;
        }
    }
    fail(ErrorKind::convergence, "logistic regression did not converge in " + std::to_string(max_iter) +
                                     " iterations (separation?)");
}

struct PropensityStageFit {
    int stage = 1;
    PropensityMethod method = PropensityMethod::hal_cv;
    double clip = 0.01;
    hal::HalFit hal;      // hal_cv, hal_fixed
    Eigen::VectorXd coef; // logistic
    KnownPropensity known;

    // Unclipped P(A_t = 1 | H_t) for history rows H.
    Eigen::VectorXd prob_treated(const Eigen::MatrixXd& H) const {
        switch (method) {
        case PropensityMethod::hal_cv:
        case PropensityMethod::hal_fixed: return hal.predict_proba(H);
        case PropensityMethod::logistic: {
            require(H.cols() + 1 == coef.size(), ErrorKind::dimension_mismatch, "history width differs from fit");
            return ((H * coef.tail(coef.size() - 1)).array() + coef(0))
                .matrix()
                .unaryExpr([](double e) { return hal::expit(e); });
        }
        case PropensityMethod::known: {
            Eigen::VectorXd p(H.rows());
            for (Eigen::Index i = 0; i < H.rows(); ++i) p(i) = known(stage, H.row(i));
            return p;
        }
        }
        return {};
    }

    Eigen::VectorXd treated_clipped(const Eigen::MatrixXd& H) const {
        return prob_treated(H).unaryExpr([this](double p) { return clip_probability(p, clip); });
    }
};

inline void check_treatment_varies(const LongitudinalDataset& ds, int t) {
    const auto a = ds.treatments().col(t - 1);
    const int s = a.sum();
    require(s > 0 && s < a.size(), ErrorKind::degenerate_treatment,
            "stage " + std::to_string(t) + ": treatment is constant in the training data");
}

// Fits P(A_t = 1 | H_t) on `train`. hal_cv selects lambda by cross-validation
// over `folds_for_hal`, a plan over the training subjects.
inline PropensityStageFit fit_propensity(const LongitudinalDataset& train, int t, const PropensityOptions& opt,
                                         const CrossValPlan* folds_for_hal = nullptr) {
    require(t >= 1 && t <= train.stages(), ErrorKind::invalid_argument, "stage outside 1..T");
    require(train.n() >= 1, ErrorKind::invalid_argument, "empty training data");
    require(opt.clip > 0.0 && opt.clip < 0.5, ErrorKind::invalid_argument, "propensity clip must lie in (0, 0.5)");
    PropensityStageFit fit;
    fit.stage = t;
    fit.method = opt.method;
    fit.clip = opt.clip;
    if (opt.method == PropensityMethod::known) {
        require(static_cast<bool>(opt.known), ErrorKind::invalid_argument, "known propensity needs a function");
        fit.known = opt.known;
        return fit;
    }
    check_treatment_varies(train, t);
    const Eigen::MatrixXd H = train.history_features(t);
    const Eigen::VectorXd a = train.treatments().col(t - 1).cast<double>();
    if (opt.method == PropensityMethod::logistic) {
        fit.coef = logistic_regression(H, a).coef;
        return fit;
    }
    const auto basis = hal::build_basis(H, opt.hal.basis);
    const Eigen::VectorXd w = Eigen::VectorXd::Ones(a.size());
    if (opt.method == PropensityMethod::hal_fixed) {
        fit.hal = hal::fit_single(basis, a, w, hal::LossKind::bernoulli, opt.lambda, opt.hal.solver);
        return fit;
    }
    require(folds_for_hal != nullptr && folds_for_hal->n == train.n(), ErrorKind::invalid_plan,
            "hal_cv propensity needs a fold plan over the training subjects");
    const auto grid = opt.hal.make_grid(hal::lambda_max(basis, a, w, hal::LossKind::bernoulli));
    const auto sel = hal::cv_select_lambda(basis, a, w, hal::LossKind::bernoulli, grid, *folds_for_hal, opt.hal.solver);
    const std::vector<double> head(grid.begin(), grid.begin() + static_cast<std::ptrdiff_t>(sel.index) + 1);
    fit.hal = hal::fit_path(basis, a, w, hal::LossKind::bernoulli, head, opt.hal.solver).fits.back();
    return fit;
}

// Clipped P(A_t = 1 | H_t) for every subject of ds, one column per stage.
inline Eigen::MatrixXd treated_probabilities(const LongitudinalDataset& ds, const std::vector<PropensityStageFit>& fits) {
    require(static_cast<int>(fits.size()) == ds.stages(), ErrorKind::dimension_mismatch,
            "need one propensity fit per stage");
    Eigen::MatrixXd p(static_cast<Eigen::Index>(ds.n()), ds.stages());
    for (int t = 1; t <= ds.stages(); ++t) p.col(t - 1) = fits[static_cast<std::size_t>(t - 1)].treated_clipped(ds.history_features(t));
    return p;
}

// prod_t I(A_t = d_t^theta_k) / pi^t per subject and theta point (n x K).
inline Eigen::MatrixXd compliance_weights(const RegimeCache& rc, const Eigen::MatrixXd& p1) {
    const Eigen::Index n = p1.rows();
    const Eigen::Index K = rc.complies.front().cols();
    Eigen::MatrixXd w = Eigen::MatrixXd::Ones(n, K);
    for (int t = 1; t <= rc.stages(); ++t) {
        const auto& c = rc.complies[static_cast<std::size_t>(t - 1)];
        const auto& d = rc.prescribed[static_cast<std::size_t>(t - 1)];
        for (Eigen::Index k = 0; k < K; ++k)
            for (Eigen::Index i = 0; i < n; ++i)
                w(i, k) *= c(i, k) / direction_probability(p1(i, t - 1), d(i, k));
    }
    return w;
}

// ---------------------------------------------------------------------------
// Sequential regressions

enum class MuRegressor { hal, linear, zero };

inline std::string to_string(MuRegressor r) {
    switch (r) {
    case MuRegressor::hal: return "hal";
    case MuRegressor::linear: return "linear";
    case MuRegressor::zero: return "zero";
    }
    return "?";
}

inline MuRegressor mu_regressor_from_string(const std::string& s) {
    if (s == "hal") return MuRegressor::hal;
    if (s == "linear") return MuRegressor::linear;
    if (s == "zero") return MuRegressor::zero;
    fail(ErrorKind::invalid_argument, "unknown mu regressor '" + s + "'");
}

struct MuOptions {
    MuRegressor regressor = MuRegressor::hal;
    HalSettings hal{};
    double lambda = -1.0; // >= 0 fixes the HAL penalty instead of cross-validating
};

// (Y - m(theta, V))^2 per subject.
inline Eigen::VectorXd mu_pseudo_outcome_terminal(const LongitudinalDataset& ds, const ModelFn& m, const Theta& theta) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(ds.n()));
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const double r = ds.outcome()(static_cast<Eigen::Index>(i)) - m(theta, ds.baseline(i));
        out(static_cast<Eigen::Index>(i)) = r * r;
    }
    return out;
}

// Regression rows for mu^t: one row per (subject, theta point), features
// (H_t, theta).
inline Eigen::MatrixXd mu_features(const Eigen::MatrixXd& H, const Indices& subjects, const std::vector<std::size_t>& ks,
                                   const ThetaMeasure& thetas) {
    const auto q = static_cast<Eigen::Index>(thetas.points[0].size());
    Eigen::MatrixXd X(static_cast<Eigen::Index>(subjects.size()), H.cols() + q);
    for (std::size_t r = 0; r < subjects.size(); ++r) {
        const auto row = static_cast<Eigen::Index>(r);
        X.row(row).head(H.cols()) = H.row(static_cast<Eigen::Index>(subjects[r]));
        for (Eigen::Index j = 0; j < q; ++j) X(row, H.cols() + j) = thetas.points[ks[r]][static_cast<std::size_t>(j)];
    }
    return X;
}

struct PooledRows {
    Indices subject;              // dataset row
    std::vector<std::size_t> k;   // theta index
    Eigen::MatrixXd X;
};

// Stage-t compliers among `subjects`, pooled over theta points.
inline PooledRows mu_rows(const RegimeCache& rc, const ThetaMeasure& thetas, const Eigen::MatrixXd& H,
                          const Indices& subjects, int t) {
    PooledRows rows;
    const auto& c = rc.complies[static_cast<std::size_t>(t - 1)];
    for (std::size_t k = 0; k < thetas.size(); ++k)
        for (auto i : subjects)
            if (c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) == 1) {
                rows.subject.push_back(i);
                rows.k.push_back(k);
            }
    rows.X = mu_features(H, rows.subject, rows.k, thetas);
    return rows;
}

// Throws unless every theta point has a stage-t complier among `subjects`.
inline void check_compliers(const RegimeCache& rc, const ThetaMeasure& thetas, const Indices& subjects, int t) {
    const auto& c = rc.complies[static_cast<std::size_t>(t - 1)];
    for (std::size_t k = 0; k < thetas.size(); ++k) {
        bool any = false;
        for (auto i : subjects)
            if (c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) == 1) {
                any = true;
                break;
            }
        if (!any) {
            std::string th;
            for (double v : thetas.points[k]) th += (th.empty() ? "" : ",") + std::to_string(v);
            fail(ErrorKind::no_compliers,
                 "no compliers at stage " + std::to_string(t) + " for theta (" + th + ")");
        }
    }
}

// Least squares with intercept, minimum-norm on the centered design.
inline Eigen::VectorXd weighted_least_squares(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w) {
    const double W = w.sum();
    require(W > 0.0, ErrorKind::invalid_argument, "weighted least squares: weights sum to zero");
    const Eigen::RowVectorXd xbar = (w.transpose() * X) / W;
    const double ybar = w.dot(y) / W;
    const Eigen::VectorXd sw = w.array().sqrt();
    Eigen::MatrixXd Xc = sw.asDiagonal() * (X.rowwise() - xbar);
    // A column that centering reduces to round-off is constant; drop it so
    // the minimum-norm solution gives it slope 0.
    for (Eigen::Index j = 0; j < X.cols(); ++j)
        if (Xc.col(j).norm() <= 1e-12 * (sw.asDiagonal() * X.col(j)).norm()) Xc.col(j).setZero();
    const Eigen::VectorXd yc = sw.array() * (y.array() - ybar);
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(Xc);
    cod.setThreshold(1e-10);
    const Eigen::VectorXd slope = X.cols() > 0 ? Eigen::VectorXd(cod.solve(yc)) : Eigen::VectorXd();
    Eigen::VectorXd beta(X.cols() + 1);
    beta(0) = ybar - (X.cols() > 0 ? xbar.dot(slope) : 0.0);
    beta.tail(X.cols()) = slope;
    return beta;
}

struct MuStageFit {
    int stage = 1;
    MuRegressor regressor = MuRegressor::hal;
    hal::HalFit hal;
    Eigen::VectorXd coef; // linear: intercept then features

    // Predictions at feature rows (H_t, theta), floored at 0.
    Eigen::VectorXd predict(const Eigen::MatrixXd& X) const {
        Eigen::VectorXd out;
        switch (regressor) {
        case MuRegressor::zero: out = Eigen::VectorXd::Zero(X.rows()); break;
        case MuRegressor::linear: out = (X * coef.tail(coef.size() - 1)).array() + coef(0); break;
        case MuRegressor::hal: out = hal.predict(X); break;
        }
        return out.cwiseMax(0.0);
    }
};

struct MuSequence {
    std::vector<MuStageFit> stages; // stage t at index t-1
    ThetaMeasure thetas;
    ModelFn model;

    // mu^t(H_t(i), theta_k) for every subject and theta point (n x K).
    Eigen::MatrixXd predict_stage(const LongitudinalDataset& ds, int t) const {
        const auto& fit = stages.at(static_cast<std::size_t>(t - 1));
        const auto n = static_cast<Eigen::Index>(ds.n());
        const auto K = static_cast<Eigen::Index>(thetas.size());
        if (fit.regressor == MuRegressor::zero) return Eigen::MatrixXd::Zero(n, K);
        const Eigen::MatrixXd H = ds.history_features(t);
        Indices subj(ds.n());
        for (std::size_t i = 0; i < ds.n(); ++i) subj[i] = i;
        Eigen::MatrixXd out(n, K);
        for (Eigen::Index k = 0; k < K; ++k) {
            const std::vector<std::size_t> ks(ds.n(), static_cast<std::size_t>(k));
            out.col(k) = fit.predict(mu_features(H, subj, ks, thetas));
        }
        return out;
    }
};

// Pseudo-outcome for stage t rows: (Y - m)^2 at t = T, else mu^{t+1} at the
// stage-(t+1) history.
inline Eigen::VectorXd mu_response(const LongitudinalDataset& ds, const PooledRows& rows, int t, const ModelFn& m,
                                   const ThetaMeasure& thetas, const MuStageFit* next) {
    Eigen::VectorXd y(static_cast<Eigen::Index>(rows.subject.size()));
    if (t == ds.stages()) {
        for (std::size_t r = 0; r < rows.subject.size(); ++r) {
            const auto i = rows.subject[r];
            const double e = ds.outcome()(static_cast<Eigen::Index>(i)) - m(thetas.points[rows.k[r]], ds.baseline(i));
            y(static_cast<Eigen::Index>(r)) = e * e;
        }
        return y;
    }
    const Eigen::MatrixXd Hn = ds.history_features(t + 1);
    return next->predict(mu_features(Hn, rows.subject, rows.k, thetas));
}

// Backward recursion t = T..1 on `train`. HAL penalties are chosen by
// cross-validation over `folds` (a plan over the training subjects) unless
// opt.lambda is set.
inline MuSequence fit_mu_sequence(const LongitudinalDataset& train, const ModelFn& m, const RegimeFamily& fam,
                                  const ThetaMeasure& thetas, const MuOptions& opt,
                                  const CrossValPlan* folds = nullptr) {
    const int T = train.stages();
    MuSequence seq;
    seq.thetas = thetas;
    seq.model = m;
    seq.stages.resize(static_cast<std::size_t>(T));
    const RegimeCache rc(train, fam, thetas);
    Indices all(train.n());
    for (std::size_t i = 0; i < train.n(); ++i) all[i] = i;
    for (int t = T; t >= 1; --t) {
        auto& fit = seq.stages[static_cast<std::size_t>(t - 1)];
        fit.stage = t;
        fit.regressor = opt.regressor;
        if (opt.regressor == MuRegressor::zero) continue;
        check_compliers(rc, thetas, all, t);
        const PooledRows rows = mu_rows(rc, thetas, train.history_features(t), all, t);
        const MuStageFit* next = t < T ? &seq.stages[static_cast<std::size_t>(t)] : nullptr;
        const Eigen::VectorXd y = mu_response(train, rows, t, m, thetas, next);
        const Eigen::VectorXd w = Eigen::VectorXd::Ones(y.size());
        if (opt.regressor == MuRegressor::linear) {
            fit.coef = weighted_least_squares(rows.X, y, w);
            continue;
        }
        const auto basis = hal::build_basis(rows.X, opt.hal.basis);
        if (opt.lambda >= 0.0) {
            fit.hal = hal::fit_single(basis, y, w, hal::LossKind::squared, opt.lambda, opt.hal.solver);
            continue;
        }
        require(folds != nullptr && folds->n == train.n(), ErrorKind::invalid_plan,
                "cross-validated mu needs a fold plan over the training subjects");
        const auto grid = opt.hal.make_grid(hal::lambda_max(basis, y, w, hal::LossKind::squared));
        const auto sel = hal::cv_select_lambda(basis, y, w, hal::LossKind::squared, grid,
                                               expand_plan(*folds, rows.subject), opt.hal.solver);
        const std::vector<double> head(grid.begin(), grid.begin() + static_cast<std::ptrdiff_t>(sel.index) + 1);
        fit.hal = hal::fit_path(basis, y, w, hal::LossKind::squared, head, opt.hal.solver).fits.back();
    }
    return seq;
}

} // namespace dynrisk
