#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/core.hpp"
#include "dynrisk/hal/basis.hpp"
#include "dynrisk/hal/lasso.hpp"

namespace dynrisk::hal {

struct HalFit {
    double intercept = 0.0;
    std::vector<std::uint32_t> index; // basis column ids, ascending
    std::vector<double> value;
    double lambda = 0.0;
    LossKind loss = LossKind::squared;
    double l1_norm = 0.0; // |b0| + sum |beta|
    bool saturated = false;
    long sweeps = 0;
    std::shared_ptr<const BasisSpec> spec;

    std::size_t active_size() const noexcept { return index.size(); }

    double penalized_norm() const {
        double s = 0.0;
        for (double v : value) s += std::abs(v);
        return s;
    }

    Eigen::VectorXd dense_beta(std::size_t p) const {
        Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
        for (std::size_t k = 0; k < index.size(); ++k) b(index[k]) = value[k];
        return b;
    }

    // Linear predictor from a precomputed design over the same basis.
    Eigen::VectorXd linear_predictor(const Eigen::MatrixXd& design) const {
        Eigen::VectorXd eta = Eigen::VectorXd::Constant(design.rows(), intercept);
        for (std::size_t k = 0; k < index.size(); ++k) eta.noalias() += value[k] * design.col(index[k]);
        return eta;
    }

    Eigen::VectorXd predict(const Eigen::MatrixXd& X) const {
        require(spec != nullptr, ErrorKind::invalid_argument, "fit carries no basis definition");
        require(static_cast<std::size_t>(X.cols()) == spec->design_dim, ErrorKind::dimension_mismatch,
                "prediction rows have " + std::to_string(X.cols()) + " columns, basis expects " +
                    std::to_string(spec->design_dim));
        Eigen::VectorXd eta = Eigen::VectorXd::Constant(X.rows(), intercept);
        Eigen::VectorXd col(X.rows());
        for (std::size_t k = 0; k < index.size(); ++k) {
            spec->fill_column(X, index[k], col);
            eta.noalias() += value[k] * col;
        }
        return eta;
    }

    Eigen::VectorXd predict_proba(const Eigen::MatrixXd& X) const {
        return predict(X).unaryExpr([](double e) { return expit(e); });
    }
};

inline Eigen::VectorXd predict(const HalFit& fit, const HalBasis& basis, const Eigen::MatrixXd& X) {
    require(static_cast<std::size_t>(X.cols()) == basis.design_dim(), ErrorKind::dimension_mismatch,
            "prediction rows do not match the basis dimension");
    return fit.predict(X);
}

struct HalPath {
    std::vector<double> grid;
    std::vector<HalFit> fits;
};

// count log-spaced values from lambda_max down to ratio * lambda_max.
inline std::vector<double> default_grid(double lambda_max, std::size_t count = 50, double ratio = 1e-4) {
    require(count >= 1, ErrorKind::invalid_argument, "grid needs at least one value");
    if (!(lambda_max > 0.0)) lambda_max = 1e-8;
    std::vector<double> g(count);
    if (count == 1) {
        g[0] = lambda_max;
        return g;
    }
    const double step = std::log(ratio) / static_cast<double>(count - 1);
    for (std::size_t k = 0; k < count; ++k) g[k] = lambda_max * std::exp(step * static_cast<double>(k));
    return g;
}

inline void check_grid(const std::vector<double>& grid) {
    require(!grid.empty(), ErrorKind::invalid_argument, "lambda grid is empty");
    for (std::size_t k = 0; k < grid.size(); ++k) {
        require(std::isfinite(grid[k]) && grid[k] >= 0.0, ErrorKind::invalid_argument, "lambda values must be finite and >= 0");
        if (k > 0) require(grid[k] < grid[k - 1], ErrorKind::invalid_argument, "lambda grid must be strictly decreasing");
    }
}

namespace detail {

inline HalFit snapshot(const CoordinateDescent& cd, double lambda, LossKind loss,
                       const std::shared_ptr<const BasisSpec>& spec) {
    HalFit f;
    f.intercept = cd.intercept();
    f.lambda = lambda;
    f.loss = loss;
    f.saturated = cd.saturated();
    f.sweeps = cd.sweeps();
    f.spec = spec;
    const auto& b = cd.beta();
    f.l1_norm = std::abs(f.intercept);
    for (Eigen::Index j = 0; j < b.size(); ++j)
        if (b(j) != 0.0) {
            f.index.push_back(static_cast<std::uint32_t>(j));
            f.value.push_back(b(j));
            f.l1_norm += std::abs(b(j));
        }
    return f;
}

} // namespace detail

// Warm-started path over a design matrix whose columns follow `spec`.
inline HalPath fit_path_design(const Eigen::MatrixXd& design, const std::shared_ptr<const BasisSpec>& spec,
                               const Eigen::VectorXd& y, const Eigen::VectorXd& w, LossKind loss,
                               const std::vector<double>& grid, const SolverOptions& opt = {},
                               const HalFit* warm = nullptr) {
    check_grid(grid);
    if (loss == LossKind::bernoulli)
        require(((y.array() == 0.0) || (y.array() == 1.0)).all(), ErrorKind::invalid_argument,
                "bernoulli response must be 0/1");
    CoordinateDescent cd(design, y, w, loss, opt);
    if (warm != nullptr) cd.set_state(warm->intercept, warm->dense_beta(static_cast<std::size_t>(design.cols())));
    HalPath path;
    path.grid = grid;
    path.fits.reserve(grid.size());
    for (double lambda : grid) {
        cd.solve(lambda);
        path.fits.push_back(detail::snapshot(cd, lambda, loss, spec));
    }
    return path;
}

inline HalPath fit_path(const HalBasis& basis, const Eigen::VectorXd& y, const Eigen::VectorXd& w, LossKind loss,
                        const std::vector<double>& grid, const SolverOptions& opt = {}) {
    return fit_path_design(basis.design(), basis.spec_ptr(), y, w, loss, grid, opt);
}

inline HalFit fit_single(const HalBasis& basis, const Eigen::VectorXd& y, const Eigen::VectorXd& w, LossKind loss,
                         double lambda, const SolverOptions& opt = {}, const HalFit* warm = nullptr) {
    return fit_path_design(basis.design(), basis.spec_ptr(), y, w, loss, {lambda}, opt, warm).fits.front();
}

inline double lambda_max(const Eigen::MatrixXd& design, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                         LossKind loss, double prob_clip = 1e-6) {
    SolverOptions opt;
    opt.prob_clip = prob_clip;
    return CoordinateDescent(design, y, w, loss, opt).lambda_max();
}

inline double lambda_max(const HalBasis& basis, const Eigen::VectorXd& y, const Eigen::VectorXd& w, LossKind loss) {
    return lambda_max(basis.design(), y, w, loss);
}

// Pointwise loss used for validation: half squared error or Bernoulli deviance/2.
inline double pointwise_loss(LossKind loss, double y, double eta, double prob_clip = 1e-6) {
    if (loss == LossKind::squared) return 0.5 * (y - eta) * (y - eta);
    const double p = std::clamp(expit(eta), prob_clip, 1.0 - prob_clip);
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

struct CvSelection {
    std::size_t index = 0;
    double lambda = 0.0;
    std::vector<double> cv_loss; // weighted mean validation loss per grid value
};

// argmin with ties resolved toward the earlier (larger) lambda.
inline std::size_t argmin_first(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < v.size(); ++k)
        if (v[k] < v[best]) best = k;
    return best;
}

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& X, const Indices& rows) {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(rows[r]));
    return out;
}

inline Eigen::VectorXd select_rows(const Eigen::VectorXd& x, const Indices& rows) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) out(static_cast<Eigen::Index>(r)) = x(static_cast<Eigen::Index>(rows[r]));
    return out;
}

// K-fold selection of lambda on a fixed basis. `fold_of_row` gives each
// design row a fold id in 1..B (use expand_plan for grouped rows).
inline CvSelection cv_select_lambda(const HalBasis& basis, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                    LossKind loss, const std::vector<double>& grid,
                                    const std::vector<int>& fold_of_row, const SolverOptions& opt = {}) {
    check_grid(grid);
    const auto n = static_cast<std::size_t>(y.size());
    require(fold_of_row.size() == n, ErrorKind::dimension_mismatch, "fold assignment length differs from rows");
    CvSelection sel;
    if (grid.size() == 1) {
        sel.lambda = grid[0];
        sel.cv_loss = {0.0};
        return sel;
    }
    const int B = *std::max_element(fold_of_row.begin(), fold_of_row.end());
    std::vector<double> total(grid.size(), 0.0);
    double wsum = 0.0;
    for (int b = 1; b <= B; ++b) {
        Indices tr, va;
        for (std::size_t i = 0; i < n; ++i) (fold_of_row[i] == b ? va : tr).push_back(i);
        if (va.empty() || tr.empty()) continue;
        const Eigen::MatrixXd Xtr = select_rows(basis.design(), tr);
        const Eigen::MatrixXd Xva = select_rows(basis.design(), va);
        const Eigen::VectorXd ytr = select_rows(y, tr), wtr = select_rows(w, tr);
        if (wtr.sum() <= 0.0) continue;
        const HalPath path = fit_path_design(Xtr, basis.spec_ptr(), ytr, wtr, loss, grid, opt);
        for (std::size_t k = 0; k < grid.size(); ++k) {
            const Eigen::VectorXd eta = path.fits[k].linear_predictor(Xva);
            for (std::size_t r = 0; r < va.size(); ++r) {
                const auto i = static_cast<Eigen::Index>(va[r]);
                total[k] += w(i) * pointwise_loss(loss, y(i), eta(static_cast<Eigen::Index>(r)), opt.prob_clip);
            }
        }
        for (auto i : va) wsum += w(static_cast<Eigen::Index>(i));
    }
    require(wsum > 0.0, ErrorKind::invalid_argument, "cross-validation found no usable fold");
    for (auto& t : total) t /= wsum;
    sel.cv_loss = total;
    sel.index = argmin_first(total);
    sel.lambda = grid[sel.index];
    return sel;
}

inline CvSelection cv_select_lambda(const HalBasis& basis, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                    LossKind loss, const std::vector<double>& grid, const CrossValPlan& folds,
                                    const SolverOptions& opt = {}) {
    return cv_select_lambda(basis, y, w, loss, grid, folds.assignment, opt);
}

} // namespace dynrisk::hal
