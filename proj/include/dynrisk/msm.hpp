#pragma once

// Working models m(theta, V) fit by IPW-weighted regression over pooled
// (subject, theta) rows.

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/core.hpp"
#include "dynrisk/csv.hpp"
#include "dynrisk/hal.hpp"
#include "dynrisk/nuisance.hpp"

namespace dynrisk {

enum class MsmFamily { linear_theta, quadratic_theta, hal_theta };

inline std::string to_string(MsmFamily f) {
    switch (f) {
    case MsmFamily::linear_theta: return "linear_theta";
    case MsmFamily::quadratic_theta: return "quadratic_theta";
    case MsmFamily::hal_theta: return "hal_theta";
    }
    return "?";
}

inline MsmFamily msm_family_from_string(const std::string& s) {
    if (s == "linear_theta" || s == "linear") return MsmFamily::linear_theta;
    if (s == "quadratic_theta" || s == "quadratic") return MsmFamily::quadratic_theta;
    if (s == "hal_theta" || s == "hal") return MsmFamily::hal_theta;
    fail(ErrorKind::invalid_argument, "unknown working model family '" + s + "'");
}

struct MsmOptions {
    MsmFamily family = MsmFamily::linear_theta;
    bool use_baseline = false; // hal_theta: include V as regressors
    HalSettings hal{};
    int inner_folds = 5;       // hal_theta lambda selection
    std::uint64_t seed = 0;
    ModelFn fixed;             // when set, used as m on every fold without fitting
};

struct WorkingModel {
    MsmFamily family = MsmFamily::linear_theta;
    Eigen::VectorXd beta; // parametric: intercept, theta terms (then squares)
    hal::HalFit hal;
    bool use_baseline = false;
    ThetaMeasure thetas;
    int fold = 0;
    ModelFn custom;

    // Parametric regressors for one theta point, without the intercept.
    static Eigen::RowVectorXd theta_terms(MsmFamily family, const Theta& theta) {
        const auto q = static_cast<Eigen::Index>(theta.size());
        Eigen::RowVectorXd r(family == MsmFamily::quadratic_theta ? 2 * q : q);
        for (Eigen::Index j = 0; j < q; ++j) {
            r(j) = theta[static_cast<std::size_t>(j)];
            if (family == MsmFamily::quadratic_theta) r(q + j) = theta[static_cast<std::size_t>(j)] * theta[static_cast<std::size_t>(j)];
        }
        return r;
    }

    Eigen::RowVectorXd hal_row(const Theta& theta, const Eigen::VectorXd& V) const {
        const auto q = static_cast<Eigen::Index>(theta.size());
        Eigen::RowVectorXd r(q + (use_baseline ? V.size() : 0));
        for (Eigen::Index j = 0; j < q; ++j) r(j) = theta[static_cast<std::size_t>(j)];
        if (use_baseline) r.tail(V.size()) = V.transpose();
        return r;
    }

    double predict(const Theta& theta, const Eigen::VectorXd& V = {}) const {
        for (double v : theta) require(std::isfinite(v), ErrorKind::non_finite, "theta must be finite");
        if (custom) return custom(theta, V);
        if (family == MsmFamily::hal_theta) return hal.predict(Eigen::MatrixXd(hal_row(theta, V)))(0);
        return beta(0) + theta_terms(family, theta).dot(beta.tail(beta.size() - 1));
    }

    bool depends_on_baseline() const noexcept {
        return static_cast<bool>(custom) || (family == MsmFamily::hal_theta && use_baseline);
    }

    ModelFn as_function() const {
        return [m = *this](const Theta& th, const Eigen::VectorXd& V) { return m.predict(th, V); };
    }
};

inline double predict_m(const WorkingModel& m, const Theta& theta, const Eigen::VectorXd& V = {}) {
    return m.predict(theta, V);
}

// Fits m on `train` with weights prod_t I(A_t = d_t^theta)/pi^t. `p1` holds
// clipped P(A_t = 1 | H_t) for the training subjects (n x T).
inline WorkingModel fit_msm(const LongitudinalDataset& train, const MsmOptions& opt, const Eigen::MatrixXd& p1,
                            const RegimeFamily& fam, const ThetaMeasure& thetas) {
    require(p1.rows() == static_cast<Eigen::Index>(train.n()) && p1.cols() == train.stages(),
            ErrorKind::dimension_mismatch, "propensity table does not match the training data");
    const RegimeCache rc(train, fam, thetas);
    const Eigen::MatrixXd cw = compliance_weights(rc, p1);

    WorkingModel m;
    m.family = opt.family;
    m.use_baseline = opt.use_baseline;
    m.thetas = thetas;
    if (opt.fixed) {
        m.custom = opt.fixed;
        return m;
    }

    Indices subj;
    std::vector<std::size_t> ks;
    std::vector<double> wv;
    for (std::size_t k = 0; k < thetas.size(); ++k)
        for (std::size_t i = 0; i < train.n(); ++i) {
            const double w = thetas.weights[k] * cw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
            if (w > 0.0) {
                subj.push_back(i);
                ks.push_back(k);
                wv.push_back(w);
            }
        }
    require(!subj.empty(), ErrorKind::no_compliers, "working model: no training subject follows any regime");
    const auto rows = static_cast<Eigen::Index>(subj.size());
    const Eigen::VectorXd w = Eigen::Map<const Eigen::VectorXd>(wv.data(), rows);
    Eigen::VectorXd y(rows);
    for (Eigen::Index r = 0; r < rows; ++r) y(r) = train.outcome()(static_cast<Eigen::Index>(subj[static_cast<std::size_t>(r)]));

    if (opt.family != MsmFamily::hal_theta) {
        const auto p = WorkingModel::theta_terms(opt.family, thetas.points[0]).size();
        Eigen::MatrixXd X(rows, p);
        for (Eigen::Index r = 0; r < rows; ++r) X.row(r) = WorkingModel::theta_terms(opt.family, thetas.points[ks[static_cast<std::size_t>(r)]]);
        m.beta = weighted_least_squares(X, y, w);
        require(m.beta.allFinite(), ErrorKind::non_finite, "working model coefficients are not finite");
        return m;
    }

    const Eigen::Index q = static_cast<Eigen::Index>(thetas.points[0].size());
    const Eigen::Index v = opt.use_baseline ? static_cast<Eigen::Index>(train.baseline_selector().size()) : 0;
    Eigen::MatrixXd X(rows, q + v);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto i = subj[static_cast<std::size_t>(r)];
        X.row(r) = m.hal_row(thetas.points[ks[static_cast<std::size_t>(r)]], train.baseline(i));
    }
    const auto basis = hal::build_basis(X, hal::BasisOptions{std::min<int>(opt.hal.basis.max_order, static_cast<int>(X.cols())),
                                                           opt.hal.basis.max_knots});
    const auto grid = opt.hal.make_grid(hal::lambda_max(basis, y, w, hal::LossKind::squared));
    std::size_t idx = 0;
    if (grid.size() > 1) {
        const int B = std::min<int>(opt.inner_folds, static_cast<int>(train.n()));
        const auto inner = make_folds(train.n(), B, derive_seed(opt.seed, "msm"));
        idx = hal::cv_select_lambda(basis, y, w, hal::LossKind::squared, grid, expand_plan(inner, subj), opt.hal.solver)
                  .index;
    }
    const std::vector<double> head(grid.begin(), grid.begin() + static_cast<std::ptrdiff_t>(idx) + 1);
    m.hal = hal::fit_path(basis, y, w, hal::LossKind::squared, head, opt.hal.solver).fits.back();
    return m;
}

// (theta, m(theta)) over probe points, one column per model. Baseline-
// dependent models are averaged over the rows of `V` when given.
inline void write_curve_csv(std::ostream& out, const std::vector<WorkingModel>& models, const std::vector<Theta>& probe,
                            const Eigen::MatrixXd& V = {}) {
    out << "theta";
    for (std::size_t j = 0; j < models.size(); ++j) out << ",m" << (j + 1);
    out << '\n';
    for (const auto& th : probe) {
        for (std::size_t c = 0; c < th.size(); ++c) out << (c ? ";" : "") << detail::format_double(th[c]);
        for (const auto& m : models) {
            double val = 0.0;
            if (m.depends_on_baseline() && V.rows() > 0) {
                for (Eigen::Index i = 0; i < V.rows(); ++i) val += m.predict(th, V.row(i).transpose());
                val /= static_cast<double>(V.rows());
            } else {
                val = m.predict(th, Eigen::VectorXd());
            }
            out << ',' << detail::format_double(val);
        }
        out << '\n';
    }
}

} // namespace dynrisk
