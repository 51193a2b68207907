#pragma once

// Cross-validated risk estimators: IPW, multiply robust (MR) and
// undersmoothed IPW (UIPW) with the D_CAR and score selectors.
//
// All estimators share one cross-fitting engine. For each fold b the
// nuisances and the working model are fit on the training subjects and the
// per-subject contributions are averaged over the validation subjects.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dynrisk/core.hpp"
#include "dynrisk/hal.hpp"
#include "dynrisk/msm.hpp"
#include "dynrisk/nuisance.hpp"

namespace dynrisk {

enum class EstimatorKind { ipw, mr, uipw_dcar, uipw_score };

inline std::string to_string(EstimatorKind k) {
    switch (k) {
    case EstimatorKind::ipw: return "ipw";
    case EstimatorKind::mr: return "mr";
    case EstimatorKind::uipw_dcar: return "uipw_dcar";
    case EstimatorKind::uipw_score: return "uipw_score";
    }
    return "?";
}

inline EstimatorKind estimator_kind_from_string(const std::string& s) {
    if (s == "ipw") return EstimatorKind::ipw;
    if (s == "mr") return EstimatorKind::mr;
    if (s == "uipw_dcar") return EstimatorKind::uipw_dcar;
    if (s == "uipw_score") return EstimatorKind::uipw_score;
    fail(ErrorKind::invalid_argument, "unknown estimator '" + s + "'");
}

inline const std::vector<EstimatorKind>& all_estimators() {
    static const std::vector<EstimatorKind> all{EstimatorKind::ipw, EstimatorKind::mr, EstimatorKind::uipw_dcar,
                                                EstimatorKind::uipw_score};
    return all;
}

struct EstimatorConfig {
    RegimeFamily fam{RegimeKind::scalar_threshold_below, 0};
    ThetaMeasure thetas;
    MsmOptions msm{};
    PropensityOptions prop{};
    MuOptions mu{};
    double level = 0.95;
    std::size_t score_J = 0;  // 0: floor(sqrt(n)) - 1
    double score_eps = 1e-8;  // floor for the L1 norm in the score criterion
};

// ---------------------------------------------------------------------------
// Contributions

// Inputs for one subject's contribution. p1 holds clipped P(A_t = 1 | H_t)
// by stage, loss the squared residuals (Y - m(theta_k, V))^2 by theta point,
// mu the sequential regressions mu^t(H_t, theta_k) by stage (may be null).
namespace detail {

struct SubjectTerms {
    const RegimeCache* rc = nullptr;
    const std::vector<double>* w = nullptr;
    const Eigen::MatrixXd* p1 = nullptr;
    const Eigen::MatrixXd* loss = nullptr;
    const std::vector<Eigen::MatrixXd>* mu = nullptr;

    double ratio(Eigen::Index i, Eigen::Index k, int t) const {
        const auto s = static_cast<std::size_t>(t - 1);
        return rc->complies[s](i, k) / direction_probability((*p1)(i, t - 1), rc->prescribed[s](i, k));
    }

    // (I_t - pi_t) / pi_t * mu_t * prod_{j<t} I_j / pi_j at theta point k.
    double augmentation(Eigen::Index i, Eigen::Index k, int t) const {
        const auto s = static_cast<std::size_t>(t - 1);
        const double pi = direction_probability((*p1)(i, t - 1), rc->prescribed[s](i, k));
        double prod = 1.0;
        for (int j = 1; j < t; ++j) prod *= ratio(i, k, j);
        return (rc->complies[s](i, k) - pi) / pi * (*mu)[s](i, k) * prod;
    }

    double ipw_k(Eigen::Index i, Eigen::Index k) const {
        double wt = 1.0;
        for (int t = 1; t <= rc->stages(); ++t) wt *= ratio(i, k, t);
        return wt * (*loss)(i, k);
    }

    double ipw(Eigen::Index i) const {
        double c = 0.0;
        for (std::size_t k = 0; k < w->size(); ++k) c += (*w)[k] * ipw_k(i, static_cast<Eigen::Index>(k));
        return c;
    }

    double eif(Eigen::Index i) const {
        double c = 0.0;
        for (std::size_t k = 0; k < w->size(); ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            double aug = 0.0;
            for (int t = 1; t <= rc->stages(); ++t) aug += augmentation(i, kk, t);
            c += (*w)[k] * (ipw_k(i, kk) - aug);
        }
        return c;
    }

    double dcar(Eigen::Index i, int t) const {
        double c = 0.0;
        for (std::size_t k = 0; k < w->size(); ++k) c += (*w)[k] * augmentation(i, static_cast<Eigen::Index>(k), t);
        return c;
    }
};

} // namespace detail

// (Y_i - m(theta_k, V_i))^2 for every subject and theta point.
inline Eigen::MatrixXd loss_matrix(const LongitudinalDataset& ds, const ModelFn& m, const ThetaMeasure& thetas) {
    Eigen::MatrixXd L(static_cast<Eigen::Index>(ds.n()), static_cast<Eigen::Index>(thetas.size()));
    for (std::size_t i = 0; i < ds.n(); ++i) {
        const Eigen::VectorXd v = ds.baseline(i);
        for (std::size_t k = 0; k < thetas.size(); ++k) {
            const double r = ds.outcome()(static_cast<Eigen::Index>(i)) - m(thetas.points[k], v);
            L(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = r * r;
        }
    }
    return L;
}

// Stage predictions of a fitted sequence for every subject of ds.
inline std::vector<Eigen::MatrixXd> mu_predictions(const LongitudinalDataset& ds, const MuSequence& mu) {
    std::vector<Eigen::MatrixXd> out;
    for (int t = 1; t <= ds.stages(); ++t) out.push_back(mu.predict_stage(ds, t));
    return out;
}

namespace detail {

struct OneSubject {
    LongitudinalDataset ds;
    RegimeCache rc;
    Eigen::MatrixXd p1;
    Eigen::MatrixXd loss;

    OneSubject(const LongitudinalDataset& full, std::size_t i, const Eigen::MatrixXd& p1_full, const ModelFn& m,
               const RegimeFamily& fam, const ThetaMeasure& thetas)
        : ds(full.subset({i})), rc(ds, fam, thetas), p1(p1_full.row(static_cast<Eigen::Index>(i))),
          loss(loss_matrix(ds, m, thetas)) {
        require(p1_full.cols() == full.stages(), ErrorKind::dimension_mismatch, "propensity table needs one column per stage");
    }
};

} // namespace detail

// sum_k w_k [prod_t I(A_t = d_t)/pi^t] (Y - m(theta_k, V))^2 for subject i.
// p1 is the n x T table of clipped P(A_t = 1 | H_t).
inline double ipw_loss_contribution(const LongitudinalDataset& ds, std::size_t i, const Eigen::MatrixXd& p1,
                                    const ModelFn& m, const RegimeFamily& fam, const ThetaMeasure& thetas) {
    detail::OneSubject one(ds, i, p1, m, fam, thetas);
    detail::SubjectTerms st{&one.rc, &thetas.weights, &one.p1, &one.loss, nullptr};
    return st.ipw(0);
}

// Uncentered efficient influence function contribution for subject i.
inline double eif_contribution(const LongitudinalDataset& ds, std::size_t i, const Eigen::MatrixXd& p1,
                               const MuSequence& mu, const ModelFn& m, const RegimeFamily& fam,
                               const ThetaMeasure& thetas) {
    detail::OneSubject one(ds, i, p1, m, fam, thetas);
    const auto mp = mu_predictions(one.ds, mu);
    detail::SubjectTerms st{&one.rc, &thetas.weights, &one.p1, &one.loss, &mp};
    return st.eif(0);
}

// D_CAR^t for subject i.
inline double dcar_term(const LongitudinalDataset& ds, std::size_t i, int t, const Eigen::MatrixXd& p1,
                        const MuSequence& mu, const RegimeFamily& fam, const ThetaMeasure& thetas) {
    require(t >= 1 && t <= ds.stages(), ErrorKind::invalid_argument, "stage outside 1..T");
    detail::OneSubject one(ds, i, p1, mu.model ? mu.model : ModelFn([](const Theta&, const Eigen::VectorXd&) { return 0.0; }),
                           fam, thetas);
    const auto mp = mu_predictions(one.ds, mu);
    detail::SubjectTerms st{&one.rc, &thetas.weights, &one.p1, &one.loss, &mp};
    return st.dcar(0, t);
}

// ---------------------------------------------------------------------------
// Results

inline double normal_quantile(double p) {
    // Acklam's rational approximation refined by one Halley step.
    require(p > 0.0 && p < 1.0, ErrorKind::invalid_argument, "quantile level must lie in (0, 1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                               1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                               6.680131188771972e+01, -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                               -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                               3.754408661907416e+00};
    const double lo = 0.02425, hi = 1 - lo;
    double x;
    if (p < lo) {
        const double q = std::sqrt(-2 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    } else if (p <= hi) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
    } else {
        const double q = std::sqrt(-2 * std::log(1 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
    return x - u / (1 + x * u / 2);
}

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
};

// point +/- z_{(1+level)/2} sqrt(if_variance / n).
inline Interval confidence_interval(double point, double if_variance, std::size_t n, double level = 0.95) {
    require(if_variance >= 0.0, ErrorKind::invalid_argument, "variance must be nonnegative");
    require(n >= 1, ErrorKind::invalid_argument, "confidence interval needs n >= 1");
    require(level > 0.0 && level < 1.0, ErrorKind::invalid_argument, "confidence level must lie in (0, 1)");
    const double z = normal_quantile(0.5 + level / 2.0);
    const double half = z * std::sqrt(if_variance / static_cast<double>(n));
    return {point - half, point + half};
}

struct RiskEstimate {
    EstimatorKind kind = EstimatorKind::ipw;
    double point = 0.0;
    double if_variance = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double level = 0.95;
    std::vector<double> per_fold;
    std::size_t n = 0;
    int B = 0;
    std::uint64_t seed = 0;
    std::vector<double> lambda;       // propensity penalty per stage, when HAL
    std::vector<double> mu_lambda;    // mu penalty per stage, when cross-validated
    std::vector<WorkingModel> models; // m_{n,b} per fold
    std::string config_digest;
};

struct DcarDiagnostics {
    std::vector<std::vector<double>> grid;      // per stage
    std::vector<std::vector<double>> mean;      // per stage and lambda: cross-fold mean of D_CAR^t
    std::vector<double> selected;               // per stage
    std::vector<std::size_t> selected_index;
};

struct ScoreDiagnostics {
    std::vector<std::vector<double>> grid;
    std::vector<std::vector<double>> criterion;   // NaN where every fold has an empty active set
    std::vector<std::vector<double>> mean_active; // cross-fold mean active-set size
    std::size_t J = 0;
    std::vector<double> lambda_J;
    std::vector<double> lambda_tilde;
    std::vector<double> selected;
    std::vector<std::size_t> selected_index;
};

struct EstimatorFailure {
    EstimatorKind kind;
    Error error;
};

struct EstimationReport {
    std::vector<RiskEstimate> estimates;
    std::vector<EstimatorFailure> failures; // estimators that raised after the shared setup
    std::optional<DcarDiagnostics> dcar;
    std::optional<ScoreDiagnostics> score;

    const RiskEstimate& get(EstimatorKind k) const {
        for (const auto& e : estimates)
            if (e.kind == k) return e;
        for (const auto& f : failures)
            if (f.kind == k) throw f.error;
        fail(ErrorKind::invalid_argument, "report has no " + to_string(k) + " estimate");
    }
};

inline nlohmann::json to_json(const WorkingModel& m) {
    nlohmann::json j;
    j["family"] = m.custom ? "fixed" : to_string(m.family);
    if (m.custom) return j;
    if (m.family == MsmFamily::hal_theta) {
        j["hal"] = hal::to_json(m.hal);
        j["use_baseline"] = m.use_baseline;
    } else {
        j["beta"] = std::vector<double>(m.beta.data(), m.beta.data() + m.beta.size());
    }
    return j;
}

inline nlohmann::json to_json(const RiskEstimate& e) {
    nlohmann::json j;
    j["estimator"] = to_string(e.kind);
    j["point"] = e.point;
    j["if_variance"] = e.if_variance;
    j["ci_lo"] = e.ci_lo;
    j["ci_hi"] = e.ci_hi;
    j["level"] = e.level;
    j["per_fold"] = e.per_fold;
    j["n"] = e.n;
    j["B"] = e.B;
    j["seed"] = e.seed;
    j["lambda"] = e.lambda;
    j["mu_lambda"] = e.mu_lambda;
    j["models"] = nlohmann::json::array();
    for (const auto& m : e.models) j["models"].push_back(to_json(m));
    j["config_digest"] = e.config_digest;
    return j;
}

inline nlohmann::json to_json(const DcarDiagnostics& d) {
    nlohmann::json j;
    j["stages"] = nlohmann::json::array();
    for (std::size_t t = 0; t < d.grid.size(); ++t)
        j["stages"].push_back({{"stage", t + 1},
                               {"grid", d.grid[t]},
                               {"mean_dcar", d.mean[t]},
                               {"selected", d.selected[t]},
                               {"selected_index", d.selected_index[t]}});
    return j;
}

inline nlohmann::json to_json(const ScoreDiagnostics& d) {
    nlohmann::json j;
    j["J"] = d.J;
    j["stages"] = nlohmann::json::array();
    for (std::size_t t = 0; t < d.grid.size(); ++t) {
        nlohmann::json crit = nlohmann::json::array();
        for (double v : d.criterion[t]) crit.push_back(std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v));
        j["stages"].push_back({{"stage", t + 1},
                               {"grid", d.grid[t]},
                               {"criterion", crit},
                               {"mean_active", d.mean_active[t]},
                               {"lambda_J", d.lambda_J[t]},
                               {"lambda_tilde", d.lambda_tilde[t]},
                               {"selected", d.selected[t]},
                               {"selected_index", d.selected_index[t]}});
    }
    return j;
}

// ---------------------------------------------------------------------------
// Selectors on precomputed per-lambda summaries

// Index minimizing |mean|; ties toward the larger lambda.
inline std::size_t select_dcar_index(const std::vector<double>& mean) {
    require(!mean.empty(), ErrorKind::invalid_argument, "D_CAR selection needs a nonempty grid");
    std::vector<double> a(mean.size());
    for (std::size_t k = 0; k < mean.size(); ++k) a[k] = std::abs(mean[k]);
    return hal::argmin_first(a);
}

// Score rule: argmin of the criterion over lambdas with a nonempty active
// set, then the larger of that lambda and the largest lambda whose mean
// active-set size reaches J. Returns (selected, J index, tilde index).
struct ScorePick {
    std::size_t selected = 0;
    std::size_t j_index = 0;
    std::size_t tilde_index = 0;
};

inline ScorePick select_score_index(const std::vector<double>& criterion, const std::vector<double>& mean_active,
                                    std::size_t J) {
    require(!criterion.empty() && criterion.size() == mean_active.size(), ErrorKind::invalid_argument,
            "score selection needs matching nonempty summaries");
    ScorePick pick;
    bool found = false;
    for (std::size_t k = 0; k < criterion.size(); ++k) {
        if (std::isnan(criterion[k])) continue;
        if (!found || criterion[k] < criterion[pick.tilde_index]) pick.tilde_index = k;
        found = true;
    }
    require(found, ErrorKind::convergence, "score criterion: the active set is empty at every lambda");
    pick.j_index = criterion.size() - 1;
    for (std::size_t k = 0; k < mean_active.size(); ++k)
        if (mean_active[k] >= static_cast<double>(J)) {
            pick.j_index = k;
            break;
        }
    pick.selected = std::min(pick.j_index, pick.tilde_index);
    return pick;
}

// One fold's score: sum_j |P_val Omega_j| / max(||beta||_1, eps).
inline double score_term(double abs_score_sum, double l1_norm, double eps) {
    return abs_score_sum / std::max(l1_norm, eps);
}


// ---------------------------------------------------------------------------
// Propensity paths shared by the cross-fold selectors

// One stage: a HAL path per training fold over a shared grid, the fold bases
// evaluated on every subject, and the cross-fold validation log loss.
struct StagePaths {
    std::vector<double> grid;
    std::vector<hal::HalPath> path;      // per fold
    std::vector<Eigen::MatrixXd> design; // per fold, all subjects
    std::vector<double> cv_loss;
    std::size_t cv_index = 0;
};

struct PropensityPaths {
    std::vector<StagePaths> stages;
    double clip = 0.01;

    // Clipped P(A_t = 1 | H_t) on all subjects from fold b (0-based) at grid index j.
    Eigen::VectorXd probability(int b, int t, std::size_t j) const {
        const auto& sp = stages.at(static_cast<std::size_t>(t - 1));
        const double eps = clip;
        return sp.path[static_cast<std::size_t>(b)].fits[j].linear_predictor(sp.design[static_cast<std::size_t>(b)])
            .unaryExpr([eps](double e) { return clip_probability(hal::expit(e), eps); });
    }

    Eigen::MatrixXd table(int b, const std::vector<std::size_t>& idx) const {
        Eigen::MatrixXd p(stages.front().design.front().rows(), static_cast<Eigen::Index>(stages.size()));
        for (std::size_t t = 0; t < stages.size(); ++t) p.col(static_cast<Eigen::Index>(t)) = probability(b, static_cast<int>(t + 1), idx[t]);
        return p;
    }

    std::vector<double> lambdas(const std::vector<std::size_t>& idx) const {
        std::vector<double> l;
        for (std::size_t t = 0; t < stages.size(); ++t) l.push_back(stages[t].grid[idx[t]]);
        return l;
    }

    std::vector<std::size_t> cv_indices() const {
        std::vector<std::size_t> idx;
        for (const auto& sp : stages) idx.push_back(sp.cv_index);
        return idx;
    }
};

namespace detail {

inline Error with_context(const Error& e, const std::string& where) { return Error(e.kind(), where + ": " + e.what()); }

inline std::string fold_name(int b) { return "fold " + std::to_string(b + 1); }

} // namespace detail

// Bernoulli HAL paths for every stage and training fold. The grid comes from
// opt.hal (or {opt.lambda} for hal_fixed) with lambda_max taken over folds;
// the cross-validated index minimizes the pooled validation log loss.
inline PropensityPaths fit_propensity_paths(const LongitudinalDataset& ds, const CrossValPlan& plan,
                                            const PropensityOptions& opt) {
    require(plan.n == ds.n(), ErrorKind::invalid_plan, "fold plan does not match the dataset size");
    const auto& hs = opt.hal;
    PropensityPaths out;
    out.clip = opt.clip;
    for (int t = 1; t <= ds.stages(); ++t) {
        const Eigen::MatrixXd H = ds.history_features(t);
        StagePaths sp;
        std::vector<hal::HalBasis> basis;
        std::vector<Eigen::VectorXd> a;
        double lmax = 0.0;
        for (int b = 0; b < plan.B; ++b) {
            const auto tr = plan.training(b + 1);
            const auto tds = ds.subset(tr);
            try {
                check_treatment_varies(tds, t);
            } catch (const Error& e) {
                throw detail::with_context(e, detail::fold_name(b));
            }
            basis.push_back(hal::build_basis(hal::select_rows(H, tr), hs.basis));
            a.push_back(tds.treatments().col(t - 1).cast<double>());
            lmax = std::max(lmax, hal::lambda_max(basis.back(), a.back(), Eigen::VectorXd::Ones(a.back().size()),
                                                  hal::LossKind::bernoulli));
        }
        sp.grid = opt.method == PropensityMethod::hal_fixed ? std::vector<double>{opt.lambda} : hs.make_grid(lmax);
        sp.cv_loss.assign(sp.grid.size(), 0.0);
        for (int b = 0; b < plan.B; ++b) {
            const auto& bs = basis[static_cast<std::size_t>(b)];
            const auto& ab = a[static_cast<std::size_t>(b)];
            try {
                sp.path.push_back(hal::fit_path(bs, ab, Eigen::VectorXd::Ones(ab.size()), hal::LossKind::bernoulli,
                                                sp.grid, hs.solver));
            } catch (const Error& e) {
                throw detail::with_context(e, detail::fold_name(b) + ", propensity stage " + std::to_string(t));
            }
            sp.design.push_back(bs.evaluate(H));
            for (std::size_t j = 0; j < sp.grid.size(); ++j) {
                const Eigen::VectorXd eta = sp.path.back().fits[j].linear_predictor(sp.design.back());
                for (auto i : plan.validation(b + 1))
                    sp.cv_loss[j] += hal::pointwise_loss(hal::LossKind::bernoulli, ds.treatment(i, t),
                                                         eta(static_cast<Eigen::Index>(i)), hs.solver.prob_clip);
            }
        }
        for (auto& v : sp.cv_loss) v /= static_cast<double>(ds.n());
        sp.cv_index = hal::argmin_first(sp.cv_loss);
        out.stages.push_back(std::move(sp));
    }
    return out;
}

// D_CAR selector. mu[b][t-1] holds mu^t(H_t(i), theta_k) for every subject
// (n x K) from fold b's fit. Stages are chosen in order; stage t uses the
// already selected penalties for the earlier stages.
inline DcarDiagnostics select_lambda_dcar(const LongitudinalDataset& ds, const CrossValPlan& plan,
                                          const PropensityPaths& paths,
                                          const std::vector<std::vector<Eigen::MatrixXd>>& mu,
                                          const RegimeFamily& fam, const ThetaMeasure& thetas) {
    const RegimeCache rc(ds, fam, thetas);
    const int T = ds.stages();
    require(static_cast<int>(paths.stages.size()) == T && static_cast<int>(mu.size()) == plan.B,
            ErrorKind::dimension_mismatch, "selector inputs do not match the plan");
    DcarDiagnostics diag;
    std::vector<std::size_t> idx(static_cast<std::size_t>(T), 0);
    for (int t = 1; t <= T; ++t) {
        const auto& sp = paths.stages[static_cast<std::size_t>(t - 1)];
        require(!sp.grid.empty(), ErrorKind::invalid_argument, "D_CAR selection needs a nonempty grid");
        std::vector<double> mean(sp.grid.size(), 0.0);
        for (int b = 0; b < plan.B; ++b) {
            const auto val = plan.validation(b + 1);
            Eigen::MatrixXd p = paths.table(b, idx);
            for (std::size_t j = 0; j < sp.grid.size(); ++j) {
                p.col(t - 1) = paths.probability(b, t, j);
                detail::SubjectTerms st{&rc, &thetas.weights, &p, nullptr, &mu[static_cast<std::size_t>(b)]};
                double s = 0.0;
                for (auto i : val) s += st.dcar(static_cast<Eigen::Index>(i), t);
                mean[j] += s / static_cast<double>(val.size()) / static_cast<double>(plan.B);
            }
        }
        idx[static_cast<std::size_t>(t - 1)] = select_dcar_index(mean);
        diag.grid.push_back(sp.grid);
        diag.mean.push_back(mean);
        diag.selected.push_back(sp.grid[idx[static_cast<std::size_t>(t - 1)]]);
        diag.selected_index.push_back(idx[static_cast<std::size_t>(t - 1)]);
    }
    return diag;
}

// Score selector with J-feature floor. J = 0 means floor(sqrt(n)) - 1.
inline ScoreDiagnostics select_lambda_score(const LongitudinalDataset& ds, const CrossValPlan& plan,
                                            const PropensityPaths& paths, std::size_t J = 0, double eps = 1e-8) {
    ScoreDiagnostics diag;
    diag.J = J > 0 ? J
                   : static_cast<std::size_t>(std::max(1.0, std::floor(std::sqrt(static_cast<double>(ds.n()))) - 1.0));
    for (int t = 1; t <= ds.stages(); ++t) {
        const auto& sp = paths.stages.at(static_cast<std::size_t>(t - 1));
        const std::size_t G = sp.grid.size();
        std::vector<double> crit(G, 0.0), active(G, 0.0);
        std::vector<int> nonempty(G, 0);
        for (int b = 0; b < plan.B; ++b) {
            const auto bb = static_cast<std::size_t>(b);
            const auto val = plan.validation(b + 1);
            const auto& design = sp.design[bb];
            for (std::size_t j = 0; j < G; ++j) {
                const auto& fit = sp.path[bb].fits[j];
                active[j] += static_cast<double>(fit.active_size()) / static_cast<double>(plan.B);
                if (fit.active_size() == 0) continue;
                ++nonempty[j];
                const Eigen::VectorXd p = paths.probability(b, t, j);
                double sum = 0.0;
                for (auto c : fit.index) {
                    double om = 0.0;
                    for (auto i : val) {
                        const auto ii = static_cast<Eigen::Index>(i);
                        om += design(ii, c) * (ds.treatment(i, t) - p(ii)) / p(ii);
                    }
                    sum += std::abs(om / static_cast<double>(val.size()));
                }
                crit[j] += score_term(sum, fit.l1_norm, eps) / static_cast<double>(plan.B);
            }
        }
        for (std::size_t j = 0; j < G; ++j)
            if (nonempty[j] == 0) crit[j] = std::numeric_limits<double>::quiet_NaN();
        const auto pick = select_score_index(crit, active, diag.J);
        diag.grid.push_back(sp.grid);
        diag.criterion.push_back(crit);
        diag.mean_active.push_back(active);
        diag.lambda_J.push_back(sp.grid[pick.j_index]);
        diag.lambda_tilde.push_back(sp.grid[pick.tilde_index]);
        diag.selected.push_back(sp.grid[pick.selected]);
        diag.selected_index.push_back(pick.selected);
    }
    return diag;
}

// ---------------------------------------------------------------------------
// Engine

namespace detail {

class Engine {
public:
    Engine(const LongitudinalDataset& ds, const CrossValPlan& plan, const EstimatorConfig& cfg)
        : ds_(ds), plan_(plan), cfg_(cfg), T_(ds.stages()), B_(plan.B) {
        require(plan.n == ds.n() && plan.assignment.size() == ds.n(), ErrorKind::invalid_plan,
                "fold plan does not match the dataset size");
        cfg.thetas.validate();
        for (int t = 1; t <= T_; ++t) cfg.fam.check(ds.stage_dim(t), cfg.thetas.points[0]);
        rc_ = RegimeCache(ds, cfg.fam, cfg.thetas);
        for (int b = 1; b <= B_; ++b) {
            train_.push_back(plan.training(b));
            val_.push_back(plan.validation(b));
            require(!val_.back().empty() && !train_.back().empty(), ErrorKind::invalid_plan,
                    "fold " + std::to_string(b) + " is empty");
            train_ds_.push_back(ds.subset(train_.back()));
        }
        for (int t = 1; t <= T_; ++t) H_.push_back(ds.history_features(t));
    }

    EstimationReport run(const std::vector<EstimatorKind>& kinds) {
        EstimationReport rep;
        const auto wants = [&](EstimatorKind k) { return std::find(kinds.begin(), kinds.end(), k) != kinds.end(); };
        const bool any_uipw = wants(EstimatorKind::uipw_dcar) || wants(EstimatorKind::uipw_score);
        if (uses_hal_paths() || any_uipw) {
            PropensityOptions po = cfg_.prop;
            if (!uses_hal_paths()) po.method = PropensityMethod::hal_cv;
            paths_ = fit_propensity_paths(ds_, plan_, po);
        }
        base_propensity();
        for (int b = 0; b < B_; ++b) {
            m_base_.push_back(fit_model(b, p_base_[static_cast<std::size_t>(b)]));
            loss_base_.push_back(loss_matrix(ds_, m_base_.back().as_function(), cfg_.thetas));
        }
        std::optional<Error> mu_error;
        if (wants(EstimatorKind::mr) || any_uipw) {
            try {
                mu_base_ = fit_mu(m_base_, nullptr, nullptr);
            } catch (const Error& e) {
                mu_error = e;
            }
        }
        for (auto k : kinds) {
            try {
                if (k != EstimatorKind::ipw && mu_error) throw *mu_error;
                switch (k) {
                case EstimatorKind::ipw: rep.estimates.push_back(ipw()); break;
                case EstimatorKind::mr: rep.estimates.push_back(mr()); break;
                case EstimatorKind::uipw_dcar: {
                    auto diag = select_lambda_dcar(ds_, plan_, paths_, mu_base_->pred, cfg_.fam, cfg_.thetas);
                    rep.estimates.push_back(uipw(EstimatorKind::uipw_dcar, diag.selected_index));
                    rep.dcar = std::move(diag);
                    break;
                }
                case EstimatorKind::uipw_score: {
                    auto diag = select_lambda_score(ds_, plan_, paths_, cfg_.score_J, cfg_.score_eps);
                    rep.estimates.push_back(uipw(EstimatorKind::uipw_score, diag.selected_index));
                    rep.score = std::move(diag);
                    break;
                }
                }
            } catch (const Error& e) {
                rep.failures.push_back({k, e});
            }
        }
        return rep;
    }

private:
    struct MuFolds {
        std::vector<MuSequence> seq;                    // per fold
        std::vector<std::vector<Eigen::MatrixXd>> pred; // per fold, per stage, n x K
        std::vector<double> lambda;                     // per stage, HAL only
    };

    const LongitudinalDataset& ds_;
    const CrossValPlan& plan_;
    const EstimatorConfig& cfg_;
    int T_;
    int B_;
    RegimeCache rc_;
    std::vector<Indices> train_, val_;
    std::vector<LongitudinalDataset> train_ds_;
    std::vector<Eigen::MatrixXd> H_;

    PropensityPaths paths_;
    std::vector<Eigen::MatrixXd> p_base_;     // per fold, n x T
    std::vector<WorkingModel> m_base_;        // per fold
    std::vector<Eigen::MatrixXd> loss_base_;  // per fold
    std::optional<MuFolds> mu_base_;

    bool uses_hal_paths() const {
        return cfg_.prop.method == PropensityMethod::hal_cv || cfg_.prop.method == PropensityMethod::hal_fixed;
    }

    std::vector<std::size_t> base_indices() const {
        if (cfg_.prop.method == PropensityMethod::hal_fixed) return std::vector<std::size_t>(static_cast<std::size_t>(T_), 0);
        return paths_.cv_indices();
    }

    void base_propensity() {
        if (uses_hal_paths()) {
            const auto idx = base_indices();
            for (int b = 0; b < B_; ++b) p_base_.push_back(paths_.table(b, idx));
            return;
        }
        for (int b = 0; b < B_; ++b) {
            Eigen::MatrixXd p(static_cast<Eigen::Index>(ds_.n()), T_);
            for (int t = 1; t <= T_; ++t) {
                try {
                    const auto fit = fit_propensity(train_ds_[static_cast<std::size_t>(b)], t, cfg_.prop);
                    p.col(t - 1) = fit.treated_clipped(H_[static_cast<std::size_t>(t - 1)]);
                } catch (const Error& e) {
                    throw with_context(e, fold_name(b));
                }
            }
            p_base_.push_back(std::move(p));
        }
    }

    WorkingModel fit_model(int b, const Eigen::MatrixXd& p_all) const {
        MsmOptions o = cfg_.msm;
        o.seed = derive_seed(plan_.seed, {0x6d736dULL, static_cast<std::uint64_t>(b)});
        try {
            auto m = fit_msm(train_ds_[static_cast<std::size_t>(b)], o,
                             hal::select_rows(p_all, train_[static_cast<std::size_t>(b)]), cfg_.fam, cfg_.thetas);
            m.fold = b + 1;
            return m;
        } catch (const Error& e) {
            throw with_context(e, fold_name(b) + ", working model");
        }
    }

    // Sequential regressions on every training fold. With `fixed` the HAL
    // penalty per stage is given (warm-started from `warm`); otherwise it is
    // chosen by the pooled validation loss across folds.
    MuFolds fit_mu(const std::vector<WorkingModel>& models, const std::vector<double>* fixed,
                   const MuFolds* warm) const {
        const auto& mo = cfg_.mu;
        MuFolds out;
        out.seq.resize(static_cast<std::size_t>(B_));
        for (int b = 0; b < B_; ++b) {
            auto& s = out.seq[static_cast<std::size_t>(b)];
            s.thetas = cfg_.thetas;
            s.model = models[static_cast<std::size_t>(b)].as_function();
            s.stages.resize(static_cast<std::size_t>(T_));
        }
        out.lambda.assign(static_cast<std::size_t>(T_), std::numeric_limits<double>::quiet_NaN());
        for (int t = T_; t >= 1; --t) {
            const auto st = static_cast<std::size_t>(t - 1);
            if (mo.regressor == MuRegressor::zero) {
                for (auto& s : out.seq) s.stages[st] = MuStageFit{t, MuRegressor::zero, {}, {}};
                continue;
            }
            std::vector<PooledRows> va_rows;
            std::vector<Eigen::VectorXd> ytr, yva;
            std::vector<hal::HalBasis> basis;
            double lmax = 0.0;
            for (int b = 0; b < B_; ++b) {
                const auto bb = static_cast<std::size_t>(b);
                try {
                    check_compliers(rc_, cfg_.thetas, train_[bb], t);
                } catch (const Error& e) {
                    throw with_context(e, fold_name(b));
                }
                const auto& seq = out.seq[bb];
                const MuStageFit* next = t < T_ ? &seq.stages[st + 1] : nullptr;
                const PooledRows tr = mu_rows(rc_, cfg_.thetas, H_[st], train_[bb], t);
                ytr.push_back(mu_response(ds_, tr, t, seq.model, cfg_.thetas, next));
                if (mo.regressor == MuRegressor::linear) {
                    out.seq[bb].stages[st] = MuStageFit{
                        t, MuRegressor::linear, {},
                        weighted_least_squares(tr.X, ytr.back(), Eigen::VectorXd::Ones(ytr.back().size()))};
                    continue;
                }
                va_rows.push_back(mu_rows(rc_, cfg_.thetas, H_[st], val_[bb], t));
                yva.push_back(mu_response(ds_, va_rows.back(), t, seq.model, cfg_.thetas, next));
                basis.push_back(hal::build_basis(tr.X, mo.hal.basis));
                lmax = std::max(lmax, hal::lambda_max(basis.back(), ytr.back(), Eigen::VectorXd::Ones(ytr.back().size()),
                                                      hal::LossKind::squared));
            }
            if (mo.regressor == MuRegressor::linear) continue;

            if (fixed != nullptr || mo.lambda >= 0.0) {
                const double lam = fixed != nullptr ? (*fixed)[st] : mo.lambda;
                out.lambda[st] = lam;
                for (int b = 0; b < B_; ++b) {
                    const auto bb = static_cast<std::size_t>(b);
                    const hal::HalFit* w0 = warm != nullptr ? &warm->seq[bb].stages[st].hal : nullptr;
                    try {
                        out.seq[bb].stages[st] =
                            MuStageFit{t, MuRegressor::hal,
                                       hal::fit_single(basis[bb], ytr[bb], Eigen::VectorXd::Ones(ytr[bb].size()),
                                                       hal::LossKind::squared, lam, mo.hal.solver, w0),
                                       {}};
                    } catch (const Error& e) {
                        throw with_context(e, fold_name(b) + ", mu stage " + std::to_string(t));
                    }
                }
                continue;
            }

            const auto grid = mo.hal.make_grid(lmax);
            std::vector<double> cv(grid.size(), 0.0);
            std::vector<hal::HalPath> path;
            for (int b = 0; b < B_; ++b) {
                const auto bb = static_cast<std::size_t>(b);
                try {
                    path.push_back(hal::fit_path(basis[bb], ytr[bb], Eigen::VectorXd::Ones(ytr[bb].size()),
                                                 hal::LossKind::squared, grid, mo.hal.solver));
                } catch (const Error& e) {
                    throw with_context(e, fold_name(b) + ", mu stage " + std::to_string(t));
                }
                if (va_rows[bb].subject.empty()) continue;
                const Eigen::MatrixXd Xva = basis[bb].evaluate(va_rows[bb].X);
                for (std::size_t j = 0; j < grid.size(); ++j) {
                    const Eigen::VectorXd pred = path.back().fits[j].linear_predictor(Xva).cwiseMax(0.0);
                    cv[j] += 0.5 * (pred - yva[bb]).squaredNorm();
                }
            }
            const std::size_t idx = hal::argmin_first(cv);
            out.lambda[st] = grid[idx];
            for (int b = 0; b < B_; ++b)
                out.seq[static_cast<std::size_t>(b)].stages[st] =
                    MuStageFit{t, MuRegressor::hal, path[static_cast<std::size_t>(b)].fits[idx], {}};
        }
        out.pred.resize(static_cast<std::size_t>(B_));
        for (int b = 0; b < B_; ++b)
            out.pred[static_cast<std::size_t>(b)] = mu_predictions(ds_, out.seq[static_cast<std::size_t>(b)]);
        return out;
    }

    RiskEstimate assemble(EstimatorKind kind, const std::vector<std::vector<double>>& point_c,
                          const std::vector<std::vector<double>>& var_c) const {
        RiskEstimate e;
        e.kind = kind;
        e.n = ds_.n();
        e.B = B_;
        e.seed = plan_.seed;
        e.level = cfg_.level;
        double total = 0.0;
        for (const auto& c : point_c) {
            double s = 0.0;
            for (double v : c) s += v;
            e.per_fold.push_back(s / static_cast<double>(c.size()));
            total += e.per_fold.back();
        }
        e.point = total / static_cast<double>(B_);
        double ss = 0.0;
        for (const auto& c : var_c) {
            double mean = 0.0;
            for (double v : c) mean += v;
            mean /= static_cast<double>(c.size());
            for (double v : c) ss += (v - mean) * (v - mean);
        }
        e.if_variance = ss / static_cast<double>(ds_.n());
        const auto ci = confidence_interval(e.point, e.if_variance, ds_.n(), cfg_.level);
        e.ci_lo = ci.lo;
        e.ci_hi = ci.hi;
        return e;
    }

    std::vector<std::vector<double>> contributions(const std::vector<Eigen::MatrixXd>& p,
                                                   const std::vector<Eigen::MatrixXd>& loss, const MuFolds* mu) const {
        std::vector<std::vector<double>> out(static_cast<std::size_t>(B_));
        for (int b = 0; b < B_; ++b) {
            const auto bb = static_cast<std::size_t>(b);
            SubjectTerms st{&rc_, &cfg_.thetas.weights, &p[bb], &loss[bb], mu ? &mu->pred[bb] : nullptr};
            for (auto i : val_[bb]) {
                const auto ii = static_cast<Eigen::Index>(i);
                out[bb].push_back(mu ? st.eif(ii) : st.ipw(ii));
            }
        }
        return out;
    }

    std::vector<double> base_lambdas() const { return uses_hal_paths() ? paths_.lambdas(base_indices()) : std::vector<double>{}; }

    RiskEstimate ipw() const {
        const auto c = contributions(p_base_, loss_base_, nullptr);
        auto e = assemble(EstimatorKind::ipw, c, c);
        e.lambda = base_lambdas();
        e.models = m_base_;
        return e;
    }

    RiskEstimate mr() const {
        const auto c = contributions(p_base_, loss_base_, &*mu_base_);
        auto e = assemble(EstimatorKind::mr, c, c);
        e.lambda = base_lambdas();
        e.mu_lambda = mu_base_->lambda;
        e.models = m_base_;
        return e;
    }

    // IPW point with the undersmoothed propensities; EIF variance with mu
    // refit against the undersmoothed working model at the same penalties.
    RiskEstimate uipw(EstimatorKind kind, const std::vector<std::size_t>& idx) const {
        std::vector<Eigen::MatrixXd> p;
        std::vector<WorkingModel> models;
        std::vector<Eigen::MatrixXd> loss;
        for (int b = 0; b < B_; ++b) {
            p.push_back(paths_.table(b, idx));
            models.push_back(fit_model(b, p.back()));
            loss.push_back(loss_matrix(ds_, models.back().as_function(), cfg_.thetas));
        }
        const bool hal_mu = cfg_.mu.regressor == MuRegressor::hal;
        const MuFolds mu = fit_mu(models, hal_mu ? &mu_base_->lambda : nullptr, hal_mu ? &*mu_base_ : nullptr);
        const auto point_c = contributions(p, loss, nullptr);
        const auto var_c = contributions(p, loss, &mu);
        auto e = assemble(kind, point_c, var_c);
        e.lambda = paths_.lambdas(idx);
        e.mu_lambda = mu.lambda;
        e.models = std::move(models);
        return e;
    }
};

} // namespace detail

inline EstimationReport estimate_all(const LongitudinalDataset& ds, const CrossValPlan& plan, const EstimatorConfig& cfg,
                                     const std::vector<EstimatorKind>& kinds = all_estimators()) {
    require(!kinds.empty(), ErrorKind::invalid_argument, "no estimators requested");
    detail::Engine eng(ds, plan, cfg);
    return eng.run(kinds);
}

inline RiskEstimate ipw_risk(const LongitudinalDataset& ds, const CrossValPlan& plan, const EstimatorConfig& cfg) {
    return estimate_all(ds, plan, cfg, {EstimatorKind::ipw}).get(EstimatorKind::ipw);
}

inline RiskEstimate mr_risk(const LongitudinalDataset& ds, const CrossValPlan& plan, const EstimatorConfig& cfg) {
    return estimate_all(ds, plan, cfg, {EstimatorKind::mr}).get(EstimatorKind::mr);
}

enum class UndersmoothCriterion { dcar, score };

inline RiskEstimate uipw_risk(const LongitudinalDataset& ds, const CrossValPlan& plan, const EstimatorConfig& cfg,
                              UndersmoothCriterion criterion) {
    const auto k = criterion == UndersmoothCriterion::dcar ? EstimatorKind::uipw_dcar : EstimatorKind::uipw_score;
    return estimate_all(ds, plan, cfg, {k}).get(k);
}

} // namespace dynrisk
