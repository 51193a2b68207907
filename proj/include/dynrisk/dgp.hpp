#pragma once

// Two-covariate longitudinal simulator and its counterfactual oracle.
//
//   S_{1,1}, S_{2,1} ~ N(0, sd_baseline^2), independent
//   S_{1,t} = clip(0.9 (2 A_{t-1}) S_{1,t-1} + 0.05 S_{1,t-1} S_{2,t-1} + e1)
//   S_{2,t} = clip(0.9 (1 - 2 A_{t-1}) S_{1,t-1} + 0.05 S_{1,t-1} S_{2,t-1} + e2)
//   Y       = S_{1,T} - S_{2,T} + A_T S_{1,T} + e_y
//
// e1, e2 ~ N(0, sd_transition^2), e_y ~ N(0, sd_outcome^2), clip to
// [clip_lo, clip_hi]. Observational treatment: P(A_t = 1 | S_t) =
// expit(0.1 + 0.2 S_{1,t}); randomized: 1/2.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/core.hpp"
#include "dynrisk/hal/lasso.hpp"

namespace dynrisk {

enum class TreatmentMode { observational, randomized };

inline std::string to_string(TreatmentMode m) {
    return m == TreatmentMode::observational ? "observational" : "randomized";
}

inline TreatmentMode treatment_mode_from_string(const std::string& s) {
    if (s == "observational") return TreatmentMode::observational;
    if (s == "randomized") return TreatmentMode::randomized;
    fail(ErrorKind::invalid_argument, "unknown treatment mode '" + s + "'");
}

struct DgpConfig {
    std::size_t n = 1000;
    int T = 2;
    std::uint64_t seed = 1;
    TreatmentMode treatment_mode = TreatmentMode::observational;
    // The transition noise "N(0, 0.5)" is read as a standard deviation.
    double noise_sd_baseline = 0.5;
    double noise_sd_transition = 0.5;
    double noise_sd_outcome = 0.1;
    double clip_hi = 8.0;
    double clip_lo = -4.0;

    void validate() const {
        require(n >= 1, ErrorKind::invalid_argument, "dgp needs n >= 1");
        require(T >= 1, ErrorKind::invalid_argument, "dgp needs T >= 1");
        require(noise_sd_baseline > 0.0 && noise_sd_transition > 0.0 && noise_sd_outcome > 0.0,
                ErrorKind::invalid_argument, "dgp noise sds must be positive");
        require(clip_lo < clip_hi, ErrorKind::invalid_argument, "dgp needs clip_lo < clip_hi");
    }
};

// Regime family used by the simulation: d_t = I(S_{1,t} < theta).
inline RegimeFamily dgp_regime() { return RegimeFamily{RegimeKind::scalar_threshold_below, 0}; }

// Baseline selector for V: both stage-1 covariates.
inline Indices dgp_baseline_selector() { return {0, 1}; }

inline double observational_propensity(double s1) { return hal::expit(0.1 + 0.2 * s1); }

// Noise-free structural maps.
struct Covariates {
    double s1 = 0.0;
    double s2 = 0.0;
};

inline Covariates transition_mean(const Covariates& prev, int a_prev) {
    const double inter = 0.05 * prev.s1 * prev.s2;
    return {0.9 * (2.0 * a_prev) * prev.s1 + inter, 0.9 * (1.0 - 2.0 * a_prev) * prev.s1 + inter};
}

inline Covariates transition(const DgpConfig& cfg, const Covariates& prev, int a_prev, double e1, double e2) {
    const Covariates m = transition_mean(prev, a_prev);
    return {std::max(std::min(m.s1 + e1, cfg.clip_hi), cfg.clip_lo),
            std::max(std::min(m.s2 + e2, cfg.clip_hi), cfg.clip_lo)};
}

inline double outcome_mean(const Covariates& last, int a_last) { return last.s1 - last.s2 + a_last * last.s1; }

// Treatment choice at stage t given the current covariates. Policies may
// consume randomness from rng.
using Policy = std::function<int(int t, const Covariates& s, Rng& rng)>;

inline Policy observed_policy(const DgpConfig& cfg) {
    if (cfg.treatment_mode == TreatmentMode::randomized)
        return [](int, const Covariates&, Rng& rng) {
            return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < 0.5 ? 1 : 0;
        };
    return [](int, const Covariates& s, Rng& rng) {
        return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < observational_propensity(s.s1) ? 1 : 0;
    };
}

inline Policy regime_policy(const RegimeFamily& fam, const Theta& theta) {
    fam.check(2, theta);
    return [fam, theta](int, const Covariates& s, Rng&) {
        const Eigen::Vector2d row(s.s1, s.s2);
        return fam.prescribe(row, theta);
    };
}

inline Policy constant_policy(int a) {
    return [a](int, const Covariates&, Rng&) { return a; };
}

// Runs n subjects under `policy`. The draw order per subject is fixed:
// baseline pair, then per stage the policy, then transition pair, and
// finally the outcome noise.
inline LongitudinalDataset simulate_with_policy(const DgpConfig& cfg, std::size_t n, std::uint64_t seed,
                                                const Policy& policy) {
    cfg.validate();
    const auto N = static_cast<Eigen::Index>(n);
    std::vector<Eigen::MatrixXd> cov(static_cast<std::size_t>(cfg.T), Eigen::MatrixXd(N, 2));
    Eigen::MatrixXi a(N, cfg.T);
    Eigen::VectorXd y(N);
    Rng rng(seed);
    std::normal_distribution<double> z(0.0, 1.0);
    for (Eigen::Index i = 0; i < N; ++i) {
        Covariates s{cfg.noise_sd_baseline * z(rng), cfg.noise_sd_baseline * z(rng)};
        int at = 0;
        for (int t = 1; t <= cfg.T; ++t) {
            if (t > 1) {
                const double e1 = cfg.noise_sd_transition * z(rng);
                const double e2 = cfg.noise_sd_transition * z(rng);
                s = transition(cfg, s, at, e1, e2);
            }
            cov[static_cast<std::size_t>(t - 1)](i, 0) = s.s1;
            cov[static_cast<std::size_t>(t - 1)](i, 1) = s.s2;
            at = policy(t, s, rng);
            a(i, t - 1) = at;
        }
        y(i) = outcome_mean(s, at) + cfg.noise_sd_outcome * z(rng);
    }
    return LongitudinalDataset(std::move(cov), std::move(a), std::move(y), dgp_baseline_selector());
}

inline LongitudinalDataset simulate_observed(const DgpConfig& cfg) {
    return simulate_with_policy(cfg, cfg.n, cfg.seed, observed_policy(cfg));
}

// Outcomes with every A_t replaced by the regime prescription.
inline Eigen::VectorXd simulate_counterfactual(const DgpConfig& cfg, const RegimeFamily& fam, const Theta& theta,
                                               std::size_t n_mc, std::uint64_t seed) {
    return simulate_with_policy(cfg, n_mc, seed, regime_policy(fam, theta)).outcome();
}

// ---------------------------------------------------------------------------
// Oracle

struct OracleValue {
    double value = 0.0;
    double se = 0.0; // Monte-Carlo standard error
};

// Per-theta seed used by every oracle routine.
inline std::uint64_t oracle_seed(std::uint64_t seed, std::size_t k) { return derive_seed(seed, {0x6f7261636c65ULL, k}); }

// sum_k w_k mean_i (Y_i^{theta_k} - m(theta_k, V_i))^2 for several models at
// once, sharing the counterfactual draws across models.
inline std::vector<OracleValue> true_risk_oracle(const DgpConfig& cfg, const RegimeFamily& fam,
                                                 const std::vector<ModelFn>& models, const ThetaMeasure& thetas,
                                                 std::size_t n_mc, std::uint64_t seed) {
    thetas.validate();
    require(n_mc >= 2, ErrorKind::invalid_argument, "oracle needs n_mc >= 2");
    std::vector<OracleValue> out(models.size());
    std::vector<double> var(models.size(), 0.0);
    for (std::size_t k = 0; k < thetas.size(); ++k) {
        const auto ds = simulate_with_policy(cfg, n_mc, oracle_seed(seed, k), regime_policy(fam, thetas.points[k]));
        const double w = thetas.weights[k];
        for (std::size_t m = 0; m < models.size(); ++m) {
            double mean = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < n_mc; ++i) {
                const double r = ds.outcome()(static_cast<Eigen::Index>(i)) - models[m](thetas.points[k], ds.baseline(i));
                const double l = r * r;
                const double d = l - mean;
                mean += d / static_cast<double>(i + 1);
                m2 += d * (l - mean);
            }
            out[m].value += w * mean;
            var[m] += w * w * m2 / static_cast<double>(n_mc - 1) / static_cast<double>(n_mc);
        }
    }
    for (std::size_t m = 0; m < models.size(); ++m) out[m].se = std::sqrt(var[m]);
    return out;
}

inline OracleValue true_risk_oracle(const DgpConfig& cfg, const RegimeFamily& fam, const ModelFn& model,
                                    const ThetaMeasure& thetas, std::size_t n_mc, std::uint64_t seed) {
    return true_risk_oracle(cfg, fam, std::vector<ModelFn>{model}, thetas, n_mc, seed).front();
}

// Counterfactual moments per theta point. Risks of models that depend on
// theta alone follow exactly from these, so a study can simulate once and
// score every replicate's fits against the same draws.
struct OracleTable {
    ThetaMeasure thetas;
    std::size_t n_mc = 0;
    std::vector<double> mean;   // E_mc Y^theta
    std::vector<double> second; // E_mc (Y^theta)^2
    std::vector<double> m3, m4; // third and fourth raw moments, for the SE

    OracleValue risk(const std::function<double(const Theta&)>& m) const {
        OracleValue v;
        double var = 0.0;
        for (std::size_t k = 0; k < thetas.size(); ++k) {
            const double c = m(thetas.points[k]);
            // (Y - c)^2 moments from raw moments of Y.
            const double e2 = second[k] - 2.0 * c * mean[k] + c * c;
            const double e4 = m4[k] - 4.0 * c * m3[k] + 6.0 * c * c * second[k] - 4.0 * c * c * c * mean[k] +
                              c * c * c * c;
            v.value += thetas.weights[k] * e2;
            var += thetas.weights[k] * thetas.weights[k] * std::max(0.0, e4 - e2 * e2) / static_cast<double>(n_mc);
        }
        v.se = std::sqrt(var);
        return v;
    }
};

inline OracleTable oracle_table(const DgpConfig& cfg, const RegimeFamily& fam, const ThetaMeasure& thetas,
                                std::size_t n_mc, std::uint64_t seed) {
    thetas.validate();
    require(n_mc >= 2, ErrorKind::invalid_argument, "oracle needs n_mc >= 2");
    OracleTable tab;
    tab.thetas = thetas;
    tab.n_mc = n_mc;
    for (std::size_t k = 0; k < thetas.size(); ++k) {
        const Eigen::VectorXd y =
            simulate_with_policy(cfg, n_mc, oracle_seed(seed, k), regime_policy(fam, thetas.points[k])).outcome();
        const double nm = static_cast<double>(n_mc);
        tab.mean.push_back(y.mean());
        tab.second.push_back(y.array().square().sum() / nm);
        tab.m3.push_back(y.array().cube().sum() / nm);
        tab.m4.push_back(y.array().square().square().sum() / nm);
    }
    return tab;
}

} // namespace dynrisk
