#pragma once

// Weighted L1-penalized empirical risk minimization by coordinate descent.
//
//   minimize  (1/W) sum_i w_i loss(y_i, b0 + x_i' beta) + lambda * ||beta||_1
//
// with W = sum_i w_i and an unpenalized intercept. Squared loss is
// loss = (y - eta)^2 / 2; Bernoulli loss is the negative log-likelihood with
// probabilities clipped to [clip, 1 - clip], solved by proximal Newton
// (IRLS outer loop around the same weighted least-squares coordinate descent).

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/error.hpp"

namespace dynrisk::hal {

enum class LossKind { squared, bernoulli };

inline std::string to_string(LossKind k) { return k == LossKind::squared ? "squared" : "bernoulli"; }

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "squared") return LossKind::squared;
    if (s == "bernoulli") return LossKind::bernoulli;
    fail(ErrorKind::invalid_argument, "unknown loss kind '" + s + "'");
}

struct SolverOptions {
    double tol = 1e-10;      // max coordinate move, in linear-predictor units
    long max_sweeps = 1000;  // coordinate sweeps per weighted subproblem
    // After max_sweeps a squared-loss subproblem whose last sweep moved less
    // than this is accepted. Bernoulli subproblems are always accepted then:
    // near-separated fits at small lambda make the working weights so
    // uneven that coordinate descent crawls, and the outer line search
    // still keeps the objective decreasing. loose() reports either case.
    double loose_tol = 1e-6;
    int max_outer = 100;     // IRLS iterations per lambda
    double prob_clip = 1e-6;
    // Floor on p(1 - p) in the IRLS working weights. Keeps the weighted
    // subproblem conditioned when fitted probabilities approach 0 or 1.
    double min_working_weight = 1e-4;
    // IRLS stops once the KKT violation of the penalized likelihood is
    // below this.
    double kkt_tol = 1e-7;
    // IRLS also stops once an outer step improves the penalized objective
    // by less than this relative amount.
    double objective_tol = 1e-13;
    // Sweeps without convergence before trying an exact support solve.
    long polish_after = 20;
};

inline double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

class CoordinateDescent {
public:
    CoordinateDescent(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w, LossKind loss,
                      SolverOptions opt = {})
        : X_(X), y_(y), w_(w), loss_(loss), opt_(opt), n_(X.rows()), p_(X.cols()) {
        require(y.size() == n_ && w.size() == n_, ErrorKind::dimension_mismatch, "design, response and weights differ in length");
        require(w.allFinite() && (w.array() >= 0.0).all(), ErrorKind::invalid_argument, "weights must be finite and nonnegative");
        require(y.allFinite(), ErrorKind::non_finite, "response must be finite");
        W_ = w.sum();
        require(W_ > 0.0, ErrorKind::invalid_argument, "weights sum to zero");
        beta_ = Eigen::VectorXd::Zero(p_);
        is_active_.assign(static_cast<std::size_t>(p_), 0);
        mark_duplicates();
        logit_cap_ = std::log((1.0 - opt_.prob_clip) / opt_.prob_clip);
        b0_ = null_intercept();
        eta_ = Eigen::VectorXd::Constant(n_, b0_);
    }

    // The design is referenced, not copied, so it must outlive the solver.
    CoordinateDescent(Eigen::MatrixXd&&, const Eigen::VectorXd&, const Eigen::VectorXd&, LossKind,
                      SolverOptions = {}) = delete;

    // Warm start from given coefficients.
    void set_state(double b0, const Eigen::VectorXd& beta) {
        require(beta.size() == p_, ErrorKind::dimension_mismatch, "warm start has wrong length");
        b0_ = b0;
        beta_ = beta;
        eta_ = X_ * beta_;
        eta_.array() += b0_;
        for (Eigen::Index j = 0; j < p_; ++j)
            if (beta_(j) != 0.0) activate(j);
    }

    double lambda_max() const {
        const double c = null_intercept();
        const double mu = loss_ == LossKind::squared ? c : clip(expit(c));
        const Eigen::VectorXd g = X_.transpose() * (w_.array() * (y_.array() - mu)).matrix() / W_;
        return p_ == 0 ? 0.0 : g.cwiseAbs().maxCoeff();
    }

    void solve(double lambda) {
        require(lambda >= 0.0 && std::isfinite(lambda), ErrorKind::invalid_argument, "lambda must be finite and >= 0");
        lambda_ = lambda;
        sweeps_ = 0;
        if (loss_ == LossKind::squared) {
            ww_ = w_;
            r_ = y_ - eta_;
            v_.assign(static_cast<std::size_t>(p_), -1.0);
            weighted_lasso();
            eta_ = y_ - r_;
            return;
        }
        double f_old = objective(eta_);
        int stalls = 0;
        for (int outer = 0; outer < opt_.max_outer; ++outer) {
            const Eigen::VectorXd beta_old = beta_;
            const Eigen::VectorXd eta_old = eta_;
            const double b0_old = b0_;
            Eigen::VectorXd z(n_);
            ww_.resize(n_);
            r_.resize(n_);
            for (Eigen::Index i = 0; i < n_; ++i) {
                const double p = clip(expit(eta_(i)));
                const double h = std::max(p * (1.0 - p), opt_.min_working_weight);
                ww_(i) = w_(i) * h;
                r_(i) = (y_(i) - p) / h;
                z(i) = eta_(i) + r_(i);
            }
            v_.assign(static_cast<std::size_t>(p_), -1.0);
            const bool stalled = !weighted_lasso();
            eta_ = z - r_;
            // Backtrack along the Newton direction until the penalized
            // objective does not increase.
            double f_new = objective(eta_);
            double step = 1.0;
            for (int k = 0; k < 40 && f_new > f_old + 1e-15 * std::abs(f_old); ++k) {
                step *= 0.5;
                beta_ = beta_old + step * (beta_ - beta_old);
                b0_ = b0_old + step * (b0_ - b0_old);
                eta_ = eta_old + step * (eta_ - eta_old);
                f_new = objective(eta_);
            }
            double change = std::abs(b0_ - b0_old);
            for (auto j : active_) change = std::max(change, std::sqrt(vj(j)) * std::abs(beta_(j) - beta_old(j)));
            const bool flat = std::abs(f_old - f_new) <= opt_.objective_tol * std::max(1.0, std::abs(f_new));
            f_old = f_new;
            if (change < opt_.tol || (flat && outer > 0) || kkt(eta_) < opt_.kkt_tol) return;
            // Subproblems that exhaust their sweep budget signal a support
            // with linearly dependent columns; a few more outer steps are
            // all that is worth spending.
            if (stalled && ++stalls >= 3) break;
        }
        // Out of iterations on a near-separated fit: keep the last iterate,
        // which the line search guarantees is no worse than the start.
        loose_ = true;
    }

    double intercept() const noexcept { return b0_; }
    const Eigen::VectorXd& beta() const noexcept { return beta_; }
    const Eigen::VectorXd& eta() const noexcept { return eta_; }
    bool saturated() const noexcept { return saturated_; }
    bool loose() const noexcept { return loose_; }
    long sweeps() const noexcept { return sweeps_; }

    double clip(double p) const { return std::clamp(p, opt_.prob_clip, 1.0 - opt_.prob_clip); }

private:
    double null_intercept() const {
        const double ybar = w_.dot(y_) / W_;
        if (loss_ == LossKind::squared) return ybar;
        const double p = clip(ybar);
        return std::log(p / (1.0 - p));
    }

    // Largest violation of the stationarity conditions at eta, over the
    // intercept and every unpenalized-duplicate-free column.
    double kkt(const Eigen::VectorXd& eta) const {
        Eigen::VectorXd res(n_);
        for (Eigen::Index i = 0; i < n_; ++i) res(i) = w_(i) * (y_(i) - clip(expit(eta(i)))) / W_;
        double worst = saturated_ ? 0.0 : std::abs(res.sum());
        const Eigen::VectorXd g = X_.transpose() * res;
        for (Eigen::Index j = 0; j < p_; ++j) {
            if (is_active_[static_cast<std::size_t>(j)] == 2) continue;
            const double v = beta_(j) != 0.0 ? std::abs(g(j) - std::copysign(lambda_, beta_(j)))
                                             : std::max(0.0, std::abs(g(j)) - lambda_);
            worst = std::max(worst, v);
        }
        return worst;
    }

    double objective(const Eigen::VectorXd& eta) const {
        double f = 0.0;
        for (Eigen::Index i = 0; i < n_; ++i) {
            const double p = clip(expit(eta(i)));
            f -= w_(i) * (y_(i) * std::log(p) + (1.0 - y_(i)) * std::log(1.0 - p));
        }
        double pen = 0.0;
        for (auto j : active_) pen += std::abs(beta_(j));
        return f / W_ + lambda_ * pen;
    }

    // Columns identical to an earlier column stay at zero: putting all the
    // mass on one copy is an optimal split, and it keeps support systems
    // nonsingular.
    void mark_duplicates() {
        std::unordered_map<std::size_t, std::vector<Eigen::Index>> buckets;
        for (Eigen::Index j = 0; j < p_; ++j) {
            std::size_t h = 0;
            const double* c = X_.col(j).data();
            for (Eigen::Index i = 0; i < n_; ++i) h = h * 1099511628211ULL ^ std::hash<double>{}(c[i]);
            auto& bucket = buckets[h];
            bool dup = false;
            for (auto k : bucket)
                if (X_.col(k) == X_.col(j)) {
                    dup = true;
                    break;
                }
            if (dup)
                is_active_[static_cast<std::size_t>(j)] = 2;
            else
                bucket.push_back(j);
        }
    }

    void activate(Eigen::Index j) {
        if (!is_active_[static_cast<std::size_t>(j)]) {
            is_active_[static_cast<std::size_t>(j)] = 1;
            active_.push_back(j);
        }
    }

    double vj(Eigen::Index j) {
        double& v = v_[static_cast<std::size_t>(j)];
        if (v < 0.0) v = X_.col(j).cwiseAbs2().dot(ww_) / W_;
        return v;
    }

    double update_intercept() {
        const double sw = ww_.sum();
        if (sw <= 0.0) return 0.0;
        double delta = ww_.dot(r_) / sw;
        if (loss_ == LossKind::bernoulli) {
            const double target = std::clamp(b0_ + delta, -logit_cap_, logit_cap_);
            if (target != b0_ + delta) saturated_ = true;
            delta = target - b0_;
        }
        b0_ += delta;
        r_.array() -= delta;
        return std::sqrt(sw / W_) * std::abs(delta);
    }

    double update_coordinate(Eigen::Index j) {
        const double v = vj(j);
        if (v <= 0.0) return 0.0;
        const double g = X_.col(j).cwiseProduct(ww_).dot(r_) / W_;
        const double z = g + v * beta_(j);
        const double mag = std::abs(z) - lambda_;
        const double next = mag > 0.0 ? std::copysign(mag, z) / v : 0.0;
        const double diff = next - beta_(j);
        if (diff == 0.0) return 0.0;
        r_.noalias() -= diff * X_.col(j);
        beta_(j) = next;
        return std::sqrt(v) * std::abs(diff);
    }

    // Weighted least-squares part plus penalty over S at cur + t (sol - cur),
    // where the residual moves as r - t dr.
    double segment_objective(double t, const Eigen::VectorXd& dr, const std::vector<Eigen::Index>& S,
                             const Eigen::VectorXd& cur, const Eigen::VectorXd& sol) const {
        const double f = 0.5 * (ww_.array() * (r_ - t * dr).array().square()).sum() / W_;
        double pen = 0.0;
        for (std::size_t c = 0; c < S.size(); ++c) {
            const auto e = static_cast<Eigen::Index>(c + 1);
            pen += std::abs(cur(e) + t * (sol(e) - cur(e)));
        }
        return f + lambda_ * pen;
    }

    // Moves the support coefficients along -dir, a direction that leaves the
    // fit unchanged, until the first coordinate reaches zero.
    bool null_step(const std::vector<Eigen::Index>& S, const Eigen::VectorXd& cur, const Eigen::VectorXd& dir) {
        double t = std::numeric_limits<double>::infinity();
        Eigen::Index hit = -1;
        for (Eigen::Index c = 1; c < cur.size(); ++c) {
            if (cur(c) == 0.0 || dir(c) == 0.0 || std::signbit(dir(c)) != std::signbit(cur(c))) continue;
            if (cur(c) / dir(c) < t) {
                t = cur(c) / dir(c);
                hit = c;
            }
        }
        if (hit < 0) return false;
        const Eigen::VectorXd next = cur - t * dir;
        Eigen::VectorXd dr = -t * dir(0) * Eigen::VectorXd::Ones(n_);
        for (Eigen::Index c = 1; c < cur.size(); ++c) dr -= t * dir(c) * X_.col(S[static_cast<std::size_t>(c - 1)]);
        const Eigen::VectorXd sol = cur - dir;
        if (!(segment_objective(t, dr / t, S, cur, sol) <= segment_objective(0.0, dr, S, cur, sol))) return false;
        r_ -= dr;
        b0_ = next(0);
        for (Eigen::Index c = 1; c < cur.size(); ++c) {
            const auto j = S[static_cast<std::size_t>(c - 1)];
            beta_(j) = c == hit ? 0.0 : next(c);
        }
        r_.noalias() += next(hit) * X_.col(S[static_cast<std::size_t>(hit - 1)]);
        return true;
    }

    // Feature-sign search on the active set: solve the subproblem with the
    // signs of the nonzero coordinates held fixed, line-search over the
    // points where a coordinate crosses zero, and bring in the worst
    // violating zero coordinate once the nonzero ones are stationary.
    // Returns true at an exact optimum of the subproblem restricted to the
    // active set, false if a support system cannot be solved.
    bool feature_sign() {
        if (ww_.sum() <= 0.0) return false;
        const double target = 0.01 * opt_.kkt_tol;
        const int max_iter = 4 * static_cast<int>(active_.size()) + 50;
        for (int iter = 0; iter < max_iter; ++iter) {
            const Eigen::VectorXd wr = ww_.cwiseProduct(r_) / W_;
            const bool capped = loss_ == LossKind::bernoulli && saturated_;
            double worst = capped ? 0.0 : std::abs(wr.sum());
            Eigen::Index entering = -1;
            double enter_gap = target;
            std::vector<Eigen::Index> S;
            for (auto j : active_) {
                const double g = X_.col(j).dot(wr);
                if (beta_(j) != 0.0) {
                    S.push_back(j);
                    worst = std::max(worst, std::abs(g - std::copysign(lambda_, beta_(j))));
                } else if (std::abs(g) - lambda_ > enter_gap) {
                    enter_gap = std::abs(g) - lambda_;
                    entering = j;
                }
            }
            if (worst <= target && entering < 0) return true;
            std::vector<double> sign(S.size());
            for (std::size_t c = 0; c < S.size(); ++c) sign[c] = beta_(S[c]) > 0.0 ? 1.0 : -1.0;
            if (worst <= target) {
                S.push_back(entering);
                sign.push_back(X_.col(entering).dot(wr) > 0.0 ? 1.0 : -1.0);
            }
            const auto k = static_cast<Eigen::Index>(S.size());
            Eigen::MatrixXd Z(n_, k + 1);
            Z.col(0).setOnes();
            for (Eigen::Index c = 0; c < k; ++c) Z.col(c + 1) = X_.col(S[static_cast<std::size_t>(c)]);
            const Eigen::MatrixXd ZW = Z.transpose() * ww_.asDiagonal();
            const Eigen::MatrixXd M = ZW * Z / W_;
            Eigen::VectorXd cur(k + 1);
            cur(0) = b0_;
            for (Eigen::Index c = 0; c < k; ++c) cur(c + 1) = beta_(S[static_cast<std::size_t>(c)]);
            // Current fit is z - r; the unpenalized target is z itself.
            Eigen::VectorXd rhs = ZW * (r_ + Z * cur) / W_;
            for (Eigen::Index c = 0; c < k; ++c) rhs(c + 1) -= lambda_ * sign[static_cast<std::size_t>(c)];
            Eigen::VectorXd sol;
            const Eigen::LDLT<Eigen::MatrixXd> ldlt(M);
            if (ldlt.info() == Eigen::Success) sol = ldlt.solve(rhs);
            const double tol_res = 1e-9 * std::max(1.0, rhs.norm());
            if (sol.size() == 0 || !sol.allFinite() || (M * sol - rhs).norm() > tol_res) {
                // Singular support (more active columns than distinct rows).
                // If the sign vector has a component in the null space, moving
                // against it leaves the fit alone and lowers the penalty until
                // a coordinate reaches zero.
                const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
                const Eigen::VectorXd& ev = es.eigenvalues();
                const double cut = 1e-10 * std::max(ev.cwiseAbs().maxCoeff(), 1e-300);
                Eigen::VectorXd theta = Eigen::VectorXd::Zero(k + 1);
                for (Eigen::Index c = 0; c < k; ++c) theta(c + 1) = sign[static_cast<std::size_t>(c)];
                Eigen::VectorXd null_part = Eigen::VectorXd::Zero(k + 1);
                sol = Eigen::VectorXd::Zero(k + 1);
                for (Eigen::Index e = 0; e < k + 1; ++e) {
                    const auto& v = es.eigenvectors().col(e);
                    if (ev(e) > cut)
                        sol += v * (v.dot(rhs) / ev(e));
                    else
                        null_part += v * v.dot(theta);
                }
                if (null_part.squaredNorm() > 1e-20) {
                    if (!null_step(S, cur, null_part)) return false;
                    continue;
                }
            }
            if (!sol.allFinite() || (M * sol - rhs).norm() > tol_res) return false;
            if (loss_ == LossKind::bernoulli && std::abs(sol(0)) > logit_cap_) return false;

            const Eigen::VectorXd dr = Z * (sol - cur);
            const double f0 = segment_objective(0.0, dr, S, cur, sol);
            double best_t = 1.0;
            double best_f = segment_objective(1.0, dr, S, cur, sol);
            for (Eigen::Index c = 1; c <= k; ++c) {
                if (cur(c) == 0.0 || (sol(c) != 0.0 && std::signbit(sol(c)) == std::signbit(cur(c)))) continue;
                const double tc = cur(c) / (cur(c) - sol(c));
                const double fc = segment_objective(tc, dr, S, cur, sol);
                if (fc < best_f) {
                    best_f = fc;
                    best_t = tc;
                }
            }
            if (!(best_f < f0)) return false;
            const Eigen::VectorXd next = cur + best_t * (sol - cur);
            r_.noalias() -= best_t * dr;
            b0_ = next(0);
            for (Eigen::Index c = 0; c < k; ++c) {
                const auto j = S[static_cast<std::size_t>(c)];
                double v = next(c + 1);
                // A coordinate that crosses at the chosen step lands on zero;
                // fold its rounding remainder back into the residual.
                if (cur(c + 1) != 0.0 && best_t < 1.0 && cur(c + 1) / (cur(c + 1) - sol(c + 1)) == best_t) {
                    r_.noalias() += v * X_.col(j);
                    v = 0.0;
                }
                beta_(j) = v;
                if (v != 0.0) activate(j);
            }
        }
        return false;
    }

    // Stationarity violation of the weighted subproblem over the intercept
    // and the active coordinates.
    double support_kkt() const {
        const Eigen::VectorXd wr = ww_.cwiseProduct(r_) / W_;
        double worst = loss_ == LossKind::bernoulli && saturated_ ? 0.0 : std::abs(wr.sum());
        for (auto j : active_) {
            const double g = X_.col(j).dot(wr);
            const double v = beta_(j) != 0.0 ? std::abs(g - std::copysign(lambda_, beta_(j)))
                                             : std::max(0.0, std::abs(g) - lambda_);
            worst = std::max(worst, v);
        }
        return worst;
    }

    // Active-set coordinate descent on the weighted least-squares problem
    // with working weights ww_ and residual r_. Converged when the active
    // coordinates are stationary (a sweep moves nothing by more than tol, or
    // an exact support solve succeeds) and no zero coordinate violates its
    // KKT condition.
    // Returns false when the sweep budget ran out.
    bool weighted_lasso() {
        bool ok = true;
        long since_polish = 0;
        const long start = sweeps_;
        while (true) {
            bool exact = false;
            while (true) {
                double d = update_intercept();
                for (auto j : active_) d = std::max(d, update_coordinate(j));
                if (++sweeps_ - start > opt_.max_sweeps && (loss_ == LossKind::bernoulli || d < opt_.loose_tol)) {
                    loose_ = true;
                    ok = false;
                    break;
                }
                if (sweeps_ - start > opt_.max_sweeps)
                    fail(ErrorKind::convergence, "HAL solver: no convergence at lambda=" + std::to_string(lambda_) +
                                                     " (last move " + std::to_string(d) + ", active " +
                                                     std::to_string(active_.size()) + ")");
                if (d < opt_.tol) break;
                if (++since_polish >= std::max<long>(opt_.polish_after, static_cast<long>(active_.size()) / 4)) {
                    since_polish = 0;
                    if (feature_sign()) {
                        exact = true;
                        break;
                    }
                    // Stationary enough on the support even if coordinates
                    // still drift along a flat direction.
                    if (support_kkt() < 0.1 * opt_.kkt_tol) break;
                }
            }
            // A polished solution must still survive one sweep without moving.
            if (exact) {
                double d = 0.0;
                for (auto j : active_) d = std::max(d, update_coordinate(j));
                d = std::max(d, update_intercept());
                if (d >= opt_.tol) continue;
            }
            const Eigen::VectorXd g = X_.transpose() * ww_.cwiseProduct(r_) / W_;
            bool added = false;
            for (Eigen::Index j = 0; j < p_; ++j) {
                if (is_active_[static_cast<std::size_t>(j)]) continue;
                if (std::abs(g(j)) > lambda_) {
                    activate(j);
                    added = true;
                }
            }
            if (!added) return ok;
        }
    }

    const Eigen::MatrixXd& X_; // not owned; see the deleted constructor
    Eigen::VectorXd y_;
    Eigen::VectorXd w_;
    LossKind loss_;
    SolverOptions opt_;
    Eigen::Index n_, p_;
    double W_ = 0.0;
    double b0_ = 0.0;
    double lambda_ = 0.0;
    double logit_cap_ = 0.0;
    bool saturated_ = false;
    bool loose_ = false;
    long sweeps_ = 0;
    Eigen::VectorXd beta_, eta_, ww_, r_;
    std::vector<double> v_;
    std::vector<char> is_active_;
    std::vector<Eigen::Index> active_;
};

// Largest KKT violation of a candidate solution (0 at an exact optimum).
// Active coordinates need gradient == lambda * sign(beta); inactive ones need
// |gradient| <= lambda. The intercept needs a zero gradient unless the
// Bernoulli intercept sits at its saturation cap.
inline double kkt_violation(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w, LossKind loss,
                            double b0, const Eigen::VectorXd& beta, double lambda, double prob_clip = 1e-6,
                            bool saturated = false) {
    const double W = w.sum();
    Eigen::VectorXd eta = X * beta;
    eta.array() += b0;
    Eigen::VectorXd resid(y.size());
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        const double mu =
            loss == LossKind::squared ? eta(i) : std::clamp(expit(eta(i)), prob_clip, 1.0 - prob_clip);
        resid(i) = w(i) * (y(i) - mu) / W;
    }
    double worst = saturated ? 0.0 : std::abs(resid.sum());
    const Eigen::VectorXd g = X.transpose() * resid;
    for (Eigen::Index j = 0; j < beta.size(); ++j) {
        const double v = beta(j) != 0.0 ? std::abs(g(j) - std::copysign(lambda, beta(j)))
                                         : std::max(0.0, std::abs(g(j)) - lambda);
        worst = std::max(worst, v);
    }
    return worst;
}

} // namespace dynrisk::hal
