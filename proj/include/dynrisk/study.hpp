#pragma once

// Replicate study: simulate, estimate, score against the replicate-specific
// truth, and summarize bias and coverage per (estimator, n).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "dynrisk/core.hpp"
#include "dynrisk/csv.hpp"
#include "dynrisk/dgp.hpp"
#include "dynrisk/risk.hpp"

namespace dynrisk {

struct StudyConfig {
    DgpConfig dgp{};
    std::vector<std::size_t> sample_sizes{250, 500, 850, 1000};
    std::size_t replicates = 360;
    std::vector<EstimatorKind> estimators = all_estimators();
    int B = 5;
    NormalSpec theta{0.0, 0.1};
    std::size_t theta_K = 10;
    std::uint64_t seed = 1;
    std::size_t oracle_n_mc = 200000;
    EstimatorConfig est{};

    StudyConfig() {
        est.fam = dgp_regime();
        est.prop.hal.basis.max_knots = 10;
        est.prop.hal.grid_ratio = 1e-2;
        est.mu.hal.basis.max_knots = 10;
        est.mu.hal.grid_ratio = 1e-2;
    }

    void validate() const {
        dgp.validate();
        require(replicates >= 1, ErrorKind::config, "replicates must be >= 1");
        require(!sample_sizes.empty(), ErrorKind::config, "sample_sizes must be nonempty");
        require(B >= 2, ErrorKind::config, "B must be >= 2");
        for (auto n : sample_sizes)
            require(n >= 2 * static_cast<std::size_t>(B), ErrorKind::config,
                    "sample size " + std::to_string(n) + " is below 2*B");
        require(!estimators.empty(), ErrorKind::config, "estimators must be nonempty");
        require(theta_K >= 1 && theta.sd > 0.0, ErrorKind::config, "theta measure needs K >= 1 and sd > 0");
        require(oracle_n_mc >= 2, ErrorKind::config, "oracle_n_mc must be >= 2");
        require(est.level > 0.0 && est.level < 1.0, ErrorKind::config, "level must lie in (0, 1)");
    }

    ThetaMeasure thetas() const { return theta_draws(theta, theta_K, derive_seed(seed, "theta-measure")); }

    // Estimator settings with the run's theta measure filled in.
    EstimatorConfig estimator_config() const {
        EstimatorConfig e = est;
        e.thetas = thetas();
        return e;
    }
};

inline nlohmann::json to_json(const HalSettings& h) {
    return {{"max_order", h.basis.max_order},
            {"max_knots", h.basis.max_knots},
            {"grid_size", h.grid_size},
            {"grid_ratio", h.grid_ratio},
            {"tol", h.solver.tol}};
}

inline nlohmann::json to_json(const StudyConfig& c) {
    nlohmann::json j;
    j["dgp"] = {{"T", c.dgp.T},
                {"treatment_mode", to_string(c.dgp.treatment_mode)},
                {"noise_sd_baseline", c.dgp.noise_sd_baseline},
                {"noise_sd_transition", c.dgp.noise_sd_transition},
                {"noise_sd_outcome", c.dgp.noise_sd_outcome},
                {"clip_lo", c.dgp.clip_lo},
                {"clip_hi", c.dgp.clip_hi}};
    j["sample_sizes"] = c.sample_sizes;
    j["replicates"] = c.replicates;
    j["estimators"] = nlohmann::json::array();
    for (auto k : c.estimators) j["estimators"].push_back(to_string(k));
    j["B"] = c.B;
    j["theta"] = {{"mean", c.theta.mean}, {"sd", c.theta.sd}, {"K", c.theta_K}};
    j["seed"] = c.seed;
    j["oracle_n_mc"] = c.oracle_n_mc;
    j["regime"] = {{"kind", to_string(c.est.fam.kind)}, {"index", c.est.fam.index}};
    j["msm"] = {{"family", to_string(c.est.msm.family)}, {"use_baseline", c.est.msm.use_baseline}};
    if (c.est.msm.family == MsmFamily::hal_theta) j["msm"]["hal"] = to_json(c.est.msm.hal);
    j["propensity"] = {{"method", to_string(c.est.prop.method)},
                       {"clip", c.est.prop.clip},
                       {"lambda", c.est.prop.lambda},
                       {"hal", to_json(c.est.prop.hal)}};
    j["mu"] = {{"regressor", to_string(c.est.mu.regressor)}, {"lambda", c.est.mu.lambda}, {"hal", to_json(c.est.mu.hal)}};
    j["level"] = c.est.level;
    j["score"] = {{"J", c.est.score_J}, {"eps", c.est.score_eps}};
    return j;
}

// 16 hex digits of FNV-1a over the canonical JSON echo.
inline std::string config_digest(const nlohmann::json& j) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(j.dump());
    return os.str();
}

inline std::string config_digest(const StudyConfig& c) { return config_digest(to_json(c)); }

// ---------------------------------------------------------------------------
// Replicates

inline std::uint64_t replicate_data_seed(std::uint64_t master, std::size_t n, std::size_t rep) {
    return derive_seed(master, {fnv1a("data"), n, rep});
}

inline std::uint64_t replicate_fold_seed(std::uint64_t master, std::size_t n, std::size_t rep) {
    return derive_seed(master, {fnv1a("folds"), n, rep});
}

struct ReplicateRow {
    std::size_t n = 0;
    std::size_t replicate = 0;
    EstimatorKind estimator = EstimatorKind::ipw;
    bool ok = false;
    double point = 0.0;
    double variance = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double truth = 0.0;
    double truth_se = 0.0;
    std::vector<double> lambda;
    std::string message;

    bool covered() const { return ok && ci_lo <= truth && truth <= ci_hi; }
};

// Truth of one estimate: the fold-average of the oracle risk of each fold's
// working model. Models of theta alone use the shared moment table.
inline OracleValue replicate_truth(const RiskEstimate& e, const StudyConfig& cfg, const ThetaMeasure& thetas,
                                   const OracleTable* table) {
    OracleValue out;
    double var = 0.0;
    const std::uint64_t oseed = derive_seed(cfg.seed, "oracle");
    for (const auto& m : e.models) {
        OracleValue v;
        if (table != nullptr && !m.depends_on_baseline())
            v = table->risk([&](const Theta& th) { return m.predict(th); });
        else
            v = true_risk_oracle(cfg.dgp, cfg.est.fam, m.as_function(), thetas, cfg.oracle_n_mc, oseed);
        out.value += v.value;
        var += v.se * v.se;
    }
    const auto B = static_cast<double>(e.models.size());
    out.value /= B;
    // Fold models share the oracle draws; report the root-mean-square SE.
    out.se = std::sqrt(var / B);
    return out;
}

inline std::vector<ReplicateRow> run_replicate(const StudyConfig& cfg, std::size_t n, std::size_t rep,
                                               const OracleTable* table = nullptr) {
    cfg.validate();
    DgpConfig d = cfg.dgp;
    d.n = n;
    d.seed = replicate_data_seed(cfg.seed, n, rep);
    const EstimatorConfig ec = cfg.estimator_config();
    std::vector<ReplicateRow> rows;
    for (auto k : cfg.estimators) {
        ReplicateRow r;
        r.n = n;
        r.replicate = rep;
        r.estimator = k;
        rows.push_back(r);
    }
    try {
        const auto ds = simulate_observed(d);
        const auto plan = make_folds(n, cfg.B, replicate_fold_seed(cfg.seed, n, rep));
        const auto report = estimate_all(ds, plan, ec, cfg.estimators);
        for (auto& r : rows) {
            try {
                const auto& e = report.get(r.estimator);
                const auto truth = replicate_truth(e, cfg, ec.thetas, table);
                r.ok = std::isfinite(e.point) && std::isfinite(e.if_variance);
                r.point = e.point;
                r.variance = e.if_variance;
                r.ci_lo = e.ci_lo;
                r.ci_hi = e.ci_hi;
                r.truth = truth.value;
                r.truth_se = truth.se;
                r.lambda = e.lambda;
                if (!r.ok) r.message = "non-finite estimate";
            } catch (const Error& e) {
                r.message = e.what();
            }
        }
    } catch (const Error& e) {
        for (auto& r : rows) r.message = e.what();
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Summaries

struct SummaryCell {
    EstimatorKind estimator = EstimatorKind::ipw;
    std::size_t n = 0;
    std::size_t successes = 0;
    std::size_t failures = 0;
    bool missing = true;
    double bias = 0.0;
    double scaled_bias = 0.0;
    double scaled_bias_se = 0.0;
    double coverage = 0.0;
    double coverage_se = 0.0;
    double mean_width = 0.0;
    double mean_truth = 0.0;
    double mean_point = 0.0;
};

inline double coverage_se(double p, std::size_t R) { return R == 0 ? 0.0 : std::sqrt(p * (1.0 - p) / static_cast<double>(R)); }

// One cell per (estimator, n) in configuration order.
inline std::vector<SummaryCell> summarize(const std::vector<ReplicateRow>& rows, const std::vector<EstimatorKind>& estimators,
                                          const std::vector<std::size_t>& sample_sizes) {
    std::vector<SummaryCell> out;
    for (auto k : estimators)
        for (auto n : sample_sizes) {
            SummaryCell c;
            c.estimator = k;
            c.n = n;
            std::vector<double> err;
            std::size_t hit = 0;
            for (const auto& r : rows) {
                if (r.estimator != k || r.n != n) continue;
                if (!r.ok) {
                    ++c.failures;
                    continue;
                }
                err.push_back(r.point - r.truth);
                hit += r.covered() ? 1 : 0;
                c.mean_width += r.ci_hi - r.ci_lo;
                c.mean_truth += r.truth;
                c.mean_point += r.point;
            }
            c.successes = err.size();
            if (c.successes > 0) {
                const auto R = static_cast<double>(c.successes);
                c.missing = false;
                double mean = 0.0;
                for (double e : err) mean += e;
                mean /= R;
                double ss = 0.0;
                for (double e : err) ss += (e - mean) * (e - mean);
                const double sd = c.successes > 1 ? std::sqrt(ss / (R - 1.0)) : 0.0;
                const double rn = std::sqrt(static_cast<double>(n));
                c.bias = mean;
                c.scaled_bias = rn * mean;
                c.scaled_bias_se = rn * sd / std::sqrt(R);
                c.coverage = static_cast<double>(hit) / R;
                c.coverage_se = coverage_se(c.coverage, c.successes);
                c.mean_width /= R;
                c.mean_truth /= R;
                c.mean_point /= R;
            }
            out.push_back(c);
        }
    return out;
}

inline const SummaryCell* find_cell(const std::vector<SummaryCell>& cells, EstimatorKind k, std::size_t n) {
    for (const auto& c : cells)
        if (c.estimator == k && c.n == n) return &c;
    return nullptr;
}

// ---------------------------------------------------------------------------
// CSV

inline const char* results_header() {
    return "n,replicate,estimator,status,point,if_variance,ci_lo,ci_hi,truth,truth_se,covered,lambda,message";
}

// Messages are the last field; commas and line breaks are replaced so the
// file stays one record per line without quoting.
inline std::string csv_message(std::string s) {
    for (char& c : s)
        if (c == ',') c = ';';
        else if (c == '\n' || c == '\r') c = ' ';
    return s;
}

inline void write_result_row(std::ostream& out, const ReplicateRow& r) {
    using detail::format_double;
    out << r.n << ',' << r.replicate << ',' << to_string(r.estimator) << ',' << (r.ok ? "ok" : "failed") << ',';
    if (r.ok) {
        out << format_double(r.point) << ',' << format_double(r.variance) << ',' << format_double(r.ci_lo) << ','
            << format_double(r.ci_hi) << ',' << format_double(r.truth) << ',' << format_double(r.truth_se) << ','
            << (r.covered() ? 1 : 0) << ',';
        for (std::size_t t = 0; t < r.lambda.size(); ++t) out << (t ? ";" : "") << format_double(r.lambda[t]);
    } else {
        out << ",,,,,,,";
    }
    out << ',' << csv_message(r.message) << '\n';
}

inline std::vector<ReplicateRow> read_results_csv(std::istream& in) {
    std::vector<ReplicateRow> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 || detail::trim(line).empty()) continue;
        const auto f = detail::split_csv_line(line);
        require(f.size() >= 12, ErrorKind::io, "results line " + std::to_string(lineno) + " has too few fields");
        ReplicateRow r;
        r.n = static_cast<std::size_t>(std::stoull(f[0]));
        r.replicate = static_cast<std::size_t>(std::stoull(f[1]));
        r.estimator = estimator_kind_from_string(f[2]);
        r.ok = f[3] == "ok";
        if (r.ok) {
            r.point = detail::parse_double(f[4], lineno);
            r.variance = detail::parse_double(f[5], lineno);
            r.ci_lo = detail::parse_double(f[6], lineno);
            r.ci_hi = detail::parse_double(f[7], lineno);
            r.truth = detail::parse_double(f[8], lineno);
            r.truth_se = detail::parse_double(f[9], lineno);
            std::stringstream ls(f[11]);
            std::string tok;
            while (std::getline(ls, tok, ';'))
                if (!tok.empty()) r.lambda.push_back(detail::parse_double(tok, lineno));
        }
        if (f.size() > 12) r.message = f[12];
        rows.push_back(std::move(r));
    }
    return rows;
}

inline void write_summary_csv(std::ostream& out, const std::vector<SummaryCell>& cells) {
    using detail::format_double;
    out << "estimator,n,successes,failures,status,bias,scaled_bias,scaled_bias_se,coverage,coverage_se,mean_ci_width,"
           "mean_truth,mean_point\n";
    for (const auto& c : cells) {
        out << to_string(c.estimator) << ',' << c.n << ',' << c.successes << ',' << c.failures << ','
            << (c.missing ? "missing" : "ok");
        if (c.missing) {
            out << ",,,,,,,,\n";
            continue;
        }
        out << ',' << format_double(c.bias) << ',' << format_double(c.scaled_bias) << ','
            << format_double(c.scaled_bias_se) << ',' << format_double(c.coverage) << ','
            << format_double(c.coverage_se) << ',' << format_double(c.mean_width) << ','
            << format_double(c.mean_truth) << ',' << format_double(c.mean_point) << '\n';
    }
}

// Long format for a two-panel plot: scaled bias and coverage against n,
// one line per estimator, with +-2 SE bands.
inline void write_figure_csv(std::ostream& out, const std::vector<SummaryCell>& cells) {
    using detail::format_double;
    out << "panel,estimator,n,value,lo,hi\n";
    for (const char* panel : {"scaled_bias", "coverage"})
        for (const auto& c : cells) {
            if (c.missing) continue;
            const bool bias = std::string(panel) == "scaled_bias";
            const double v = bias ? c.scaled_bias : c.coverage;
            const double se = bias ? c.scaled_bias_se : c.coverage_se;
            out << panel << ',' << to_string(c.estimator) << ',' << c.n << ',' << format_double(v) << ','
                << format_double(v - 2.0 * se) << ',' << format_double(v + 2.0 * se) << '\n';
        }
}

// ---------------------------------------------------------------------------
// Orchestration

struct StudyOptions {
    std::filesystem::path out_dir = "runs";
    int workers = 1;
    bool resume = false;
    std::function<void(const std::string&)> log; // progress lines, may be empty
};

struct StudyOutcome {
    std::filesystem::path run_dir;
    std::vector<ReplicateRow> rows;
    std::vector<SummaryCell> summary;
    std::size_t replicates_total = 0;
    std::size_t replicates_failed = 0; // replicates with at least one failed estimator
    std::size_t resumed = 0;
};

namespace detail {

inline std::string utc_stamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
    return buf;
}

// Most recent run directory for this digest, if any.
inline std::filesystem::path find_run_dir(const std::filesystem::path& out, const std::string& digest) {
    std::filesystem::path best;
    if (!std::filesystem::is_directory(out)) return best;
    for (const auto& e : std::filesystem::directory_iterator(out)) {
        const auto name = e.path().filename().string();
        if (e.is_directory() && name.size() > digest.size() && name.ends_with("-" + digest) &&
            (best.empty() || name > best.filename().string()))
            best = e.path();
    }
    return best;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write " + p.string());
    f << s;
    require(static_cast<bool>(f), ErrorKind::io, "write failed for " + p.string());
}

} // namespace detail

// Runs every (n, replicate) task, appending finished replicates to
// progress.csv so an interrupted run can resume, then writes results.csv,
// summary.csv and figure1.csv sorted by (n, replicate, estimator). With
// `resume`, the newest run directory carrying the same digest is reused and
// its completed replicates are kept.
inline StudyOutcome run_study(const StudyConfig& cfg, const StudyOptions& opt) {
    cfg.validate();
    namespace fs = std::filesystem;
    const auto echo = to_json(cfg);
    const auto digest = config_digest(echo);
    StudyOutcome out;
    if (opt.resume) out.run_dir = detail::find_run_dir(opt.out_dir, digest);
    if (out.run_dir.empty()) out.run_dir = opt.out_dir / (detail::utc_stamp() + "-" + digest);
    std::error_code ec;
    fs::create_directories(out.run_dir, ec);
    require(!ec, ErrorKind::io, "cannot create " + out.run_dir.string() + ": " + ec.message());
    nlohmann::json cj = echo;
    cj["digest"] = digest;
    detail::write_text(out.run_dir / "config.json", cj.dump(2) + "\n");

    // Completed replicates from an earlier attempt.
    const fs::path progress = out.run_dir / "progress.csv";
    std::map<std::pair<std::size_t, std::size_t>, std::vector<ReplicateRow>> done;
    const fs::path finished_file = out.run_dir / "results.csv";
    const fs::path prior = fs::exists(finished_file) ? finished_file : progress;
    if (opt.resume && fs::exists(prior)) {
        std::ifstream f(prior);
        for (auto& r : read_results_csv(f)) done[{r.n, r.replicate}].push_back(std::move(r));
        for (auto it = done.begin(); it != done.end();)
            it = it->second.size() == cfg.estimators.size() ? std::next(it) : done.erase(it);
    }
    out.resumed = done.size();
    {
        std::ofstream f(progress, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(f), ErrorKind::io, "cannot write " + progress.string());
        f << results_header() << '\n';
        for (const auto& [key, rows] : done)
            for (const auto& r : rows) write_result_row(f, r);
    }

    const auto thetas = cfg.thetas();
    std::optional<OracleTable> table;
    if (!(cfg.est.msm.family == MsmFamily::hal_theta && cfg.est.msm.use_baseline)) {
        if (opt.log) opt.log("oracle table: " + std::to_string(thetas.size()) + " theta points x " +
                             std::to_string(cfg.oracle_n_mc) + " draws");
        table = oracle_table(cfg.dgp, cfg.est.fam, thetas, cfg.oracle_n_mc, derive_seed(cfg.seed, "oracle"));
    }

    std::vector<std::pair<std::size_t, std::size_t>> tasks;
    for (auto n : cfg.sample_sizes)
        for (std::size_t r = 0; r < cfg.replicates; ++r)
            if (!done.count({n, r})) tasks.push_back({n, r});
    out.replicates_total = cfg.sample_sizes.size() * cfg.replicates;

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::size_t finished = 0;
    std::ofstream pf(progress, std::ios::binary | std::ios::app);
    require(static_cast<bool>(pf), ErrorKind::io, "cannot append to " + progress.string());
    const auto t0 = std::chrono::steady_clock::now();
    auto work = [&] {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            auto rows = run_replicate(cfg, tasks[i].first, tasks[i].second, table ? &*table : nullptr);
            std::lock_guard<std::mutex> lock(mu);
            for (const auto& r : rows) write_result_row(pf, r);
            pf.flush();
            done[tasks[i]] = std::move(rows);
            ++finished;
            if (opt.log) {
                const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                std::ostringstream os;
                os << "n=" << tasks[i].first << " replicate " << tasks[i].second << " done (" << finished << "/"
                   << tasks.size() << ", " << std::fixed << std::setprecision(0) << s << " s)";
                opt.log(os.str());
            }
        }
    };
    const int W = std::max(1, std::min<int>(opt.workers, static_cast<int>(std::max<std::size_t>(1, tasks.size()))));
    std::vector<std::thread> pool;
    for (int w = 1; w < W; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    pf.close();

    for (auto& [key, rows] : done) {
        bool failed = false;
        std::sort(rows.begin(), rows.end(), [&](const ReplicateRow& a, const ReplicateRow& b) {
            const auto pos = [&](EstimatorKind k) {
                return std::find(cfg.estimators.begin(), cfg.estimators.end(), k) - cfg.estimators.begin();
            };
            return pos(a.estimator) < pos(b.estimator);
        });
        for (const auto& r : rows) {
            failed = failed || !r.ok;
            out.rows.push_back(r);
        }
        out.replicates_failed += failed ? 1 : 0;
    }
    out.summary = summarize(out.rows, cfg.estimators, cfg.sample_sizes);

    std::ostringstream rs, ss, fs_;
    rs << results_header() << '\n';
    for (const auto& r : out.rows) write_result_row(rs, r);
    write_summary_csv(ss, out.summary);
    write_figure_csv(fs_, out.summary);
    detail::write_text(out.run_dir / "results.csv", rs.str());
    detail::write_text(out.run_dir / "summary.csv", ss.str());
    detail::write_text(out.run_dir / "figure1.csv", fs_.str());
    // Completion order depends on scheduling; only the sorted files remain.
    fs::remove(progress, ec);
    return out;
}

} // namespace dynrisk
