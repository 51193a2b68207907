// dynrisk: simulate, estimate, study and oracle subcommands.
//
// Exit codes: 0 success, 1 I/O error, 2 configuration error, 3 partial
// failure (an estimator failed, or more than 10% of study replicates did).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynrisk/config.hpp"
#include "dynrisk/csv.hpp"
#include "dynrisk/dgp.hpp"
#include "dynrisk/risk.hpp"
#include "dynrisk/study.hpp"

namespace fs = std::filesystem;
using namespace dynrisk;

namespace {

enum Exit { ok = 0, io_error = 1, config_error = 2, partial = 3 };

struct Common {
    std::string config;
    std::string out = ".";
    std::optional<std::uint64_t> seed;
    std::string estimators;
    bool verbose = false;
};

RunConfig resolve(const Common& c) {
    RunConfig rc = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) rc.study.seed = *c.seed;
    if (!c.estimators.empty()) apply_config_value(rc, "estimators", c.estimators);
    return rc;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    require(!ec, ErrorKind::io, "cannot create " + p.string() + ": " + ec.message());
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream f(p, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write " + p.string());
    f << j.dump(2) << '\n';
}

int cmd_simulate(const Common& c) {
    const auto rc = resolve(c);
    DgpConfig d = rc.study.dgp;
    d.seed = rc.study.seed;
    d.validate();
    const auto ds = simulate_observed(d);
    const fs::path out(c.out);
    ensure_dir(out);
    write_dataset_csv((out / "data.csv").string(), ds);
    nlohmann::json m = to_json(rc.study)["dgp"];
    m["n"] = d.n;
    m["seed"] = d.seed;
    m["treated_share_stage1"] = ds.treatments().col(0).cast<double>().mean();
    write_json(out / "manifest.json", m);
    if (c.verbose) std::cerr << "wrote " << (out / "data.csv").string() << " (" << d.n << " subjects)\n";
    return ok;
}

int cmd_estimate(const Common& c, const std::string& data) {
    const auto rc = resolve(c);
    rc.study.validate();
    const auto ds = read_dataset_csv(data, rc.baseline);
    require(ds.n() >= 2 * static_cast<std::size_t>(rc.study.B), ErrorKind::invalid_argument,
            "dataset has fewer than 2*folds subjects");
    const EstimatorConfig ec = rc.study.estimator_config();
    const auto plan = make_folds(ds.n(), rc.study.B, derive_seed(rc.study.seed, "folds"));
    const auto report = estimate_all(ds, plan, ec, rc.study.estimators);
    const auto digest = config_digest(rc.study);
    const fs::path out(c.out);
    ensure_dir(out);
    for (auto e : report.estimates) {
        e.config_digest = digest;
        write_json(out / (to_string(e.kind) + ".json"), to_json(e));
        if (c.verbose)
            std::cerr << to_string(e.kind) << ": " << e.point << " [" << e.ci_lo << ", " << e.ci_hi << "]\n";
    }
    if (report.dcar) write_json(out / "dcar.json", to_json(*report.dcar));
    if (report.score) write_json(out / "score.json", to_json(*report.score));
    for (const auto& f : report.failures) std::cerr << "error: " << to_string(f.kind) << ": " << f.error.what() << '\n';
    return report.failures.empty() ? ok : partial;
}

int cmd_study(const Common& c, int workers, bool resume) {
    const auto rc = resolve(c);
    StudyOptions so;
    so.out_dir = c.out;
    so.workers = workers;
    so.resume = resume;
    if (c.verbose) so.log = [](const std::string& s) { std::cerr << s << '\n'; };
    const auto res = run_study(rc.study, so);
    std::cout << res.run_dir.string() << '\n';
    if (c.verbose) write_summary_csv(std::cerr, res.summary);
    if (res.replicates_failed > 0)
        std::cerr << res.replicates_failed << " of " << res.replicates_total << " replicates had failures\n";
    return 10 * res.replicates_failed <= res.replicates_total ? ok : partial;
}

int cmd_oracle(const Common& c) {
    const auto rc = resolve(c);
    rc.study.validate();
    const auto thetas = rc.study.thetas();
    const auto tab = oracle_table(rc.study.dgp, rc.study.est.fam, thetas, rc.study.oracle_n_mc,
                                  derive_seed(rc.study.seed, "oracle"));
    const fs::path out(c.out);
    ensure_dir(out);
    std::ofstream f(out / "oracle.csv", std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::io, "cannot write oracle.csv");
    f << "theta,weight,mean_y,var_y\n";
    for (std::size_t k = 0; k < thetas.size(); ++k)
        f << detail::format_double(thetas.points[k][0]) << ',' << detail::format_double(thetas.weights[k]) << ','
          << detail::format_double(tab.mean[k]) << ','
          << detail::format_double(tab.second[k] - tab.mean[k] * tab.mean[k]) << '\n';
    nlohmann::json j;
    j["n_mc"] = tab.n_mc;
    // Risk of the best theta-only constant and, when given, of a fitted line.
    double mbar = 0.0;
    for (std::size_t k = 0; k < thetas.size(); ++k) mbar += thetas.weights[k] * tab.mean[k];
    const auto rc0 = tab.risk([&](const Theta&) { return mbar; });
    j["constant_model"] = {{"value", mbar}, {"risk", rc0.value}, {"se", rc0.se}};
    if (!rc.oracle_beta.empty()) {
        const auto& b = rc.oracle_beta;
        const auto r = tab.risk([&](const Theta& th) {
            double v = b[0];
            for (std::size_t j2 = 1; j2 < b.size(); ++j2) v += b[j2] * std::pow(th[0], static_cast<double>(j2));
            return v;
        });
        j["polynomial_model"] = {{"beta", b}, {"risk", r.value}, {"se", r.se}};
    }
    write_json(out / "oracle.json", j);
    if (c.verbose) std::cerr << j.dump(2) << '\n';
    return ok;
}

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config, "key = value configuration file");
    sub->add_option("--out", c.out, "output directory");
    sub->add_option("--seed", c.seed, "master seed (overrides the config)");
    sub->add_flag("--verbose,-v", c.verbose, "progress on stderr");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-validated counterfactual risk of dynamic marginal structural models"};
    app.require_subcommand(1);
    Common common;
    std::string data;
    int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    bool resume = false;

    auto* sim = app.add_subcommand("simulate", "simulate one observed dataset (data.csv, manifest.json)");
    add_common(sim, common);
    auto* est = app.add_subcommand("estimate", "estimate risks on a dataset (one JSON per estimator)");
    add_common(est, common);
    est->add_option("--data", data, "dataset CSV (id,stage,S1..Sd,A,Y)")->required();
    est->add_option("--estimators", common.estimators, "comma list of ipw,mr,uipw_dcar,uipw_score");
    auto* stu = app.add_subcommand("study", "replicate study (results.csv, summary.csv, figure1.csv)");
    add_common(stu, common);
    stu->add_option("--estimators", common.estimators, "comma list of ipw,mr,uipw_dcar,uipw_score");
    stu->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
    stu->add_flag("--resume", resume, "continue the newest run with the same config digest");
    auto* ora = app.add_subcommand("oracle", "counterfactual moments per theta point (oracle.csv, oracle.json)");
    add_common(ora, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : config_error;
    }

    try {
        if (sim->parsed()) return cmd_simulate(common);
        if (est->parsed()) return cmd_estimate(common, data);
        if (stu->parsed()) return cmd_study(common, workers, resume);
        if (ora->parsed()) return cmd_oracle(common);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        switch (e.kind()) {
        case ErrorKind::io: return io_error;
        case ErrorKind::config:
        case ErrorKind::invalid_argument: return config_error;
        default: return partial;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return io_error;
    }
    return ok;
}
