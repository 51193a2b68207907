#pragma once

// Plain-text run configuration: one `key = value` per line, `#` starts a
// comment. Every key is optional; unknown or repeated keys are errors.
// configs/study.conf documents each key with its default.

#include <cctype>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dynrisk/study.hpp"

namespace dynrisk {

struct RunConfig {
    StudyConfig study{};
    Indices baseline{0, 1};          // V: coordinates of S_1 used by baseline-dependent models
    std::vector<double> oracle_beta; // oracle: optional linear_theta coefficients to score
};

namespace detail {

inline std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

inline double config_double(const std::string& key, const std::string& v) {
    try {
        return parse_double(v, 0);
    } catch (const Error&) {
        fail(ErrorKind::config, "key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline std::uint64_t config_uint(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    require(ec == std::errc() && p == t.data() + t.size() && !t.empty(), ErrorKind::config,
            "key '" + key + "': expected a nonnegative integer, got '" + v + "'");
    return out;
}

inline bool config_bool(const std::string& key, const std::string& v) {
    const auto t = lower(trim(v));
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    fail(ErrorKind::config, "key '" + key + "': expected true or false, got '" + v + "'");
}

// Wraps enum parsers so their errors carry the config kind and key.
template <class F>
auto config_enum(const std::string& key, const std::string& v, F parse) {
    try {
        return parse(trim(v));
    } catch (const Error& e) {
        fail(ErrorKind::config, "key '" + key + "': " + e.what());
    }
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline void add_hal_keys(std::map<std::string, Setter>& keys, const std::string& prefix,
                         HalSettings& (*pick)(RunConfig&)) {
    keys[prefix + ".max_order"] = [pick](RunConfig& c, const std::string& k, const std::string& v) {
        pick(c).basis.max_order = static_cast<int>(config_uint(k, v));
    };
    keys[prefix + ".max_knots"] = [pick](RunConfig& c, const std::string& k, const std::string& v) {
        pick(c).basis.max_knots = config_uint(k, v);
    };
    keys[prefix + ".grid_size"] = [pick](RunConfig& c, const std::string& k, const std::string& v) {
        pick(c).grid_size = config_uint(k, v);
    };
    keys[prefix + ".grid_ratio"] = [pick](RunConfig& c, const std::string& k, const std::string& v) {
        pick(c).grid_ratio = config_double(k, v);
    };
    keys[prefix + ".tol"] = [pick](RunConfig& c, const std::string& k, const std::string& v) {
        pick(c).solver.tol = config_double(k, v);
    };
}

inline const std::map<std::string, Setter>& config_keys() {
    static const std::map<std::string, Setter> keys = [] {
        std::map<std::string, Setter> m;
        m["seed"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.study.seed = config_uint(k, v); };
        m["dgp.n"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.study.dgp.n = config_uint(k, v); };
        m["dgp.T"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.T = static_cast<int>(config_uint(k, v));
        };
        m["dgp.treatment_mode"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.treatment_mode = config_enum(k, v, treatment_mode_from_string);
        };
        m["dgp.noise_sd_baseline"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.noise_sd_baseline = config_double(k, v);
        };
        m["dgp.noise_sd_transition"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.noise_sd_transition = config_double(k, v);
        };
        m["dgp.noise_sd_outcome"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.noise_sd_outcome = config_double(k, v);
        };
        m["dgp.clip_lo"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.clip_lo = config_double(k, v);
        };
        m["dgp.clip_hi"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.dgp.clip_hi = config_double(k, v);
        };

        m["study.sample_sizes"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.sample_sizes.clear();
            for (const auto& s : split_list(v)) c.study.sample_sizes.push_back(config_uint(k, s));
        };
        m["study.replicates"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.replicates = config_uint(k, v);
        };
        m["study.oracle_n_mc"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.oracle_n_mc = config_uint(k, v);
        };
        m["estimators"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.estimators.clear();
            for (const auto& s : split_list(v)) c.study.estimators.push_back(config_enum(k, s, estimator_kind_from_string));
        };
        m["folds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.B = static_cast<int>(config_uint(k, v));
        };
        m["level"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.level = config_double(k, v);
        };
        m["baseline"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.baseline.clear();
            for (const auto& s : split_list(v)) c.baseline.push_back(config_uint(k, s));
        };

        m["theta.mean"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.theta.mean = config_double(k, v);
        };
        m["theta.sd"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.theta.sd = config_double(k, v);
        };
        m["theta.K"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.theta_K = config_uint(k, v);
        };

        m["regime.kind"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.fam.kind = config_enum(k, v, regime_kind_from_string);
        };
        m["regime.index"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.fam.index = config_uint(k, v);
        };

        m["msm.family"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.msm.family = config_enum(k, v, msm_family_from_string);
        };
        m["msm.use_baseline"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.msm.use_baseline = config_bool(k, v);
        };
        m["msm.inner_folds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.msm.inner_folds = static_cast<int>(config_uint(k, v));
        };
        add_hal_keys(m, "msm.hal", [](RunConfig& c) -> HalSettings& { return c.study.est.msm.hal; });

        m["propensity.method"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.prop.method = config_enum(k, v, propensity_method_from_string);
        };
        m["propensity.lambda"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.prop.lambda = config_double(k, v);
        };
        m["propensity.clip"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.prop.clip = config_double(k, v);
        };
        add_hal_keys(m, "propensity.hal", [](RunConfig& c) -> HalSettings& { return c.study.est.prop.hal; });

        m["mu.regressor"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.mu.regressor = config_enum(k, v, mu_regressor_from_string);
        };
        m["mu.lambda"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.mu.lambda = config_double(k, v);
        };
        add_hal_keys(m, "mu.hal", [](RunConfig& c) -> HalSettings& { return c.study.est.mu.hal; });

        m["score.J"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.score_J = config_uint(k, v);
        };
        m["score.eps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.study.est.score_eps = config_double(k, v);
        };

        m["oracle.beta"] = [](RunConfig& c, const std::string& k, const std::string& v) {
            c.oracle_beta.clear();
            for (const auto& s : split_list(v)) c.oracle_beta.push_back(config_double(k, s));
        };
        return m;
    }();
    return keys;
}

} // namespace detail

inline std::vector<std::string> config_key_names() {
    std::vector<std::string> out;
    for (const auto& [k, v] : detail::config_keys()) out.push_back(k);
    return out;
}

// Applies one assignment; unknown keys raise ErrorKind::config naming the key.
inline void apply_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    const auto& keys = detail::config_keys();
    const auto it = keys.find(key);
    require(it != keys.end(), ErrorKind::config, "unknown config key '" + key + "'");
    it->second(c, key, value);
}

inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = detail::trim(line);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorKind::config,
                "line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        require(!key.empty(), ErrorKind::config, "line " + std::to_string(lineno) + ": missing key");
        if (const auto it = seen.find(key); it != seen.end())
            fail(ErrorKind::config,
                 "line " + std::to_string(lineno) + ": key '" + key + "' repeats line " + std::to_string(it->second));
        seen[key] = lineno;
        try {
            apply_config_value(base, key, value);
        } catch (const Error& e) {
            fail(ErrorKind::config, "line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return base;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open config '" + path + "'");
    return parse_config(in);
}

} // namespace dynrisk
