#pragma once

// JSON form of a fit:
//   { "design_dim": d, "loss": "squared"|"bernoulli", "lambda": x,
//     "intercept": b0, "l1_norm": x, "saturated": bool,
//     "coefficients": [ { "section": [j,...], "knot": [v,...], "value": b }, ... ] }
// Section coordinates are 0-based design columns.

#include <memory>

#include <json.hpp>

#include "dynrisk/hal/path.hpp"

namespace dynrisk::hal {

inline nlohmann::json to_json(const HalFit& fit) {
    nlohmann::json coefs = nlohmann::json::array();
    for (std::size_t k = 0; k < fit.index.size(); ++k) {
        const auto& col = fit.spec->columns[fit.index[k]];
        coefs.push_back({{"section", fit.spec->sections[col.section]}, {"knot", col.knot}, {"value", fit.value[k]}});
    }
    return {{"design_dim", fit.spec ? fit.spec->design_dim : 0},
            {"loss", to_string(fit.loss)},
            {"lambda", fit.lambda},
            {"intercept", fit.intercept},
            {"l1_norm", fit.l1_norm},
            {"saturated", fit.saturated},
            {"coefficients", coefs}};
}

// Rebuilds a standalone fit whose basis holds exactly the nonzero columns.
inline HalFit fit_from_json(const nlohmann::json& j) {
    auto spec = std::make_shared<BasisSpec>();
    spec->design_dim = j.at("design_dim").get<std::size_t>();
    HalFit fit;
    fit.loss = loss_kind_from_string(j.at("loss").get<std::string>());
    fit.lambda = j.at("lambda").get<double>();
    fit.intercept = j.at("intercept").get<double>();
    fit.saturated = j.value("saturated", false);
    fit.l1_norm = std::abs(fit.intercept);
    for (const auto& c : j.at("coefficients")) {
        auto section = c.at("section").get<std::vector<std::size_t>>();
        for (auto s : section)
            require(s < spec->design_dim, ErrorKind::dimension_mismatch, "coefficient section outside design");
        std::uint32_t sid = 0;
        while (sid < spec->sections.size() && spec->sections[sid] != section) ++sid;
        if (sid == spec->sections.size()) spec->sections.push_back(section);
        spec->columns.push_back(BasisColumn{sid, c.at("knot").get<std::vector<double>>()});
        fit.index.push_back(static_cast<std::uint32_t>(spec->columns.size() - 1));
        const double v = c.at("value").get<double>();
        fit.value.push_back(v);
        fit.l1_norm += std::abs(v);
    }
    fit.spec = std::move(spec);
    return fit;
}

} // namespace dynrisk::hal
