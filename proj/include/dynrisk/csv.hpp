#pragma once

// Long-format dataset CSV:
//
//   id,stage,S1,...,Sd,A,Y
//
// One row per (subject, stage). Stages run 1..T for every subject. A stage
// with fewer than d covariates leaves the trailing S columns empty. Y may be
// repeated on every row of a subject or given only on the last stage row
// (earlier rows empty); repeated values must agree.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dynrisk/core.hpp"

namespace dynrisk {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& s, std::size_t line) {
    const std::string t = trim(s);
    double v = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    require(ec == std::errc() && p == t.data() + t.size() && !t.empty(), ErrorKind::io,
            "line " + std::to_string(line) + ": cannot parse number '" + s + "'");
    return v;
}

inline std::string format_double(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, p);
}

} // namespace detail

inline LongitudinalDataset read_dataset_csv(std::istream& in, Indices baseline_selector = {}) {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorKind::io, "empty dataset file");
    const auto header = detail::split_csv_line(line);
    require(header.size() >= 4 && detail::trim(header[0]) == "id" && detail::trim(header[1]) == "stage" &&
                detail::trim(header[header.size() - 2]) == "A" && detail::trim(header.back()) == "Y",
            ErrorKind::io, "dataset header must be: id,stage,S1..Sd,A,Y");
    const std::size_t d = header.size() - 4;
    for (std::size_t j = 0; j < d; ++j)
        require(detail::trim(header[2 + j]) == "S" + std::to_string(j + 1), ErrorKind::io,
                "covariate column " + std::to_string(j + 1) + " must be named S" + std::to_string(j + 1));

    struct Row {
        std::vector<double> s;
        int a = 0;
        bool has_y = false;
        double y = 0.0;
    };
    std::vector<std::string> order;
    std::map<std::string, std::map<int, Row>> subjects;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_csv_line(line);
        require(f.size() == header.size(), ErrorKind::io, "line " + std::to_string(lineno) + ": wrong field count");
        const std::string id = detail::trim(f[0]);
        const int stage = static_cast<int>(detail::parse_double(f[1], lineno));
        Row r;
        for (std::size_t j = 0; j < d; ++j) {
            if (detail::trim(f[2 + j]).empty()) break;
            r.s.push_back(detail::parse_double(f[2 + j], lineno));
        }
        const double a = detail::parse_double(f[2 + d], lineno);
        require(a == 0.0 || a == 1.0, ErrorKind::io, "line " + std::to_string(lineno) + ": A must be 0 or 1");
        r.a = static_cast<int>(a);
        if (!detail::trim(f[3 + d]).empty()) {
            r.has_y = true;
            r.y = detail::parse_double(f[3 + d], lineno);
        }
        if (!subjects.count(id)) order.push_back(id);
        auto& stages = subjects[id];
        require(!stages.count(stage), ErrorKind::io, "duplicate (id, stage) = (" + id + ", " + std::to_string(stage) + ")");
        stages.emplace(stage, std::move(r));
    }
    require(!order.empty(), ErrorKind::io, "dataset has no rows");

    const auto& first = subjects[order[0]];
    const int T = static_cast<int>(first.size());
    std::vector<std::size_t> dims;
    for (int t = 1; t <= T; ++t) {
        require(first.count(t), ErrorKind::io, "stages must be numbered 1..T");
        dims.push_back(first.at(t).s.size());
    }
    const auto n = static_cast<Eigen::Index>(order.size());
    std::vector<Eigen::MatrixXd> cov;
    for (auto dt : dims) cov.emplace_back(n, static_cast<Eigen::Index>(dt));
    Eigen::MatrixXi a(n, T);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& st = subjects[order[static_cast<std::size_t>(i)]];
        require(static_cast<int>(st.size()) == T, ErrorKind::io, "subject " + order[static_cast<std::size_t>(i)] +
                                                                    " has a different stage count");
        bool have_y = false;
        for (int t = 1; t <= T; ++t) {
            require(st.count(t), ErrorKind::io, "subject " + order[static_cast<std::size_t>(i)] + " misses stage " +
                                                    std::to_string(t));
            const Row& r = st.at(t);
            require(r.s.size() == dims[static_cast<std::size_t>(t - 1)], ErrorKind::io,
                    "subject " + order[static_cast<std::size_t>(i)] + " stage " + std::to_string(t) +
                        " has a different covariate count");
            for (std::size_t j = 0; j < r.s.size(); ++j) cov[static_cast<std::size_t>(t - 1)](i, static_cast<Eigen::Index>(j)) = r.s[j];
            a(i, t - 1) = r.a;
            if (r.has_y) {
                if (have_y)
                    require(r.y == y(i), ErrorKind::io,
                            "subject " + order[static_cast<std::size_t>(i)] + " has inconsistent Y values");
                y(i) = r.y;
                have_y = true;
            }
        }
        require(have_y && st.at(T).has_y, ErrorKind::io,
                "subject " + order[static_cast<std::size_t>(i)] + " has no Y on its last stage row");
    }
    return LongitudinalDataset(std::move(cov), std::move(a), std::move(y), std::move(baseline_selector));
}

inline LongitudinalDataset read_dataset_csv(const std::string& path, Indices baseline_selector = {}) {
    std::ifstream in(path);
    require(in.good(), ErrorKind::io, "cannot open dataset '" + path + "'");
    return read_dataset_csv(in, std::move(baseline_selector));
}

// Writes Y on every stage row. Subject ids are 1-based row numbers.
inline void write_dataset_csv(std::ostream& out, const LongitudinalDataset& ds) {
    std::size_t d = 0;
    for (int t = 1; t <= ds.stages(); ++t) d = std::max(d, ds.stage_dim(t));
    out << "id,stage";
    for (std::size_t j = 1; j <= d; ++j) out << ",S" << j;
    out << ",A,Y\n";
    for (std::size_t i = 0; i < ds.n(); ++i) {
        for (int t = 1; t <= ds.stages(); ++t) {
            out << (i + 1) << ',' << t;
            const auto& s = ds.covariates(t);
            for (std::size_t j = 0; j < d; ++j) {
                out << ',';
                if (j < static_cast<std::size_t>(s.cols()))
                    out << detail::format_double(s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)));
            }
            out << ',' << ds.treatment(i, t) << ',' << detail::format_double(ds.outcome()(static_cast<Eigen::Index>(i)))
                << '\n';
        }
    }
}

inline void write_dataset_csv(const std::string& path, const LongitudinalDataset& ds) {
    std::ofstream out(path);
    require(out.good(), ErrorKind::io, "cannot write dataset '" + path + "'");
    write_dataset_csv(out, ds);
}

} // namespace dynrisk
