#pragma once

// Zero-order indicator basis of the highly adaptive lasso.
//
// A section r is a nonempty subset of the design coordinates; a column is an
// indicator phi(x) = prod_{j in r} I(x_j >= knot_j). Knots are the observed
// section values of the training rows, optionally thinned to marginal
// quantiles when max_knots is set.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "dynrisk/error.hpp"

namespace dynrisk::hal {

struct BasisColumn {
    std::uint32_t section = 0;
    std::vector<double> knot; // one value per coordinate of the section
};

// Column definitions without training data; enough to evaluate the basis
// anywhere. Shared by fits so they stay usable after the basis is gone.
struct BasisSpec {
    std::size_t design_dim = 0;
    std::vector<std::vector<std::size_t>> sections;
    std::vector<BasisColumn> columns;

    double evaluate(std::size_t col, const double* x, std::ptrdiff_t stride) const {
        const auto& c = columns[col];
        const auto& r = sections[c.section];
        for (std::size_t k = 0; k < r.size(); ++k)
            if (!(x[static_cast<std::ptrdiff_t>(r[k]) * stride] >= c.knot[k])) return 0.0;
        return 1.0;
    }

    // Design matrix for arbitrary rows.
    Eigen::MatrixXd design(const Eigen::MatrixXd& X) const {
        require(static_cast<std::size_t>(X.cols()) == design_dim, ErrorKind::dimension_mismatch,
                "basis expects " + std::to_string(design_dim) + " columns, got " + std::to_string(X.cols()));
        Eigen::MatrixXd out(X.rows(), static_cast<Eigen::Index>(columns.size()));
        for (std::size_t c = 0; c < columns.size(); ++c) fill_column(X, c, out.col(static_cast<Eigen::Index>(c)));
        return out;
    }

    template <class Col>
    void fill_column(const Eigen::MatrixXd& X, std::size_t c, Col&& out) const {
        const auto& col = columns[c];
        const auto& r = sections[col.section];
        out.setOnes();
        for (std::size_t k = 0; k < r.size(); ++k) {
            const auto j = static_cast<Eigen::Index>(r[k]);
            const double knot = col.knot[k];
            for (Eigen::Index i = 0; i < X.rows(); ++i)
                if (!(X(i, j) >= knot)) out(i) = 0.0;
        }
    }
};

struct BasisOptions {
    int max_order = 2;
    // 0 keeps every observed value as a knot. Otherwise each coordinate of a
    // section contributes at most floor(max_knots^(1/|r|)) marginal quantiles.
    std::size_t max_knots = 0;
};

class HalBasis {
public:
    HalBasis() = default;
    HalBasis(std::shared_ptr<const BasisSpec> spec, Eigen::MatrixXd design)
        : spec_(std::move(spec)), design_(std::move(design)) {}

    std::size_t design_dim() const noexcept { return spec_->design_dim; }
    std::size_t size() const noexcept { return spec_->columns.size(); }
    const BasisSpec& spec() const noexcept { return *spec_; }
    const std::shared_ptr<const BasisSpec>& spec_ptr() const noexcept { return spec_; }
    const std::vector<std::vector<std::size_t>>& sections() const noexcept { return spec_->sections; }
    const std::vector<BasisColumn>& columns() const noexcept { return spec_->columns; }

    // Training design, n x columns, entries 0/1.
    const Eigen::MatrixXd& design() const noexcept { return design_; }

    Eigen::MatrixXd evaluate(const Eigen::MatrixXd& X) const { return spec_->design(X); }

private:
    std::shared_ptr<const BasisSpec> spec_ = std::make_shared<BasisSpec>();
    Eigen::MatrixXd design_;
};

namespace detail {

inline void enumerate_sections(std::size_t d, int max_order, std::vector<std::vector<std::size_t>>& out) {
    // Subsets ordered by cardinality, then lexicographically.
    for (int k = 1; k <= max_order; ++k) {
        std::vector<std::size_t> idx(static_cast<std::size_t>(k));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        while (true) {
            out.push_back(idx);
            int p = k - 1;
            while (p >= 0 && idx[static_cast<std::size_t>(p)] == d - static_cast<std::size_t>(k - p)) --p;
            if (p < 0) break;
            ++idx[static_cast<std::size_t>(p)];
            for (auto q = static_cast<std::size_t>(p) + 1; q < idx.size(); ++q) idx[q] = idx[q - 1] + 1;
        }
    }
}

inline std::vector<double> marginal_knots(const Eigen::MatrixXd& X, std::size_t j, std::size_t cap) {
    std::vector<double> v(X.col(static_cast<Eigen::Index>(j)).data(),
                          X.col(static_cast<Eigen::Index>(j)).data() + X.rows());
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    if (cap == 0 || v.size() <= cap) return v;
    std::vector<double> out;
    out.reserve(cap);
    for (std::size_t k = 0; k < cap; ++k) {
        const auto pos = static_cast<std::size_t>((static_cast<double>(k) + 0.5) * static_cast<double>(v.size()) /
                                                  static_cast<double>(cap));
        out.push_back(v[std::min(pos, v.size() - 1)]);
    }
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

struct PatternHash {
    std::size_t operator()(const std::string& s) const noexcept { return std::hash<std::string>{}(s); }
};

} // namespace detail

inline HalBasis build_basis(const Eigen::MatrixXd& X, const BasisOptions& opt = {}) {
    const auto n = static_cast<std::size_t>(X.rows());
    const auto d = static_cast<std::size_t>(X.cols());
    require(n >= 1 && d >= 1, ErrorKind::invalid_argument, "basis needs at least one row and one column");
    require(opt.max_order >= 1 && static_cast<std::size_t>(opt.max_order) <= d, ErrorKind::invalid_argument,
            "max_order must lie in 1..d");
    require(X.allFinite(), ErrorKind::non_finite, "basis design must be finite");

    auto spec = std::make_shared<BasisSpec>();
    spec->design_dim = d;
    detail::enumerate_sections(d, opt.max_order, spec->sections);

    std::vector<Eigen::VectorXd> kept;
    std::string pattern(n, '0');
    Eigen::VectorXd col(static_cast<Eigen::Index>(n));
    for (std::size_t s = 0; s < spec->sections.size(); ++s) {
        const auto& r = spec->sections[s];
        std::vector<std::vector<double>> knots;
        if (opt.max_knots == 0) {
            knots.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> k(r.size());
                for (std::size_t c = 0; c < r.size(); ++c)
                    k[c] = X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r[c]));
                knots.push_back(std::move(k));
            }
        } else {
            const auto per = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::floor(
                       std::pow(static_cast<double>(opt.max_knots), 1.0 / static_cast<double>(r.size())) + 1e-9)));
            std::vector<std::vector<double>> marg;
            for (auto j : r) marg.push_back(detail::marginal_knots(X, j, per));
            std::vector<std::size_t> odo(r.size(), 0);
            while (true) {
                std::vector<double> k(r.size());
                for (std::size_t c = 0; c < r.size(); ++c) k[c] = marg[c][odo[c]];
                knots.push_back(std::move(k));
                std::size_t c = 0;
                while (c < r.size() && ++odo[c] == marg[c].size()) odo[c++] = 0;
                if (c == r.size()) break;
            }
        }
        // Dedup within the section by training pattern; drop columns that are
        // identically zero on the training rows.
        std::unordered_map<std::string, bool, detail::PatternHash> seen;
        for (auto& k : knots) {
            bool any = false;
            for (std::size_t i = 0; i < n; ++i) {
                bool on = true;
                for (std::size_t c = 0; c < r.size(); ++c)
                    if (!(X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r[c])) >= k[c])) {
                        on = false;
                        break;
                    }
                pattern[i] = on ? '1' : '0';
                col(static_cast<Eigen::Index>(i)) = on ? 1.0 : 0.0;
                any = any || on;
            }
            if (!any) continue;
            if (!seen.emplace(pattern, true).second) continue;
            spec->columns.push_back(BasisColumn{static_cast<std::uint32_t>(s), std::move(k)});
            kept.push_back(col);
        }
    }
    Eigen::MatrixXd design(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kept.size()));
    for (std::size_t c = 0; c < kept.size(); ++c) design.col(static_cast<Eigen::Index>(c)) = kept[c];
    return HalBasis(std::move(spec), std::move(design));
}

inline HalBasis build_basis(const Eigen::MatrixXd& X, int max_order) {
    return build_basis(X, BasisOptions{max_order, 0});
}

} // namespace dynrisk::hal
