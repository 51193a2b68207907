#pragma once

#include <stdexcept>
#include <string>

namespace dynrisk {

// Broad failure categories. The CLI maps these onto exit codes.
enum class ErrorKind {
    invalid_argument,
    invalid_plan,
    dimension_mismatch,
    non_finite,
    convergence,
    degenerate_treatment,
    positivity,
    no_compliers,
    io,
    config,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
    throw Error(kind, what);
}

inline void require(bool ok, ErrorKind kind, const std::string& what) {
    if (!ok) fail(kind, what);
}

} // namespace dynrisk
