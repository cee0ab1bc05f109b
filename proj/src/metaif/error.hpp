#pragma once

#include <stdexcept>
#include <string>

namespace metaif {

// Failure categories. The numeric values of config/numerical/non_convergence
// double as process exit codes for the command-line front end.
enum class ErrorCode {
    config = 2,
    numerical = 3,
    non_convergence = 4,
    dimension = 5,
    invalid_argument = 6,
    io = 7,
    parse = 8,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

// Raised by iterative solvers; carries the gradient norm reached.
class NonConvergence : public Error {
public:
    NonConvergence(const std::string& what, double achieved_norm)
        : Error(ErrorCode::non_convergence, what), achieved_norm_(achieved_norm) {}

    double achieved_norm() const noexcept { return achieved_norm_; }

private:
    double achieved_norm_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
    throw Error(code, msg);
}

inline void require_dims(bool ok, const std::string& msg) {
    if (!ok) throw Error(ErrorCode::dimension, msg);
}

}  // namespace metaif
