#include "metaif/error.hpp"

namespace metaif {

const char* error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::config: return "config";
        case ErrorCode::numerical: return "numerical";
        case ErrorCode::non_convergence: return "non_convergence";
        case ErrorCode::dimension: return "dimension";
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::io: return "io";
        case ErrorCode::parse: return "parse";
    }
    return "unknown";
}

}  // namespace metaif
