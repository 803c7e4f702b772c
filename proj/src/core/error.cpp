// SPDX-License-Identifier: Apache-2.0

#include "core/error.hpp"

namespace wsmerge {

const char * error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument:     return "invalid_argument";
        case ErrorCode::Io:                  return "io_error";
        case ErrorCode::Truncated:           return "truncated_file";
        case ErrorCode::MalformedHeader:     return "malformed_header";
        case ErrorCode::OverlappingOffsets:  return "overlapping_offsets";
        case ErrorCode::OffsetOutOfRange:    return "offset_out_of_range";
        case ErrorCode::UnsupportedDtype:    return "unsupported_dtype";
        case ErrorCode::DuplicateTensor:     return "duplicate_tensor";
        case ErrorCode::Incompatible:        return "incompatible";
        case ErrorCode::BaseMismatch:        return "base_mismatch";
        case ErrorCode::FingerprintMismatch: return "fingerprint_mismatch";
        case ErrorCode::NonFinite:           return "non_finite";
        case ErrorCode::ZeroVariance:        return "zero_variance";
        case ErrorCode::RankDeficient:       return "rank_deficient";
        case ErrorCode::NumericalRange:      return "numerical_range";
    }
    return "unknown";
}

} // namespace wsmerge
