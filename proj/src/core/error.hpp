// SPDX-License-Identifier: Apache-2.0
//
// Error taxonomy shared by every module of the core library. The C API maps
// each code onto a wsm_status value one-to-one.

#pragma once

#include <stdexcept>
#include <string>

namespace wsmerge {

enum class ErrorCode {
    InvalidArgument,
    Io,
    Truncated,
    MalformedHeader,
    OverlappingOffsets,
    OffsetOutOfRange,
    UnsupportedDtype,
    DuplicateTensor,
    Incompatible,
    BaseMismatch,
    FingerprintMismatch,
    NonFinite,
    ZeroVariance,
    RankDeficient,
    NumericalRange,
};

const char * error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string & message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string & message) {
    throw Error(code, message);
}

} // namespace wsmerge
