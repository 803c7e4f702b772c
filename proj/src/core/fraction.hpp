// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>

namespace wsmerge {

// ceil/floor of fraction * n, snapping products that sit within 1e-9 of an
// integer first, so 0.7 * 10 keeps 7 elements rather than 8.
inline std::size_t snapped_product(double fraction, std::size_t n, bool round_up) {
    const double x = fraction * static_cast<double>(n);
    const double nearest = std::round(x);
    if (std::fabs(x - nearest) <= 1e-9 * std::fmax(1.0, std::fabs(x))) {
        return static_cast<std::size_t>(nearest);
    }
    return static_cast<std::size_t>(round_up ? std::ceil(x) : std::floor(x));
}

inline std::size_t fraction_ceil(double fraction, std::size_t n) {
    return snapped_product(fraction, n, true);
}

inline std::size_t fraction_floor(double fraction, std::size_t n) {
    return snapped_product(fraction, n, false);
}

} // namespace wsmerge
