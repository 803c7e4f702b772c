// SPDX-License-Identifier: Apache-2.0

#include "core/parallel.hpp"

#include <cstdlib>
#include <string>

namespace wsmerge {

unsigned default_thread_count() {
    if (const char * env = std::getenv("WSMERGE_THREADS"); env != nullptr && *env != '\0') {
        try {
            const long value = std::stol(env);
            if (value >= 1) {
                return static_cast<unsigned>(value);
            }
        } catch (...) {
        }
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

} // namespace wsmerge
