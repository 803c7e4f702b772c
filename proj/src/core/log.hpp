// SPDX-License-Identifier: Apache-2.0
//
// Process-wide warning sink. Library code reports recoverable conditions
// (skipped tensors, degenerate selections) here instead of printing.

#pragma once

#include <functional>
#include <string>

namespace wsmerge {

using LogSink = std::function<void(const std::string &)>;

// Passing an empty sink restores the default (write to stderr).
void set_log_sink(LogSink sink);
void log_warning(const std::string & message);

} // namespace wsmerge
