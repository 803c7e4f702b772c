// SPDX-License-Identifier: Apache-2.0
//
// Run manifests. Every file the CLI writes is listed in a manifest next to
// it, together with the hashes of its inputs and the resolved parameters.
// Only the "wall_clock" member varies between identical runs.

#pragma once

#include "json.hpp"

#include <filesystem>
#include <string>

namespace wsmerge::cli {

inline constexpr const char * kWallClockKey = "wall_clock";

// {"path": rel, "sha256": ...} for a file under workdir.
nlohmann::json file_record(const std::filesystem::path & workdir, const std::string & rel);

// Sorted keys, two-space indent, trailing newline; written via a temp file.
void write_json_file(const std::filesystem::path & path, const nlohmann::json & j);
void write_text_file(const std::filesystem::path & path, const std::string & text);

class WallClock {
public:
    WallClock();
    nlohmann::json record() const;

private:
    std::string started_utc_;
    double started_ = 0.0;
};

nlohmann::json strip_wall_clock(nlohmann::json manifest);

// `p` relative to `workdir` with forward slashes; absolute paths pass through.
std::string relative_to(const std::filesystem::path & workdir, const std::filesystem::path & p);

} // namespace wsmerge::cli
