// SPDX-License-Identifier: Apache-2.0

#include "manifest.hpp"

#include "wsmerge/wsmerge.h"

#include <chrono>
#include <ctime>
#include <fstream>
#include <stdexcept>

namespace wsmerge::cli {

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

} // namespace

nlohmann::json file_record(const std::filesystem::path & workdir, const std::string & rel) {
    const std::filesystem::path full = workdir / rel;
    char * hex = nullptr;
    if (wsm_file_sha256(full.string().c_str(), &hex) != WSM_OK) {
        throw std::ios_base::failure(wsm_last_error_message());
    }
    nlohmann::json j = {{"path", rel}, {"sha256", std::string(hex)}};
    wsm_string_free(hex);
    return j;
}

void write_text_file(const std::filesystem::path & path, const std::string & text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << text;
        if (!out.flush()) {
            throw std::ios_base::failure("cannot write " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

void write_json_file(const std::filesystem::path & path, const nlohmann::json & j) {
    write_text_file(path, j.dump(2) + "\n");
}

WallClock::WallClock() : started_(now_seconds()) {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    started_utc_ = buf;
}

nlohmann::json WallClock::record() const {
    return {{"started_utc", started_utc_}, {"elapsed_seconds", now_seconds() - started_}};
}

nlohmann::json strip_wall_clock(nlohmann::json manifest) {
    if (manifest.is_object()) {
        manifest.erase(kWallClockKey);
    }
    return manifest;
}

std::string relative_to(const std::filesystem::path & workdir, const std::filesystem::path & p) {
    if (p.is_absolute()) {
        const auto rel = p.lexically_relative(workdir);
        if (!rel.empty() && *rel.begin() != "..") {
            return rel.generic_string();
        }
        return p.generic_string();
    }
    return p.lexically_normal().generic_string();
}

} // namespace wsmerge::cli
