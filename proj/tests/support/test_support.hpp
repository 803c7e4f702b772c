// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "core/checkpoint.hpp"
#include "core/task_vector.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace testsupport {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    TempDir();
    ~TempDir();
    TempDir(const TempDir &) = delete;
    TempDir & operator=(const TempDir &) = delete;

    const std::filesystem::path & path() const { return path_; }
    std::filesystem::path operator/(const std::string & name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

std::vector<std::byte> bytes_of(const std::string & text);
std::string read_text(const std::filesystem::path & path);
void write_text(const std::filesystem::path & path, const std::string & text);

wsmerge::Checkpoint f32_checkpoint(const std::vector<std::pair<std::string, std::vector<float>>> & tensors);
std::vector<float> f32_values(const wsmerge::Checkpoint & ckpt, const std::string & name);

// 1-20 tensors of mixed dtypes, at most `max_elements` elements each, with
// random finite values and an occasional metadata block.
wsmerge::Checkpoint random_checkpoint(std::mt19937_64 & rng, std::size_t max_elements = 4096);

// Finite F32 values drawn from a few scales, with some exact zeros and
// repeated magnitudes so tie-breaking paths get exercised.
std::vector<float> random_delta(std::mt19937_64 & rng, std::size_t n);

std::uint32_t float_bits(float f);
bool bit_equal(const std::vector<float> & a, const std::vector<float> & b);

} // namespace testsupport
