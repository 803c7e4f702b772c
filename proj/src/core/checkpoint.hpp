// SPDX-License-Identifier: Apache-2.0
//
// Tensor checkpoint container.
//
// On-disk layout (the "safetensors" layout):
//
//   [u64 little-endian N][N bytes of UTF-8 JSON header][data buffer]
//
// The header maps tensor name -> {"dtype", "shape", "data_offsets": [begin, end)}
// where offsets are relative to the start of the data buffer. The reserved key
// "__metadata__" holds a free-form string -> string map.
//
// Canonical output written by serialize_checkpoint():
//   - "__metadata__" first (when present), then tensors in lexicographic order
//   - per-tensor keys in the order dtype, shape, data_offsets
//   - data packed contiguously in the same lexicographic order
//   - header padded with spaces so the data buffer starts 8-byte aligned
// so that serialize(parse(serialize(c))) == serialize(c) byte for byte.

#pragma once

#include "core/dtype.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wsmerge {

inline constexpr std::string_view kMetadataKey = "__metadata__";

struct Tensor {
    DType dtype = DType::F32;
    std::vector<std::uint64_t> shape;
    std::vector<std::byte> data;

    std::uint64_t element_count() const;

    bool operator==(const Tensor &) const = default;
};

// Throws if shape is empty, has a zero dimension, or data length disagrees
// with shape and dtype.
void validate_tensor(std::string_view name, const Tensor & tensor);

Tensor make_f32_tensor(std::vector<std::uint64_t> shape, std::span<const float> values);

class Checkpoint {
public:
    using TensorMap = std::map<std::string, Tensor, std::less<>>;
    using Metadata = std::map<std::string, std::string, std::less<>>;

    // Rejects exact duplicates only; names are case-sensitive.
    void add(std::string name, Tensor tensor);
    void replace(const std::string & name, Tensor tensor);
    void erase(std::string_view name);

    const Tensor * find(std::string_view name) const;
    const Tensor & at(std::string_view name) const;
    bool contains(std::string_view name) const { return find(name) != nullptr; }

    const TensorMap & tensors() const { return tensors_; }
    std::size_t size() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }

    bool has_metadata() const { return has_metadata_; }
    const Metadata & metadata() const { return metadata_; }
    std::optional<std::string> metadata_value(std::string_view key) const;
    void set_metadata(std::string key, std::string value);
    void set_metadata_block(Metadata metadata);
    void clear_metadata();

    bool operator==(const Checkpoint &) const = default;

private:
    TensorMap tensors_;
    Metadata metadata_;
    bool has_metadata_ = false;
};

Checkpoint parse_checkpoint(std::span<const std::byte> bytes);
std::vector<std::byte> serialize_checkpoint(const Checkpoint & ckpt);

Checkpoint read_checkpoint(const std::filesystem::path & path);
// Writes through a temporary file in the same directory and renames it into place.
void write_checkpoint(const Checkpoint & ckpt, const std::filesystem::path & path);

// Index JSON maps tensor name -> shard file name, either at top level or under
// "weight_map" (with optional "metadata"). Shard paths resolve against the
// index file's directory.
Checkpoint read_sharded_checkpoint(const std::filesystem::path & index_path);

std::vector<std::byte> read_file_bytes(const std::filesystem::path & path);
void write_file_atomic(const std::filesystem::path & path, std::span<const std::byte> bytes);

// SHA-256 over the canonical serialization with metadata stripped, so two
// checkpoints with identical tensors hash identically regardless of provenance.
std::string content_hash(const Checkpoint & ckpt);

struct TensorMismatch {
    std::string name;
    std::string left;
    std::string right;
};

struct CompatibilityReport {
    std::vector<std::string> shared;
    std::vector<std::string> missing_in_a;
    std::vector<std::string> missing_in_b;
    std::vector<TensorMismatch> shape_mismatches;
    std::vector<TensorMismatch> dtype_mismatches;

    bool has_mismatches() const { return !shape_mismatches.empty() || !dtype_mismatches.empty(); }
    std::string to_json() const;
};

// Never throws on disagreement; callers decide how strict to be.
CompatibilityReport validate_compatibility(const Checkpoint & a, const Checkpoint & b);

std::string describe_shape(std::span<const std::uint64_t> shape);

} // namespace wsmerge
