// SPDX-License-Identifier: Apache-2.0

#include "core/checkpoint.hpp"

#include "core/error.hpp"
#include "core/sha256.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <system_error>

namespace wsmerge {

namespace {

using json = nlohmann::json;

constexpr std::uint64_t kMaxHeaderBytes = 100'000'000;

bool checked_mul(std::uint64_t a, std::uint64_t b, std::uint64_t & out) {
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
        return false;
    }
    out = a * b;
    return true;
}

std::string json_quoted(std::string_view s) {
    return json(std::string(s)).dump();
}

struct Entry {
    std::string name;
    DType dtype;
    std::vector<std::uint64_t> shape;
    std::uint64_t begin;
    std::uint64_t end;
};

Entry parse_entry(const std::string & name, const json & value) {
    const std::string where = "tensor " + json_quoted(name);
    if (!value.is_object()) {
        fail(ErrorCode::MalformedHeader, where + ": header entry is not an object");
    }
    for (const char * key : {"dtype", "shape", "data_offsets"}) {
        if (!value.contains(key)) {
            fail(ErrorCode::MalformedHeader, where + ": missing field '" + key + "'");
        }
    }
    if (value.size() != 3) {
        fail(ErrorCode::MalformedHeader, where + ": unexpected extra fields");
    }
    const json & dtype = value["dtype"];
    if (!dtype.is_string()) {
        fail(ErrorCode::MalformedHeader, where + ": dtype is not a string");
    }

    Entry entry;
    entry.name = name;
    try {
        entry.dtype = parse_dtype(dtype.get_ref<const std::string &>());
    } catch (const Error & e) {
        fail(ErrorCode::UnsupportedDtype, where + ": " + e.what());
    }

    const json & shape = value["shape"];
    if (!shape.is_array() || shape.empty()) {
        fail(ErrorCode::MalformedHeader, where + ": shape must be a non-empty array");
    }
    for (const json & dim : shape) {
        if (!dim.is_number_unsigned() || dim.get<std::uint64_t>() == 0) {
            fail(ErrorCode::MalformedHeader, where + ": shape dimensions must be positive integers");
        }
        entry.shape.push_back(dim.get<std::uint64_t>());
    }

    const json & offsets = value["data_offsets"];
    if (!offsets.is_array() || offsets.size() != 2 || !offsets[0].is_number_unsigned() ||
        !offsets[1].is_number_unsigned()) {
        fail(ErrorCode::MalformedHeader, where + ": data_offsets must be two non-negative integers");
    }
    entry.begin = offsets[0].get<std::uint64_t>();
    entry.end = offsets[1].get<std::uint64_t>();
    if (entry.begin > entry.end) {
        fail(ErrorCode::MalformedHeader, where + ": data_offsets begin exceeds end");
    }
    return entry;
}

} // namespace

std::uint64_t Tensor::element_count() const {
    std::uint64_t n = 1;
    for (std::uint64_t d : shape) {
        if (!checked_mul(n, d, n)) {
            return std::numeric_limits<std::uint64_t>::max();
        }
    }
    return n;
}

std::string describe_shape(std::span<const std::uint64_t> shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

void validate_tensor(std::string_view name, const Tensor & tensor) {
    const std::string where = "tensor " + json_quoted(name);
    if (tensor.shape.empty()) {
        fail(ErrorCode::InvalidArgument, where + ": shape must be non-empty");
    }
    std::uint64_t bytes = dtype_size(tensor.dtype);
    for (std::uint64_t d : tensor.shape) {
        if (d == 0) {
            fail(ErrorCode::InvalidArgument, where + ": zero-sized dimension in shape " + describe_shape(tensor.shape));
        }
        if (!checked_mul(bytes, d, bytes)) {
            fail(ErrorCode::InvalidArgument, where + ": shape overflows");
        }
    }
    if (bytes != tensor.data.size()) {
        fail(ErrorCode::InvalidArgument,
             where + ": holds " + std::to_string(tensor.data.size()) + " bytes but shape " +
                 describe_shape(tensor.shape) + " of " + std::string(dtype_name(tensor.dtype)) +
                 " needs " + std::to_string(bytes));
    }
}

Tensor make_f32_tensor(std::vector<std::uint64_t> shape, std::span<const float> values) {
    Tensor t;
    t.dtype = DType::F32;
    t.shape = std::move(shape);
    t.data = encode_f32(values, DType::F32);
    return t;
}

void Checkpoint::add(std::string name, Tensor tensor) {
    if (name == kMetadataKey) {
        fail(ErrorCode::InvalidArgument, "tensor name __metadata__ is reserved");
    }
    validate_tensor(name, tensor);
    if (tensors_.contains(name)) {
        fail(ErrorCode::DuplicateTensor, "duplicate tensor name " + json_quoted(name));
    }
    tensors_.emplace(std::move(name), std::move(tensor));
}

void Checkpoint::replace(const std::string & name, Tensor tensor) {
    if (name == kMetadataKey) {
        fail(ErrorCode::InvalidArgument, "tensor name __metadata__ is reserved");
    }
    validate_tensor(name, tensor);
    tensors_.insert_or_assign(name, std::move(tensor));
}

void Checkpoint::erase(std::string_view name) {
    if (auto it = tensors_.find(name); it != tensors_.end()) {
        tensors_.erase(it);
    }
}

const Tensor * Checkpoint::find(std::string_view name) const {
    auto it = tensors_.find(name);
    return it == tensors_.end() ? nullptr : &it->second;
}

const Tensor & Checkpoint::at(std::string_view name) const {
    const Tensor * t = find(name);
    if (t == nullptr) {
        fail(ErrorCode::InvalidArgument, "no tensor named " + json_quoted(name));
    }
    return *t;
}

std::optional<std::string> Checkpoint::metadata_value(std::string_view key) const {
    auto it = metadata_.find(key);
    if (it == metadata_.end()) {
        return std::nullopt;
    }
    return it->second;
}

void Checkpoint::set_metadata(std::string key, std::string value) {
    has_metadata_ = true;
    metadata_.insert_or_assign(std::move(key), std::move(value));
}

void Checkpoint::set_metadata_block(Metadata metadata) {
    has_metadata_ = true;
    metadata_ = std::move(metadata);
}

void Checkpoint::clear_metadata() {
    has_metadata_ = false;
    metadata_.clear();
}

Checkpoint parse_checkpoint(std::span<const std::byte> bytes) {
    if (bytes.size() < 8) {
        fail(ErrorCode::Truncated,
             "truncated file: expected 8 bytes for the header length at offset 0, only " +
                 std::to_string(bytes.size()) + " available");
    }
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (header_len > kMaxHeaderBytes) {
        fail(ErrorCode::MalformedHeader,
             "header length " + std::to_string(header_len) + " exceeds the " +
                 std::to_string(kMaxHeaderBytes) + "-byte limit");
    }
    const std::uint64_t available = bytes.size() - 8;
    if (header_len > available) {
        fail(ErrorCode::Truncated,
             "truncated file: header expects " + std::to_string(header_len) +
                 " bytes at offset 8, only " + std::to_string(available) + " available");
    }

    const auto * header_begin = reinterpret_cast<const char *>(bytes.data() + 8);
    const std::string_view header_text(header_begin, header_len);

    std::set<std::string, std::less<>> seen_keys;
    std::string duplicate;
    json::parser_callback_t on_event = [&](int depth, json::parse_event_t event, json & parsed) {
        if (event == json::parse_event_t::key && depth == 1 && duplicate.empty()) {
            const auto & key = parsed.get_ref<const std::string &>();
            if (!seen_keys.insert(key).second) {
                duplicate = key;
            }
        }
        return true;
    };

    json header;
    try {
        header = json::parse(header_text, on_event);
    } catch (const json::parse_error & e) {
        fail(ErrorCode::MalformedHeader,
             "malformed header JSON near file byte " + std::to_string(8 + e.byte) + ": " + e.what());
    } catch (const json::exception & e) {
        // e.g. a number literal outside the double range
        fail(ErrorCode::MalformedHeader, std::string("malformed header JSON: ") + e.what());
    }
    if (!header.is_object()) {
        fail(ErrorCode::MalformedHeader, "header at offset 8 is not a JSON object");
    }
    if (!duplicate.empty()) {
        fail(ErrorCode::DuplicateTensor, "header declares " + json_quoted(duplicate) + " more than once");
    }

    const std::uint64_t data_offset = 8 + header_len;
    const std::uint64_t buffer_size = bytes.size() - data_offset;

    Checkpoint ckpt;
    std::vector<Entry> entries;
    for (auto it = header.begin(); it != header.end(); ++it) {
        if (it.key() == kMetadataKey) {
            if (!it.value().is_object()) {
                fail(ErrorCode::MalformedHeader, "__metadata__ must be an object of strings");
            }
            Checkpoint::Metadata metadata;
            for (auto m = it.value().begin(); m != it.value().end(); ++m) {
                if (!m.value().is_string()) {
                    fail(ErrorCode::MalformedHeader, "__metadata__ value for " + json_quoted(m.key()) + " is not a string");
                }
                metadata.emplace(m.key(), m.value().get<std::string>());
            }
            ckpt.set_metadata_block(std::move(metadata));
            continue;
        }
        entries.push_back(parse_entry(it.key(), it.value()));
    }

    for (const Entry & e : entries) {
        if (e.end > buffer_size) {
            fail(ErrorCode::OffsetOutOfRange,
                 "tensor " + json_quoted(e.name) + ": data_offsets [" + std::to_string(e.begin) + "," +
                     std::to_string(e.end) + ") exceed the " + std::to_string(buffer_size) +
                     "-byte data buffer starting at file offset " + std::to_string(data_offset));
        }
        std::uint64_t needed = dtype_size(e.dtype);
        for (std::uint64_t d : e.shape) {
            if (!checked_mul(needed, d, needed)) {
                fail(ErrorCode::MalformedHeader, "tensor " + json_quoted(e.name) + ": shape overflows");
            }
        }
        if (needed != e.end - e.begin) {
            fail(ErrorCode::MalformedHeader,
                 "tensor " + json_quoted(e.name) + ": data_offsets span " + std::to_string(e.end - e.begin) +
                     " bytes but shape " + describe_shape(e.shape) + " of " +
                     std::string(dtype_name(e.dtype)) + " needs " + std::to_string(needed));
        }
    }

    std::vector<const Entry *> by_offset;
    by_offset.reserve(entries.size());
    for (const Entry & e : entries) {
        by_offset.push_back(&e);
    }
    std::sort(by_offset.begin(), by_offset.end(),
              [](const Entry * a, const Entry * b) { return a->begin < b->begin; });
    for (std::size_t i = 1; i < by_offset.size(); ++i) {
        if (by_offset[i]->begin < by_offset[i - 1]->end) {
            fail(ErrorCode::OverlappingOffsets,
                 "tensors " + json_quoted(by_offset[i - 1]->name) + " [" + std::to_string(by_offset[i - 1]->begin) +
                     "," + std::to_string(by_offset[i - 1]->end) + ") and " + json_quoted(by_offset[i]->name) + " [" +
                     std::to_string(by_offset[i]->begin) + "," + std::to_string(by_offset[i]->end) +
                     ") overlap");
        }
    }

    const std::byte * buffer = bytes.data() + data_offset;
    for (Entry & e : entries) {
        Tensor t;
        t.dtype = e.dtype;
        t.shape = std::move(e.shape);
        t.data.assign(buffer + e.begin, buffer + e.end);
        ckpt.add(std::move(e.name), std::move(t));
    }
    return ckpt;
}

std::vector<std::byte> serialize_checkpoint(const Checkpoint & ckpt) {
    std::string header = "{";
    bool first = true;
    if (ckpt.has_metadata()) {
        json metadata = json::object();
        for (const auto & [k, v] : ckpt.metadata()) {
            metadata[k] = v;
        }
        header += json_quoted(kMetadataKey) + ":" + metadata.dump();
        first = false;
    }
    std::uint64_t offset = 0;
    for (const auto & [name, tensor] : ckpt.tensors()) {
        validate_tensor(name, tensor);
        if (!first) header += ",";
        first = false;
        const std::uint64_t end = offset + tensor.data.size();
        header += json_quoted(name) + ":{\"dtype\":\"" + std::string(dtype_name(tensor.dtype)) +
                  "\",\"shape\":" + describe_shape(tensor.shape) + ",\"data_offsets\":[" +
                  std::to_string(offset) + "," + std::to_string(end) + "]}";
        offset = end;
    }
    header += "}";
    while (header.size() % 8 != 0) {
        header += ' ';
    }

    std::vector<std::byte> out;
    out.reserve(8 + header.size() + offset);
    const std::uint64_t header_len = header.size();
    out.resize(8);
    std::memcpy(out.data(), &header_len, 8);
    const auto * h = reinterpret_cast<const std::byte *>(header.data());
    out.insert(out.end(), h, h + header.size());
    for (const auto & [name, tensor] : ckpt.tensors()) {
        out.insert(out.end(), tensor.data.begin(), tensor.data.end());
    }
    return out;
}

std::vector<std::byte> read_file_bytes(const std::filesystem::path & path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
        fail(ErrorCode::Io, "cannot read " + path.string() + ": not a regular file");
    }
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) {
        fail(ErrorCode::Io, "cannot open " + path.string());
    }
    const auto size = static_cast<std::size_t>(in.tellg());
    std::vector<std::byte> bytes(size);
    in.seekg(0);
    if (size > 0 && !in.read(reinterpret_cast<char *>(bytes.data()), static_cast<std::streamsize>(size))) {
        fail(ErrorCode::Io, "failed reading " + path.string());
    }
    return bytes;
}

void write_file_atomic(const std::filesystem::path & path, std::span<const std::byte> bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorCode::Io, "cannot open " + tmp.string() + " for writing");
        }
        out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            fail(ErrorCode::Io, "failed writing " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorCode::Io, "cannot move output into place at " + path.string());
    }
}

Checkpoint read_checkpoint(const std::filesystem::path & path) {
    const auto bytes = read_file_bytes(path);
    return parse_checkpoint(bytes);
}

void write_checkpoint(const Checkpoint & ckpt, const std::filesystem::path & path) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint read_sharded_checkpoint(const std::filesystem::path & index_path) {
    const auto raw = read_file_bytes(index_path);
    json index;
    try {
        index = json::parse(std::string_view(reinterpret_cast<const char *>(raw.data()), raw.size()));
    } catch (const json::parse_error & e) {
        fail(ErrorCode::MalformedHeader, "shard index " + index_path.string() + " is not valid JSON: " + e.what());
    } catch (const json::exception & e) {
        fail(ErrorCode::MalformedHeader, "shard index " + index_path.string() + ": " + e.what());
    }
    if (!index.is_object()) {
        fail(ErrorCode::MalformedHeader, "shard index must be a JSON object");
    }
    const json * weight_map = &index;
    if (index.contains("weight_map")) {
        weight_map = &index["weight_map"];
    }
    if (!weight_map->is_object()) {
        fail(ErrorCode::MalformedHeader, "shard index weight_map must be an object");
    }

    std::map<std::string, std::vector<std::string>> by_shard;
    for (auto it = weight_map->begin(); it != weight_map->end(); ++it) {
        if (!it.value().is_string()) {
            fail(ErrorCode::MalformedHeader, "shard index entry " + json_quoted(it.key()) + " is not a file name");
        }
        by_shard[it.value().get<std::string>()].push_back(it.key());
    }

    const auto dir = index_path.parent_path();
    Checkpoint merged;
    for (const auto & [shard, names] : by_shard) {
        Checkpoint part = read_checkpoint(dir / shard);
        for (const std::string & name : names) {
            const Tensor * t = part.find(name);
            if (t == nullptr) {
                fail(ErrorCode::MalformedHeader, "shard " + shard + " lacks indexed tensor " + json_quoted(name));
            }
            merged.add(name, *t);
        }
        if (part.has_metadata() && !merged.has_metadata()) {
            merged.set_metadata_block(part.metadata());
        }
    }
    if (index.contains("metadata") && index["metadata"].is_object()) {
        for (auto it = index["metadata"].begin(); it != index["metadata"].end(); ++it) {
            merged.set_metadata(it.key(), it.value().is_string() ? it.value().get<std::string>() : it.value().dump());
        }
    }
    return merged;
}

std::string content_hash(const Checkpoint & ckpt) {
    if (!ckpt.has_metadata()) {
        return sha256_hex(serialize_checkpoint(ckpt));
    }
    Checkpoint stripped = ckpt;
    stripped.clear_metadata();
    return sha256_hex(serialize_checkpoint(stripped));
}

CompatibilityReport validate_compatibility(const Checkpoint & a, const Checkpoint & b) {
    CompatibilityReport report;
    for (const auto & [name, ta] : a.tensors()) {
        const Tensor * tb = b.find(name);
        if (tb == nullptr) {
            report.missing_in_b.push_back(name);
            continue;
        }
        bool ok = true;
        if (ta.shape != tb->shape) {
            report.shape_mismatches.push_back({name, describe_shape(ta.shape), describe_shape(tb->shape)});
            ok = false;
        }
        if (ta.dtype != tb->dtype) {
            report.dtype_mismatches.push_back(
                {name, std::string(dtype_name(ta.dtype)), std::string(dtype_name(tb->dtype))});
            ok = false;
        }
        if (ok) {
            report.shared.push_back(name);
        }
    }
    for (const auto & [name, tb] : b.tensors()) {
        if (!a.contains(name)) {
            report.missing_in_a.push_back(name);
        }
    }
    return report;
}

std::string CompatibilityReport::to_json() const {
    auto mismatches = [](const std::vector<TensorMismatch> & list) {
        json arr = json::array();
        for (const auto & m : list) {
            arr.push_back({{"name", m.name}, {"a", m.left}, {"b", m.right}});
        }
        return arr;
    };
    json j = {
        {"shared", shared},
        {"missing_in_a", missing_in_a},
        {"missing_in_b", missing_in_b},
        {"shape_mismatches", mismatches(shape_mismatches)},
        {"dtype_mismatches", mismatches(dtype_mismatches)},
    };
    return j.dump();
}

} // namespace wsmerge
