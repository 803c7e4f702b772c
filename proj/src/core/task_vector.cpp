// SPDX-License-Identifier: Apache-2.0

#include "core/task_vector.hpp"

#include "core/error.hpp"
#include "core/log.hpp"
#include "core/parallel.hpp"

#include "json.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace wsmerge {

const char * const kToolVersion = "wsmerge 0.3.0";

namespace {

using json = nlohmann::json;

std::filesystem::path sidecar_path(const std::filesystem::path & path) {
    std::filesystem::path p = path;
    p += ".json";
    return p;
}

} // namespace

const DeltaTensor * TaskVector::find(std::string_view name) const {
    auto it = deltas.find(name);
    return it == deltas.end() ? nullptr : &it->second;
}

const char * dtype_policy_name(DtypePolicy policy) {
    switch (policy) {
        case DtypePolicy::Source: return "source";
        case DtypePolicy::F32:    return "f32";
        case DtypePolicy::F16:    return "f16";
        case DtypePolicy::BF16:   return "bf16";
    }
    return "?";
}

DtypePolicy parse_dtype_policy(std::string_view name) {
    if (name == "source") return DtypePolicy::Source;
    if (name == "f32" || name == "F32") return DtypePolicy::F32;
    if (name == "f16" || name == "F16") return DtypePolicy::F16;
    if (name == "bf16" || name == "BF16") return DtypePolicy::BF16;
    fail(ErrorCode::InvalidArgument, "unknown dtype_policy '" + std::string(name) + "'");
}

bool matches_any(std::string_view name, std::span<const std::string> patterns) {
    const std::string n(name);
    return std::any_of(patterns.begin(), patterns.end(),
                       [&](const std::string & p) { return fnmatch(p.c_str(), n.c_str(), 0) == 0; });
}

TaskVector compute_delta(const Checkpoint & finetuned, const Checkpoint & base, const DeltaOptions & options) {
    const CompatibilityReport report = validate_compatibility(finetuned, base);
    if (options.strict && report.has_mismatches()) {
        const TensorMismatch & m =
            report.shape_mismatches.empty() ? report.dtype_mismatches.front() : report.shape_mismatches.front();
        fail(ErrorCode::Incompatible,
             "tensor '" + m.name + "' differs between fine-tuned (" + m.left + ") and base (" + m.right + ")");
    }
    for (const auto & m : report.shape_mismatches) {
        log_warning("skipping '" + m.name + "': shape " + m.left + " vs base " + m.right);
    }
    for (const auto & m : report.dtype_mismatches) {
        log_warning("skipping '" + m.name + "': dtype " + m.left + " vs base " + m.right);
    }
    for (const auto & name : report.missing_in_b) {
        log_warning("tensor '" + name + "' exists only in the fine-tuned checkpoint; excluded");
    }
    for (const auto & name : report.missing_in_a) {
        log_warning("tensor '" + name + "' exists only in the base checkpoint; it will keep base values");
    }
    if (report.shared.empty()) {
        fail(ErrorCode::Incompatible, "fine-tuned and base checkpoints share no compatible tensors");
    }

    TaskVector tv;
    tv.base_id = content_hash(base);
    tv.source_id = content_hash(finetuned);
    for (const std::string & name : report.shared) {
        if (matches_any(name, options.exclude_patterns)) {
            continue;
        }
        const Tensor & ft = finetuned.at(name);
        if (!is_float_dtype(ft.dtype)) {
            log_warning("tensor '" + name + "' has non-float dtype " + std::string(dtype_name(ft.dtype)) +
                        "; excluded from the task vector");
            continue;
        }
        const std::vector<float> t = decode_f32(ft.data, ft.dtype);
        const Tensor & bt = base.at(name);
        const std::vector<float> b = decode_f32(bt.data, bt.dtype);
        DeltaTensor delta;
        delta.shape = ft.shape;
        delta.values.resize(t.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            delta.values[i] = t[i] - b[i];
        }
        tv.deltas.emplace(name, std::move(delta));
    }
    return tv;
}

void check_base(const Checkpoint & base, std::span<const TaskVector> deltas, bool force) {
    if (deltas.empty()) {
        return;
    }
    for (const TaskVector & tv : deltas) {
        if (tv.base_id != deltas.front().base_id) {
            fail(ErrorCode::BaseMismatch, "task vectors were computed against different base checkpoints");
        }
    }
    if (force) {
        return;
    }
    const std::string id = content_hash(base);
    if (deltas.front().base_id != id) {
        fail(ErrorCode::BaseMismatch, "task vector base " + deltas.front().base_id.substr(0, 12) +
                                          " does not match supplied base " + id.substr(0, 12) +
                                          " (use force to override)");
    }
}

std::vector<std::size_t> canonical_model_order(std::span<const TaskVector> deltas, std::span<const double> alphas) {
    std::vector<std::size_t> order(deltas.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (deltas[a].source_id != deltas[b].source_id) {
            return deltas[a].source_id < deltas[b].source_id;
        }
        if (!alphas.empty()) {
            return alphas[a] < alphas[b];
        }
        return false;
    });
    return order;
}

Checkpoint assemble_output(const Checkpoint & base, std::map<std::string, std::vector<float>, std::less<>> values,
                           DtypePolicy policy) {
    Checkpoint out;
    for (const auto & [name, tensor] : base.tensors()) {
        auto it = values.find(name);
        if (it == values.end()) {
            if (is_float_dtype(tensor.dtype) && policy != DtypePolicy::Source) {
                it = values.emplace(name, decode_f32(tensor.data, tensor.dtype)).first;
            } else {
                out.add(name, tensor);
                continue;
            }
        }
        const std::vector<float> & v = it->second;
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (!std::isfinite(v[i])) {
                fail(ErrorCode::NonFinite, "non-finite value produced in tensor '" + name + "' at flat index " +
                                               std::to_string(i));
            }
        }
        DType dtype = tensor.dtype;
        switch (policy) {
            case DtypePolicy::Source: break;
            case DtypePolicy::F32:  dtype = DType::F32; break;
            case DtypePolicy::F16:  dtype = DType::F16; break;
            case DtypePolicy::BF16: dtype = DType::BF16; break;
        }
        Tensor t;
        t.dtype = dtype;
        t.shape = tensor.shape;
        t.data = encode_f32(v, dtype);
        out.add(name, std::move(t));
    }
    return out;
}

void attach_provenance(Checkpoint & out, const Checkpoint & base, const std::string & provenance_json) {
    if (base.has_metadata()) {
        out.set_metadata_block(base.metadata());
    }
    out.set_metadata("merge_provenance", provenance_json);
}

std::map<std::string, std::size_t> source_dtype_histogram(const Checkpoint & ckpt) {
    std::map<std::string, std::size_t> hist;
    for (const auto & [name, t] : ckpt.tensors()) {
        ++hist[std::string(dtype_name(t.dtype))];
    }
    return hist;
}

namespace {

const DeltaTensor & checked_delta(const Checkpoint & base, const std::string & name, const DeltaTensor & delta) {
    const Tensor * bt = base.find(name);
    if (bt == nullptr) {
        fail(ErrorCode::Incompatible, "delta tensor '" + name + "' is not present in the base checkpoint");
    }
    if (bt->shape != delta.shape) {
        fail(ErrorCode::Incompatible, "delta tensor '" + name + "' has shape " + describe_shape(delta.shape) +
                                          " but base has " + describe_shape(bt->shape));
    }
    if (!is_float_dtype(bt->dtype)) {
        fail(ErrorCode::UnsupportedDtype, "base tensor '" + name + "' is not a float tensor");
    }
    return delta;
}

} // namespace

Checkpoint apply_delta(const Checkpoint & base, const TaskVector & delta, double scale, const ApplyOptions & options) {
    check_base(base, std::span(&delta, 1), options.force);
    const float s = static_cast<float>(scale);
    std::map<std::string, std::vector<float>, std::less<>> values;
    for (const auto & [name, d] : delta.deltas) {
        checked_delta(base, name, d);
        const Tensor & bt = base.at(name);
        std::vector<float> v = decode_f32(bt.data, bt.dtype);
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = add_update(v[i], s * d.values[i]);
        }
        values.emplace(name, std::move(v));
    }
    Checkpoint out = assemble_output(base, std::move(values), options.dtype_policy);
    const json provenance = {
        {"operation", "apply_delta"},
        {"scale", scale},
        {"base_id", delta.base_id},
        {"source_ids", json::array({delta.source_id})},
        {"dtype_policy", dtype_policy_name(options.dtype_policy)},
        {"source_dtypes", source_dtype_histogram(base)},
        {"tool_version", kToolVersion},
    };
    attach_provenance(out, base, provenance.dump());
    return out;
}

std::map<std::string, std::vector<float>, std::less<>> combine_tensors(const Checkpoint & base,
                                                                        std::span<const TaskVector> deltas,
                                                                        std::span<const std::size_t> order,
                                                                        unsigned threads, const TensorKernel & kernel) {
    std::set<std::string, std::less<>> name_set;
    for (const TaskVector & tv : deltas) {
        for (const auto & [name, d] : tv.deltas) {
            checked_delta(base, name, d);
            for (std::size_t i = 0; i < d.values.size(); ++i) {
                if (!std::isfinite(d.values[i])) {
                    fail(ErrorCode::NonFinite, "task vector for '" + name + "' holds a non-finite value at flat index " +
                                                   std::to_string(i));
                }
            }
            name_set.insert(name);
        }
    }
    const std::vector<std::string> names(name_set.begin(), name_set.end());
    for (const std::string & name : names) {
        for (std::size_t idx : order) {
            if (deltas[idx].find(name) == nullptr) {
                log_warning("tensor '" + name + "' absent from task vector " + deltas[idx].source_id.substr(0, 12) +
                            "; treated as zero");
            }
        }
    }

    std::vector<std::vector<float>> results(names.size());
    std::vector<std::string> warnings(names.size());
    parallel_for(names.size(), threads, [&](std::size_t t) {
        const std::string & name = names[t];
        const Tensor & bt = base.at(name);
        std::vector<float> b = decode_f32(bt.data, bt.dtype);
        for (std::size_t i = 0; i < b.size(); ++i) {
            if (!std::isfinite(b[i])) {
                fail(ErrorCode::NonFinite,
                     "base tensor '" + name + "' holds a non-finite value at flat index " + std::to_string(i));
            }
        }
        std::vector<const DeltaTensor *> ordered;
        ordered.reserve(order.size());
        for (std::size_t idx : order) {
            ordered.push_back(deltas[idx].find(name));
        }
        results[t] = kernel(name, std::move(b), ordered, warnings[t]);
    });

    std::map<std::string, std::vector<float>, std::less<>> values;
    for (std::size_t t = 0; t < names.size(); ++t) {
        if (!warnings[t].empty()) {
            log_warning(warnings[t]);
        }
        values.emplace(names[t], std::move(results[t]));
    }
    return values;
}

std::vector<float> combine_linear(std::vector<float> base, std::span<const DeltaTensor * const> ordered,
                                  std::span<const float> alphas) {
    std::vector<float> sum;
    for (std::size_t j = 0; j < ordered.size(); ++j) {
        if (ordered[j] == nullptr) {
            continue;
        }
        const std::vector<float> & d = ordered[j]->values;
        if (sum.empty()) {
            sum.resize(base.size());
            for (std::size_t i = 0; i < base.size(); ++i) {
                sum[i] = alphas[j] * d[i];
            }
        } else {
            for (std::size_t i = 0; i < base.size(); ++i) {
                sum[i] += alphas[j] * d[i];
            }
        }
    }
    if (!sum.empty()) {
        for (std::size_t i = 0; i < base.size(); ++i) {
            base[i] = add_update(base[i], sum[i]);
        }
    }
    return base;
}

Checkpoint linear_combine(const Checkpoint & base, std::span<const TaskVector> deltas, std::span<const double> alphas,
                          const ApplyOptions & options) {
    if (deltas.empty()) {
        fail(ErrorCode::InvalidArgument, "linear_combine needs at least one task vector");
    }
    if (deltas.size() != alphas.size()) {
        fail(ErrorCode::InvalidArgument, "got " + std::to_string(deltas.size()) + " task vectors but " +
                                             std::to_string(alphas.size()) + " alphas");
    }
    check_base(base, deltas, options.force);
    const std::vector<std::size_t> order = canonical_model_order(deltas, alphas);
    std::vector<float> ordered_alphas;
    for (std::size_t idx : order) {
        ordered_alphas.push_back(static_cast<float>(alphas[idx]));
    }

    auto values = combine_tensors(base, deltas, order, options.threads,
                                  [&](const std::string &, std::vector<float> b,
                                      std::span<const DeltaTensor * const> ordered, std::string &) {
                                      return combine_linear(std::move(b), ordered, ordered_alphas);
                                  });

    Checkpoint out = assemble_output(base, std::move(values), options.dtype_policy);
    json sources = json::array();
    json alpha_list = json::array();
    for (std::size_t idx : order) {
        sources.push_back(deltas[idx].source_id);
        alpha_list.push_back(alphas[idx]);
    }
    const json provenance = {
        {"operation", "linear_combine"},
        {"alphas", alpha_list},
        {"base_id", deltas.front().base_id},
        {"source_ids", sources},
        {"dtype_policy", dtype_policy_name(options.dtype_policy)},
        {"source_dtypes", source_dtype_histogram(base)},
        {"tool_version", kToolVersion},
    };
    attach_provenance(out, base, provenance.dump());
    return out;
}

void write_task_vector(const TaskVector & tv, const std::filesystem::path & path) {
    Checkpoint ckpt;
    for (const auto & [name, d] : tv.deltas) {
        ckpt.add(name, make_f32_tensor(d.shape, d.values));
    }
    write_checkpoint(ckpt, path);
    const json sidecar = {{"base_id", tv.base_id}, {"source_id", tv.source_id}, {"tool_version", kToolVersion}};
    const std::string text = sidecar.dump(2) + "\n";
    write_file_atomic(sidecar_path(path), std::as_bytes(std::span(text.data(), text.size())));
}

TaskVector read_task_vector(const std::filesystem::path & path) {
    const Checkpoint ckpt = read_checkpoint(path);
    const auto raw = read_file_bytes(sidecar_path(path));
    json sidecar;
    try {
        sidecar = json::parse(std::string_view(reinterpret_cast<const char *>(raw.data()), raw.size()));
    } catch (const json::exception & e) {
        fail(ErrorCode::MalformedHeader, "task vector sidecar is not valid JSON: " + std::string(e.what()));
    }
    if (!sidecar.is_object() || !sidecar.contains("base_id") || !sidecar.contains("source_id") ||
        !sidecar["base_id"].is_string() || !sidecar["source_id"].is_string()) {
        fail(ErrorCode::MalformedHeader, "task vector sidecar needs string fields base_id and source_id");
    }
    TaskVector tv;
    tv.base_id = sidecar["base_id"].get<std::string>();
    tv.source_id = sidecar["source_id"].get<std::string>();
    for (const auto & [name, t] : ckpt.tensors()) {
        if (t.dtype != DType::F32) {
            fail(ErrorCode::UnsupportedDtype, "task vector tensor '" + name + "' is not F32");
        }
        tv.deltas.emplace(name, DeltaTensor{t.shape, decode_f32(t.data, t.dtype)});
    }
    return tv;
}

} // namespace wsmerge
