// SPDX-License-Identifier: Apache-2.0
//
// Task vectors (fine-tuned minus base, per tensor, in F32) and Task
// Arithmetic: merged = base + sum_i alpha_i * delta_i.

#pragma once

#include "core/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace wsmerge {

struct DeltaTensor {
    std::vector<std::uint64_t> shape;
    std::vector<float> values;

    bool operator==(const DeltaTensor &) const = default;
};

struct TaskVector {
    std::string base_id;
    std::string source_id;
    std::map<std::string, DeltaTensor, std::less<>> deltas;

    const DeltaTensor * find(std::string_view name) const;
};

enum class DtypePolicy { Source, F32, F16, BF16 };

const char * dtype_policy_name(DtypePolicy policy);
DtypePolicy parse_dtype_policy(std::string_view name);

struct DeltaOptions {
    // Shape or dtype mismatches on a shared name throw when strict, and are
    // skipped with a warning otherwise.
    bool strict = true;
    // fnmatch-style patterns; matching tensors get no delta and stay at base.
    std::vector<std::string> exclude_patterns;
};

bool matches_any(std::string_view name, std::span<const std::string> patterns);

TaskVector compute_delta(const Checkpoint & finetuned, const Checkpoint & base, const DeltaOptions & options = {});

struct ApplyOptions {
    bool force = false;
    DtypePolicy dtype_policy = DtypePolicy::Source;
    // 0 means WSMERGE_THREADS or hardware concurrency.
    unsigned threads = 0;
};

Checkpoint apply_delta(const Checkpoint & base, const TaskVector & delta, double scale, const ApplyOptions & options = {});

// base + sum_i alphas[i] * deltas[i]. Summation order follows
// canonical_model_order(), never the caller's order.
Checkpoint linear_combine(const Checkpoint & base, std::span<const TaskVector> deltas, std::span<const double> alphas,
                          const ApplyOptions & options = {});

// Indices of `deltas` sorted by (source_id, alpha). Identical keys imply
// identical contributions, so any tie order gives the same bits.
std::vector<std::size_t> canonical_model_order(std::span<const TaskVector> deltas, std::span<const double> alphas);

// Checks every delta was computed against `base`; throws BaseMismatch unless forced.
void check_base(const Checkpoint & base, std::span<const TaskVector> deltas, bool force);

// base + update, leaving the base bits untouched when the update is zero.
inline float add_update(float base, float update) {
    return update == 0.0f ? base : base + update;
}

// Per-tensor combination step. `ordered` holds one entry per model in
// canonical order, nullptr where that model has no delta for the tensor.
// Returns the output values; may set `warning` for the caller to log.
using TensorKernel = std::function<std::vector<float>(const std::string & name, std::vector<float> base,
                                                      std::span<const DeltaTensor * const> ordered,
                                                      std::string & warning)>;

// Runs `kernel` over every tensor named by any delta, in parallel. Validates
// names/shapes against base and rejects non-finite inputs beforehand.
// Results do not depend on the thread count.
std::map<std::string, std::vector<float>, std::less<>> combine_tensors(const Checkpoint & base,
                                                                        std::span<const TaskVector> deltas,
                                                                        std::span<const std::size_t> order,
                                                                        unsigned threads, const TensorKernel & kernel);

// sum_j alphas[j] * ordered[j] accumulated in F32 in the given order, added
// to base. Missing deltas contribute nothing.
std::vector<float> combine_linear(std::vector<float> base, std::span<const DeltaTensor * const> ordered,
                                  std::span<const float> alphas);

// Persistence: deltas as an F32 checkpoint plus `<path>.json` holding
// {base_id, source_id, tool_version}.
void write_task_vector(const TaskVector & tv, const std::filesystem::path & path);
TaskVector read_task_vector(const std::filesystem::path & path);

// Assembles an output checkpoint from per-tensor F32 values. Tensors absent
// from `values` are copied from base verbatim. Non-finite results throw.
Checkpoint assemble_output(const Checkpoint & base, std::map<std::string, std::vector<float>, std::less<>> values,
                           DtypePolicy policy);

// Attaches the provenance record under metadata key "merge_provenance",
// keeping any metadata the base carried.
void attach_provenance(Checkpoint & out, const Checkpoint & base, const std::string & provenance_json);

// dtype name -> tensor count, recorded in provenance.
std::map<std::string, std::size_t> source_dtype_histogram(const Checkpoint & ckpt);

extern const char * const kToolVersion;

} // namespace wsmerge
