// SPDX-License-Identifier: Apache-2.0
//
// TIES, DARE and SCE merging on top of task vectors.
//
// Every method orders its inputs with canonical_model_order() and reduces
// per element in that order, so outputs are bit-identical under any
// permutation of the inputs and any thread count.

#pragma once

#include "core/task_vector.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace wsmerge {

enum class MergeMethod { TaskArithmetic, Ties, Dare, Sce };

const char * merge_method_name(MergeMethod method);
// Throws InvalidArgument naming the "method" field for unknown names.
MergeMethod parse_merge_method(std::string_view name);

struct MergeParams {
    MergeMethod method = MergeMethod::TaskArithmetic;
    double k = 1.0;       // TIES trim-keep fraction, (0, 1]
    double p = 0.0;       // DARE drop rate, [0, 1)
    double lambda = 1.0;  // TIES final scaling
    double topk = 1.0;    // SCE selection fraction, (0, 1]
    std::uint64_t seed = 0;
    // Per-model scalars for Task Arithmetic and DARE; empty means all 1.
    std::vector<double> alphas;
    std::vector<std::string> exclude_patterns;
    DtypePolicy dtype_policy = DtypePolicy::Source;
    bool force = false;
    unsigned threads = 0;

    // Throws InvalidArgument naming the offending field.
    void validate(std::size_t model_count) const;
    std::vector<double> resolved_alphas(std::size_t model_count) const;
};

using SignMap = std::map<std::string, std::vector<std::int8_t>, std::less<>>;

// Keeps the ceil(k*n) largest-magnitude entries; ties at the threshold keep
// the lower flat index.
std::vector<float> trim_topk_values(std::span<const float> values, double k);
TaskVector trim_topk(const TaskVector & delta, double k);

// sign of the F32 sum across (already ordered) deltas; sign(0) = 0.
SignMap elect_sign(std::span<const TaskVector> trimmed);

// Bernoulli(p) drop per element, survivors scaled by 1/(1-p). The draw for
// element i of tensor `name` is a pure function of (seed, name, i).
std::vector<float> dare_sparsify_values(std::span<const float> values, double p, std::uint64_t seed,
                                        std::string_view tensor_name);
TaskVector dare_sparsify(const TaskVector & delta, double p, std::uint64_t seed);

// Per-tensor kernels. `ordered` deltas are in canonical order with nullptr
// standing for "no delta for this tensor".
std::vector<float> ties_kernel(std::vector<float> base, std::span<const DeltaTensor * const> ordered, double k,
                               double lambda);
std::vector<float> sce_kernel(std::vector<float> base, std::span<const DeltaTensor * const> ordered, double topk,
                              std::string * warning = nullptr);

Checkpoint task_arithmetic_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params);
Checkpoint ties_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params);
// linear_combine(base, [dare_sparsify(delta_i, p, seed ^ i)], alphas) with i
// the canonical position of model i.
Checkpoint dare_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params);
Checkpoint sce_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params);

Checkpoint merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params);

// Convenience: computes task vectors (strict compatibility, honouring
// exclude_patterns) and dispatches to merge().
Checkpoint merge_checkpoints(const Checkpoint & base, std::span<const Checkpoint> models, const MergeParams & params);

} // namespace wsmerge
