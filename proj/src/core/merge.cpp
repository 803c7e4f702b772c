// SPDX-License-Identifier: Apache-2.0

#include "core/merge.hpp"

#include "core/error.hpp"
#include "core/fraction.hpp"
#include "core/philox.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wsmerge {

namespace {

using json = nlohmann::json;

constexpr std::int8_t sign_of(float v) {
    return v > 0.0f ? 1 : (v < 0.0f ? -1 : 0);
}

// Indices of the `keep` largest scores; equal scores prefer the lower index.
std::vector<bool> top_mask(std::span<const float> scores, std::size_t keep) {
    const std::size_t n = scores.size();
    std::vector<bool> mask(n, keep >= n);
    if (keep == 0 || keep >= n) {
        return mask;
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep - 1), idx.end(),
                     [&](std::size_t a, std::size_t b) {
                         if (scores[a] != scores[b]) {
                             return scores[a] > scores[b];
                         }
                         return a < b;
                     });
    for (std::size_t i = 0; i < keep; ++i) {
        mask[idx[i]] = true;
    }
    return mask;
}

void require_fraction(double value, const char * field, bool allow_zero, bool allow_one) {
    const bool ok = std::isfinite(value) && (allow_zero ? value >= 0.0 : value > 0.0) &&
                    (allow_one ? value <= 1.0 : value < 1.0);
    if (!ok) {
        fail(ErrorCode::InvalidArgument, std::string("field '") + field + "' out of range: " + std::to_string(value));
    }
}

std::vector<std::size_t> model_order(std::span<const TaskVector> deltas, const MergeParams & params) {
    if (params.method == MergeMethod::TaskArithmetic || params.method == MergeMethod::Dare) {
        const auto alphas = params.resolved_alphas(deltas.size());
        return canonical_model_order(deltas, alphas);
    }
    return canonical_model_order(deltas, {});
}

Checkpoint finish(const Checkpoint & base, std::span<const TaskVector> deltas, std::span<const std::size_t> order,
                  const MergeParams & params, std::map<std::string, std::vector<float>, std::less<>> values) {
    Checkpoint out = assemble_output(base, std::move(values), params.dtype_policy);
    json sources = json::array();
    json alphas = json::array();
    const auto resolved = params.resolved_alphas(deltas.size());
    for (std::size_t idx : order) {
        sources.push_back(deltas[idx].source_id);
        alphas.push_back(resolved[idx]);
    }
    const json provenance = {
        {"operation", "merge"},
        {"method", merge_method_name(params.method)},
        {"params",
         {{"k", params.k}, {"p", params.p}, {"lambda", params.lambda}, {"topk", params.topk}, {"seed", params.seed}}},
        {"alphas", alphas},
        {"exclude_patterns", params.exclude_patterns},
        {"base_id", deltas.front().base_id},
        {"source_ids", sources},
        {"dtype_policy", dtype_policy_name(params.dtype_policy)},
        {"source_dtypes", source_dtype_histogram(base)},
        {"tool_version", kToolVersion},
    };
    attach_provenance(out, base, provenance.dump());
    return out;
}

} // namespace

const char * merge_method_name(MergeMethod method) {
    switch (method) {
        case MergeMethod::TaskArithmetic: return "task_arithmetic";
        case MergeMethod::Ties:           return "ties";
        case MergeMethod::Dare:           return "dare";
        case MergeMethod::Sce:            return "sce";
    }
    return "?";
}

MergeMethod parse_merge_method(std::string_view name) {
    if (name == "task_arithmetic") return MergeMethod::TaskArithmetic;
    if (name == "ties")            return MergeMethod::Ties;
    if (name == "dare")            return MergeMethod::Dare;
    if (name == "sce")             return MergeMethod::Sce;
    fail(ErrorCode::InvalidArgument, "field 'method': unknown merge method '" + std::string(name) +
                                         "' (expected task_arithmetic, ties, dare or sce)");
}

void MergeParams::validate(std::size_t model_count) const {
    if (model_count == 0) {
        fail(ErrorCode::InvalidArgument, "field 'models': at least one fine-tuned model is required");
    }
    if (!alphas.empty() && alphas.size() != model_count) {
        fail(ErrorCode::InvalidArgument, "field 'alphas': expected " + std::to_string(model_count) +
                                             " values, got " + std::to_string(alphas.size()));
    }
    for (double a : alphas) {
        if (!std::isfinite(a)) {
            fail(ErrorCode::InvalidArgument, "field 'alphas': values must be finite");
        }
    }
    switch (method) {
        case MergeMethod::TaskArithmetic:
            break;
        case MergeMethod::Ties:
            require_fraction(k, "k", false, true);
            if (!std::isfinite(lambda)) {
                fail(ErrorCode::InvalidArgument, "field 'lambda' must be finite");
            }
            break;
        case MergeMethod::Dare:
            require_fraction(p, "p", true, false);
            break;
        case MergeMethod::Sce:
            require_fraction(topk, "topk", false, true);
            break;
    }
}

std::vector<double> MergeParams::resolved_alphas(std::size_t model_count) const {
    return alphas.empty() ? std::vector<double>(model_count, 1.0) : alphas;
}

std::vector<float> trim_topk_values(std::span<const float> values, double k) {
    require_fraction(k, "k", false, true);
    const std::size_t keep = fraction_ceil(k, values.size());
    std::vector<float> magnitude(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        magnitude[i] = std::fabs(values[i]);
    }
    const std::vector<bool> mask = top_mask(magnitude, keep);
    std::vector<float> out(values.begin(), values.end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!mask[i]) {
            out[i] = 0.0f;
        }
    }
    return out;
}

TaskVector trim_topk(const TaskVector & delta, double k) {
    TaskVector out;
    out.base_id = delta.base_id;
    out.source_id = delta.source_id;
    for (const auto & [name, d] : delta.deltas) {
        out.deltas.emplace(name, DeltaTensor{d.shape, trim_topk_values(d.values, k)});
    }
    return out;
}

SignMap elect_sign(std::span<const TaskVector> trimmed) {
    if (trimmed.empty()) {
        fail(ErrorCode::InvalidArgument, "elect_sign needs at least one task vector");
    }
    const auto order = canonical_model_order(trimmed, {});
    SignMap signs;
    for (const auto & [name, first] : trimmed[order.front()].deltas) {
        std::vector<float> sum(first.values.size(), 0.0f);
        bool started = false;
        for (std::size_t idx : order) {
            const DeltaTensor * d = trimmed[idx].find(name);
            if (d == nullptr) {
                fail(ErrorCode::Incompatible, "elect_sign: tensor '" + name + "' missing from a task vector");
            }
            if (d->values.size() != sum.size()) {
                fail(ErrorCode::Incompatible, "elect_sign: tensor '" + name + "' differs in size across deltas");
            }
            for (std::size_t i = 0; i < sum.size(); ++i) {
                sum[i] = started ? sum[i] + d->values[i] : d->values[i];
            }
            started = true;
        }
        std::vector<std::int8_t> s(sum.size());
        for (std::size_t i = 0; i < sum.size(); ++i) {
            s[i] = sign_of(sum[i]);
        }
        signs.emplace(name, std::move(s));
    }
    return signs;
}

std::vector<float> dare_sparsify_values(std::span<const float> values, double p, std::uint64_t seed,
                                        std::string_view tensor_name) {
    if (!(p >= 0.0 && p < 1.0)) {
        fail(ErrorCode::InvalidArgument, "field 'p': drop rate must lie in [0, 1), got " + std::to_string(p));
    }
    std::vector<float> out(values.begin(), values.end());
    if (p == 0.0) {
        return out;
    }
    const float rescale = static_cast<float>(1.0 / (1.0 - p));
    const std::uint64_t stream = fnv1a64(tensor_name);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double u = philox_uniform(seed, stream, i);
        out[i] = u < p ? 0.0f : out[i] * rescale;
    }
    return out;
}

TaskVector dare_sparsify(const TaskVector & delta, double p, std::uint64_t seed) {
    TaskVector out;
    out.base_id = delta.base_id;
    out.source_id = delta.source_id;
    for (const auto & [name, d] : delta.deltas) {
        out.deltas.emplace(name, DeltaTensor{d.shape, dare_sparsify_values(d.values, p, seed, name)});
    }
    return out;
}

std::vector<float> ties_kernel(std::vector<float> base, std::span<const DeltaTensor * const> ordered, double k,
                               double lambda) {
    const std::size_t n = base.size();
    std::vector<std::vector<float>> trimmed;
    trimmed.reserve(ordered.size());
    for (const DeltaTensor * d : ordered) {
        trimmed.push_back(d == nullptr ? std::vector<float>(n, 0.0f) : trim_topk_values(d->values, k));
    }
    const float scale = static_cast<float>(lambda);
    for (std::size_t i = 0; i < n; ++i) {
        float vote = trimmed.front()[i];
        for (std::size_t j = 1; j < trimmed.size(); ++j) {
            vote += trimmed[j][i];
        }
        const std::int8_t elected = sign_of(vote);
        if (elected == 0) {
            continue;
        }
        float acc = 0.0f;
        std::size_t count = 0;
        for (const auto & t : trimmed) {
            const float v = t[i];
            if (v != 0.0f && sign_of(v) == elected) {
                acc = count == 0 ? v : acc + v;
                ++count;
            }
        }
        if (count > 0) {
            base[i] = add_update(base[i], scale * (acc / static_cast<float>(count)));
        }
    }
    return base;
}

std::vector<float> sce_kernel(std::vector<float> base, std::span<const DeltaTensor * const> ordered, double topk,
                              std::string * warning) {
    const std::size_t n = base.size();
    const std::size_t models = ordered.size();
    std::vector<std::vector<float>> deltas;
    deltas.reserve(models);
    for (const DeltaTensor * d : ordered) {
        deltas.push_back(d == nullptr ? std::vector<float>(n, 0.0f) : d->values);
    }

    // Select: population variance across models, keep the top fraction.
    const float inv_models = 1.0f / static_cast<float>(models);
    std::vector<float> variance(n);
    for (std::size_t i = 0; i < n; ++i) {
        float sum = deltas.front()[i];
        for (std::size_t j = 1; j < models; ++j) {
            sum += deltas[j][i];
        }
        const float mean = sum * inv_models;
        float sq = 0.0f;
        for (std::size_t j = 0; j < models; ++j) {
            const float c = deltas[j][i] - mean;
            sq += c * c;
        }
        variance[i] = sq * inv_models;
    }
    const std::vector<bool> selected = top_mask(variance, fraction_ceil(topk, n));
    for (auto & d : deltas) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!selected[i]) {
                d[i] = 0.0f;
            }
        }
    }

    // Calculate: per-model share of the selected squared update mass.
    std::vector<double> mass(models, 0.0);
    double total = 0.0;
    for (std::size_t j = 0; j < models; ++j) {
        for (float v : deltas[j]) {
            mass[j] += static_cast<double>(v) * static_cast<double>(v);
        }
        total += mass[j];
    }
    if (total == 0.0) {
        if (warning != nullptr) {
            *warning = "sce: selected update mass is zero; tensor copied from base";
        }
        return base;
    }
    std::vector<float> eta(models);
    for (std::size_t j = 0; j < models; ++j) {
        eta[j] = static_cast<float>(mass[j] / total);
    }

    // Erase sign conflicts against the coefficient-weighted vote, then take
    // the coefficient-normalised sum of survivors.
    for (std::size_t i = 0; i < n; ++i) {
        float vote = eta[0] * deltas[0][i];
        for (std::size_t j = 1; j < models; ++j) {
            vote += eta[j] * deltas[j][i];
        }
        const std::int8_t elected = sign_of(vote);
        if (elected == 0) {
            continue;
        }
        float num = 0.0f;
        float den = 0.0f;
        bool any = false;
        for (std::size_t j = 0; j < models; ++j) {
            const float v = deltas[j][i];
            if (v != 0.0f && sign_of(v) == elected) {
                num = any ? num + eta[j] * v : eta[j] * v;
                den = any ? den + eta[j] : eta[j];
                any = true;
            }
        }
        if (any && den > 0.0f) {
            base[i] = add_update(base[i], num / den);
        }
    }
    return base;
}

Checkpoint task_arithmetic_merge(const Checkpoint & base, std::span<const TaskVector> deltas,
                                 const MergeParams & params) {
    params.validate(deltas.size());
    const auto alphas = params.resolved_alphas(deltas.size());
    check_base(base, deltas, params.force);
    const auto order = model_order(deltas, params);
    std::vector<float> ordered_alphas;
    for (std::size_t idx : order) {
        ordered_alphas.push_back(static_cast<float>(alphas[idx]));
    }
    auto values = combine_tensors(base, deltas, order, params.threads,
                                  [&](const std::string &, std::vector<float> b,
                                      std::span<const DeltaTensor * const> ordered, std::string &) {
                                      return combine_linear(std::move(b), ordered, ordered_alphas);
                                  });
    return finish(base, deltas, order, params, std::move(values));
}

Checkpoint ties_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params) {
    params.validate(deltas.size());
    check_base(base, deltas, params.force);
    const auto order = model_order(deltas, params);
    auto values = combine_tensors(base, deltas, order, params.threads,
                                  [&](const std::string &, std::vector<float> b,
                                      std::span<const DeltaTensor * const> ordered, std::string &) {
                                      return ties_kernel(std::move(b), ordered, params.k, params.lambda);
                                  });
    return finish(base, deltas, order, params, std::move(values));
}

Checkpoint dare_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params) {
    params.validate(deltas.size());
    const auto alphas = params.resolved_alphas(deltas.size());
    check_base(base, deltas, params.force);
    const auto order = model_order(deltas, params);
    std::vector<float> ordered_alphas;
    std::vector<std::uint64_t> seeds;
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        ordered_alphas.push_back(static_cast<float>(alphas[order[pos]]));
        seeds.push_back(params.seed ^ static_cast<std::uint64_t>(pos));
    }
    auto values = combine_tensors(
        base, deltas, order, params.threads,
        [&](const std::string & name, std::vector<float> b, std::span<const DeltaTensor * const> ordered,
            std::string &) {
            std::vector<DeltaTensor> sparse(ordered.size());
            std::vector<const DeltaTensor *> view(ordered.size(), nullptr);
            for (std::size_t pos = 0; pos < ordered.size(); ++pos) {
                if (ordered[pos] == nullptr) {
                    continue;
                }
                sparse[pos].shape = ordered[pos]->shape;
                sparse[pos].values = dare_sparsify_values(ordered[pos]->values, params.p, seeds[pos], name);
                view[pos] = &sparse[pos];
            }
            return combine_linear(std::move(b), view, ordered_alphas);
        });
    return finish(base, deltas, order, params, std::move(values));
}

Checkpoint sce_merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params) {
    params.validate(deltas.size());
    check_base(base, deltas, params.force);
    const auto order = model_order(deltas, params);
    auto values = combine_tensors(base, deltas, order, params.threads,
                                  [&](const std::string & name, std::vector<float> b,
                                      std::span<const DeltaTensor * const> ordered, std::string & warning) {
                                      auto out = sce_kernel(std::move(b), ordered, params.topk, &warning);
                                      if (!warning.empty()) {
                                          warning = "tensor '" + name + "': " + warning;
                                      }
                                      return out;
                                  });
    return finish(base, deltas, order, params, std::move(values));
}

Checkpoint merge(const Checkpoint & base, std::span<const TaskVector> deltas, const MergeParams & params) {
    switch (params.method) {
        case MergeMethod::TaskArithmetic: return task_arithmetic_merge(base, deltas, params);
        case MergeMethod::Ties:           return ties_merge(base, deltas, params);
        case MergeMethod::Dare:           return dare_merge(base, deltas, params);
        case MergeMethod::Sce:            return sce_merge(base, deltas, params);
    }
    fail(ErrorCode::InvalidArgument, "unknown merge method");
}

Checkpoint merge_checkpoints(const Checkpoint & base, std::span<const Checkpoint> models, const MergeParams & params) {
    params.validate(models.size());
    DeltaOptions options;
    options.exclude_patterns = params.exclude_patterns;
    std::vector<TaskVector> deltas;
    deltas.reserve(models.size());
    for (const Checkpoint & m : models) {
        deltas.push_back(compute_delta(m, base, options));
    }
    return merge(base, deltas, params);
}

} // namespace wsmerge
