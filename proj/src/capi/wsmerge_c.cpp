// SPDX-License-Identifier: Apache-2.0

#include "wsmerge/wsmerge.h"

#include "core/activation_stats.hpp"
#include "core/alignment.hpp"
#include "core/checkpoint.hpp"
#include "core/error.hpp"
#include "core/log.hpp"
#include "core/merge.hpp"
#include "core/sha256.hpp"
#include "core/task_vector.hpp"

#include "json.hpp"

#include <cstdlib>
#include <cstring>
#include <iterator>
#include <new>
#include <set>
#include <string>
#include <vector>

using namespace wsmerge;
using json = nlohmann::json;

struct wsm_checkpoint {
    Checkpoint ckpt;
};

struct wsm_task_vector {
    TaskVector tv;
};

struct wsm_dump {
    RepresentationDump dump;
};

namespace {

thread_local std::string g_last_error;

wsm_status to_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument:     return WSM_ERR_INVALID_ARGUMENT;
        case ErrorCode::Io:                  return WSM_ERR_IO;
        case ErrorCode::Truncated:           return WSM_ERR_TRUNCATED;
        case ErrorCode::MalformedHeader:     return WSM_ERR_MALFORMED_HEADER;
        case ErrorCode::OverlappingOffsets:  return WSM_ERR_OVERLAPPING_OFFSETS;
        case ErrorCode::OffsetOutOfRange:    return WSM_ERR_OFFSET_OUT_OF_RANGE;
        case ErrorCode::UnsupportedDtype:    return WSM_ERR_UNSUPPORTED_DTYPE;
        case ErrorCode::DuplicateTensor:     return WSM_ERR_DUPLICATE_TENSOR;
        case ErrorCode::Incompatible:        return WSM_ERR_INCOMPATIBLE;
        case ErrorCode::BaseMismatch:        return WSM_ERR_BASE_MISMATCH;
        case ErrorCode::FingerprintMismatch: return WSM_ERR_FINGERPRINT;
        case ErrorCode::NonFinite:           return WSM_ERR_NON_FINITE;
        case ErrorCode::ZeroVariance:        return WSM_ERR_ZERO_VARIANCE;
        case ErrorCode::RankDeficient:       return WSM_ERR_RANK_DEFICIENT;
        case ErrorCode::NumericalRange:      return WSM_ERR_NUMERICAL_RANGE;
    }
    return WSM_ERR_INTERNAL;
}

template <typename Fn>
wsm_status guard(Fn && fn) {
    try {
        fn();
        return WSM_OK;
    } catch (const Error & e) {
        g_last_error = e.what();
        return to_status(e.code());
    } catch (const json::exception & e) {
        g_last_error = e.what();
        return WSM_ERR_MALFORMED_HEADER;
    } catch (const std::bad_alloc &) {
        g_last_error = "out of memory";
        return WSM_ERR_INTERNAL;
    } catch (const std::exception & e) {
        g_last_error = e.what();
        return WSM_ERR_INTERNAL;
    } catch (...) {
        g_last_error = "unknown error";
        return WSM_ERR_INTERNAL;
    }
}

void require(const void * p, const char * what) {
    if (p == nullptr) {
        fail(ErrorCode::InvalidArgument, std::string(what) + " must not be NULL");
    }
}

char * dup_string(const std::string & s) {
    char * out = static_cast<char *>(std::malloc(s.size() + 1));
    if (out == nullptr) {
        throw std::bad_alloc();
    }
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void set_out(char ** out, const std::string & s) {
    if (out != nullptr) {
        *out = dup_string(s);
    }
}

std::vector<std::string> string_list(const char * const * items, std::size_t count) {
    std::vector<std::string> out;
    if (count > 0) {
        require(items, "string list");
    }
    for (std::size_t i = 0; i < count; ++i) {
        require(items[i], "string list entry");
        out.emplace_back(items[i]);
    }
    return out;
}

const Checkpoint::TensorMap::value_type & tensor_at(const Checkpoint & ckpt, std::size_t index) {
    if (index >= ckpt.size()) {
        fail(ErrorCode::InvalidArgument, "tensor index " + std::to_string(index) + " out of range (" +
                                             std::to_string(ckpt.size()) + " tensors)");
    }
    auto it = ckpt.tensors().begin();
    std::advance(it, static_cast<std::ptrdiff_t>(index));
    return *it;
}

DtypePolicy policy_or_source(const char * name) {
    return name == nullptr ? DtypePolicy::Source : parse_dtype_policy(name);
}

std::vector<ActivationCountTable> read_tables(const char * const * paths, std::size_t count) {
    std::vector<ActivationCountTable> tables;
    for (const auto & p : string_list(paths, count)) {
        auto part = read_count_tables(p);
        tables.insert(tables.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return tables;
}

SelectivityOptions selectivity_options(const wsm_selectivity_params * params) {
    wsm_selectivity_params defaults;
    wsm_selectivity_params_init(&defaults);
    const wsm_selectivity_params & p = params != nullptr ? *params : defaults;
    SelectivityOptions opt;
    opt.rho = p.rho;
    opt.tau.mode = p.tau_absolute ? ThresholdMode::Absolute : ThresholdMode::Percentile;
    opt.tau.value = p.tau;
    opt.pool_across_spans = p.pool_across_spans != 0;
    if (p.span != nullptr) {
        opt.spans.push_back(parse_span(p.span));
    }
    return opt;
}

std::string layer_csv_all(const std::vector<SelectivityReport> & reports) {
    std::set<std::string> languages;
    for (const auto & r : reports) {
        languages.insert(r.languages.begin(), r.languages.end());
    }
    std::string csv = "span,layer";
    for (const auto & lang : languages) {
        csv += "," + lang;
    }
    csv += "\n";
    for (const auto & r : reports) {
        const LayerCountTable t = layer_count_report(r);
        for (std::size_t l = 0; l < r.layers; ++l) {
            csv += std::string(span_name(r.span)) + "," + std::to_string(l);
            for (const auto & lang : languages) {
                auto it = std::find(t.languages.begin(), t.languages.end(), lang);
                csv += ",";
                if (it != t.languages.end()) {
                    csv += std::to_string(t.counts[l][static_cast<std::size_t>(it - t.languages.begin())]);
                }
            }
            csv += "\n";
        }
    }
    return csv;
}

const ActivationCountTable & pick_span(const std::vector<ActivationCountTable> & tables, const char * span,
                                       const char * path) {
    if (span == nullptr) {
        if (tables.size() != 1) {
            fail(ErrorCode::InvalidArgument, std::string(path) + " holds several spans; choose one");
        }
        return tables.front();
    }
    const Span s = parse_span(span);
    for (const auto & t : tables) {
        if (t.span == s) {
            return t;
        }
    }
    fail(ErrorCode::InvalidArgument, std::string(path) + " has no " + span + " counts");
}

Eigen::MatrixXd from_row_major(const double * data, std::size_t n, std::size_t d) {
    Eigen::MatrixXd m(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            m(i, j) = data[i * d + j];
        }
    }
    return m;
}

wsm_log_callback g_log_callback = nullptr;
void * g_log_user = nullptr;

} // namespace

extern "C" {

const char * wsm_version(void) {
    return kToolVersion;
}

const char * wsm_status_name(wsm_status status) {
    switch (status) {
        case WSM_OK:                      return "ok";
        case WSM_ERR_INVALID_ARGUMENT:    return "invalid_argument";
        case WSM_ERR_IO:                  return "io_error";
        case WSM_ERR_TRUNCATED:           return "truncated_file";
        case WSM_ERR_MALFORMED_HEADER:    return "malformed_header";
        case WSM_ERR_OVERLAPPING_OFFSETS: return "overlapping_offsets";
        case WSM_ERR_OFFSET_OUT_OF_RANGE: return "offset_out_of_range";
        case WSM_ERR_UNSUPPORTED_DTYPE:   return "unsupported_dtype";
        case WSM_ERR_DUPLICATE_TENSOR:    return "duplicate_tensor";
        case WSM_ERR_INCOMPATIBLE:        return "incompatible";
        case WSM_ERR_BASE_MISMATCH:       return "base_mismatch";
        case WSM_ERR_FINGERPRINT:         return "fingerprint_mismatch";
        case WSM_ERR_NON_FINITE:          return "non_finite";
        case WSM_ERR_ZERO_VARIANCE:       return "zero_variance";
        case WSM_ERR_RANK_DEFICIENT:      return "rank_deficient";
        case WSM_ERR_NUMERICAL_RANGE:     return "numerical_range";
        case WSM_ERR_INTERNAL:            return "internal_error";
    }
    return "unknown";
}

const char * wsm_last_error_message(void) {
    return g_last_error.c_str();
}

void wsm_string_free(char * str) {
    std::free(str);
}

void wsm_buffer_free(uint8_t * buf) {
    std::free(buf);
}

void wsm_set_log_callback(wsm_log_callback callback, void * user_data) {
    g_log_callback = callback;
    g_log_user = user_data;
    if (callback == nullptr) {
        set_log_sink({});
        return;
    }
    set_log_sink([](const std::string & message) {
        if (g_log_callback != nullptr) {
            g_log_callback(message.c_str(), g_log_user);
        }
    });
}

wsm_status wsm_checkpoint_create(wsm_checkpoint ** out) {
    return guard([&] {
        require(out, "out");
        *out = new wsm_checkpoint{};
    });
}

wsm_status wsm_checkpoint_read(const char * path, wsm_checkpoint ** out) {
    return guard([&] {
        require(path, "path");
        require(out, "out");
        *out = new wsm_checkpoint{read_checkpoint(path)};
    });
}

wsm_status wsm_checkpoint_read_sharded(const char * index_path, wsm_checkpoint ** out) {
    return guard([&] {
        require(index_path, "index_path");
        require(out, "out");
        *out = new wsm_checkpoint{read_sharded_checkpoint(index_path)};
    });
}

wsm_status wsm_checkpoint_parse(const uint8_t * data, size_t size, wsm_checkpoint ** out) {
    return guard([&] {
        require(out, "out");
        if (size > 0) {
            require(data, "data");
        }
        *out = new wsm_checkpoint{
            parse_checkpoint(std::span(reinterpret_cast<const std::byte *>(data), size))};
    });
}

void wsm_checkpoint_free(wsm_checkpoint * ckpt) {
    delete ckpt;
}

wsm_status wsm_checkpoint_write(const wsm_checkpoint * ckpt, const char * path) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(path, "path");
        write_checkpoint(ckpt->ckpt, path);
    });
}

wsm_status wsm_checkpoint_serialize(const wsm_checkpoint * ckpt, uint8_t ** out, size_t * size) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(out, "out");
        require(size, "size");
        const auto bytes = serialize_checkpoint(ckpt->ckpt);
        auto * buf = static_cast<uint8_t *>(std::malloc(bytes.size()));
        if (buf == nullptr) {
            throw std::bad_alloc();
        }
        std::memcpy(buf, bytes.data(), bytes.size());
        *out = buf;
        *size = bytes.size();
    });
}

size_t wsm_checkpoint_tensor_count(const wsm_checkpoint * ckpt) {
    return ckpt == nullptr ? 0 : ckpt->ckpt.size();
}

wsm_status wsm_checkpoint_tensor_info(const wsm_checkpoint * ckpt, size_t index, wsm_tensor_info * out) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(out, "out");
        const auto & [name, tensor] = tensor_at(ckpt->ckpt, index);
        out->name = name.c_str();
        out->dtype = dtype_name(tensor.dtype).data();
        out->ndim = tensor.shape.size();
        out->shape = tensor.shape.data();
        out->nbytes = tensor.data.size();
    });
}

wsm_status wsm_checkpoint_add_tensor(wsm_checkpoint * ckpt, const char * name, const char * dtype,
                                     const uint64_t * shape, size_t ndim, const void * data, size_t nbytes) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(name, "name");
        require(dtype, "dtype");
        if (ndim > 0) {
            require(shape, "shape");
        }
        if (nbytes > 0) {
            require(data, "data");
        }
        Tensor t;
        t.dtype = parse_dtype(dtype);
        t.shape.assign(shape, shape + ndim);
        const auto * bytes = static_cast<const std::byte *>(data);
        t.data.assign(bytes, bytes + nbytes);
        ckpt->ckpt.add(name, std::move(t));
    });
}

wsm_status wsm_checkpoint_tensor_data(const wsm_checkpoint * ckpt, const char * name, const void ** data,
                                      size_t * nbytes) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(name, "name");
        require(data, "data");
        require(nbytes, "nbytes");
        const Tensor & t = ckpt->ckpt.at(name);
        *data = t.data.data();
        *nbytes = t.data.size();
    });
}

wsm_status wsm_checkpoint_tensor_to_f32(const wsm_checkpoint * ckpt, const char * name, float * out, size_t count) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(name, "name");
        const Tensor & t = ckpt->ckpt.at(name);
        if (count != t.element_count()) {
            fail(ErrorCode::InvalidArgument, "tensor '" + std::string(name) + "' has " +
                                                 std::to_string(t.element_count()) + " elements, buffer holds " +
                                                 std::to_string(count));
        }
        if (count > 0) {
            require(out, "out");
        }
        const auto values = decode_f32(t.data, t.dtype);
        std::copy(values.begin(), values.end(), out);
    });
}

wsm_status wsm_checkpoint_get_metadata(const wsm_checkpoint * ckpt, const char * key, char ** value) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(key, "key");
        require(value, "value");
        const auto v = ckpt->ckpt.metadata_value(key);
        *value = v ? dup_string(*v) : nullptr;
    });
}

wsm_status wsm_checkpoint_set_metadata(wsm_checkpoint * ckpt, const char * key, const char * value) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(key, "key");
        require(value, "value");
        ckpt->ckpt.set_metadata(key, value);
    });
}

wsm_status wsm_checkpoint_summary_json(const wsm_checkpoint * ckpt, char ** out) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(out, "out");
        json tensors = json::array();
        json histogram = json::object();
        std::uint64_t total = 0;
        for (const auto & [name, t] : ckpt->ckpt.tensors()) {
            tensors.push_back({{"name", name},
                               {"dtype", std::string(dtype_name(t.dtype))},
                               {"shape", t.shape},
                               {"parameters", t.element_count()}});
            const std::string d(dtype_name(t.dtype));
            histogram[d] = histogram.value(d, 0) + 1;
            total += t.element_count();
        }
        json metadata = json::object();
        for (const auto & [k, v] : ckpt->ckpt.metadata()) {
            metadata[k] = v;
        }
        const json j = {
            {"tensor_count", ckpt->ckpt.size()},
            {"total_parameters", total},
            {"dtype_histogram", histogram},
            {"tensors", tensors},
            {"metadata", metadata},
        };
        *out = dup_string(j.dump(2) + "\n");
    });
}

wsm_status wsm_checkpoint_content_hash(const wsm_checkpoint * ckpt, char ** out) {
    return guard([&] {
        require(ckpt, "checkpoint");
        require(out, "out");
        *out = dup_string(content_hash(ckpt->ckpt));
    });
}

wsm_status wsm_checkpoint_compatibility_json(const wsm_checkpoint * a, const wsm_checkpoint * b, int * compatible,
                                             char ** out) {
    return guard([&] {
        require(a, "a");
        require(b, "b");
        const CompatibilityReport r = validate_compatibility(a->ckpt, b->ckpt);
        if (compatible != nullptr) {
            *compatible = r.has_mismatches() ? 0 : 1;
        }
        set_out(out, r.to_json());
    });
}

wsm_status wsm_file_sha256(const char * path, char ** out) {
    return guard([&] {
        require(path, "path");
        require(out, "out");
        *out = dup_string(sha256_file(path));
    });
}

void wsm_delta_options_init(wsm_delta_options * options) {
    if (options != nullptr) {
        *options = wsm_delta_options{1, nullptr, 0};
    }
}

wsm_status wsm_task_vector_compute(const wsm_checkpoint * finetuned, const wsm_checkpoint * base,
                                   const wsm_delta_options * options, wsm_task_vector ** out) {
    return guard([&] {
        require(finetuned, "finetuned");
        require(base, "base");
        require(out, "out");
        DeltaOptions opt;
        if (options != nullptr) {
            opt.strict = options->strict != 0;
            opt.exclude_patterns = string_list(options->exclude_patterns, options->exclude_count);
        }
        *out = new wsm_task_vector{compute_delta(finetuned->ckpt, base->ckpt, opt)};
    });
}

wsm_status wsm_task_vector_read(const char * path, wsm_task_vector ** out) {
    return guard([&] {
        require(path, "path");
        require(out, "out");
        *out = new wsm_task_vector{read_task_vector(path)};
    });
}

wsm_status wsm_task_vector_write(const wsm_task_vector * tv, const char * path) {
    return guard([&] {
        require(tv, "task vector");
        require(path, "path");
        write_task_vector(tv->tv, path);
    });
}

void wsm_task_vector_free(wsm_task_vector * tv) {
    delete tv;
}

const char * wsm_task_vector_source_id(const wsm_task_vector * tv) {
    return tv == nullptr ? "" : tv->tv.source_id.c_str();
}

const char * wsm_task_vector_base_id(const wsm_task_vector * tv) {
    return tv == nullptr ? "" : tv->tv.base_id.c_str();
}

size_t wsm_task_vector_tensor_count(const wsm_task_vector * tv) {
    return tv == nullptr ? 0 : tv->tv.deltas.size();
}

wsm_status wsm_apply_delta(const wsm_checkpoint * base, const wsm_task_vector * tv, double scale, int force,
                           const char * dtype_policy, wsm_checkpoint ** out) {
    return guard([&] {
        require(base, "base");
        require(tv, "task vector");
        require(out, "out");
        ApplyOptions opt;
        opt.force = force != 0;
        opt.dtype_policy = policy_or_source(dtype_policy);
        *out = new wsm_checkpoint{apply_delta(base->ckpt, tv->tv, scale, opt)};
    });
}

void wsm_merge_params_init(wsm_merge_params * params) {
    if (params == nullptr) {
        return;
    }
    const MergeParams d;
    *params = wsm_merge_params{};
    params->method = "task_arithmetic";
    params->k = d.k;
    params->p = d.p;
    params->lambda = d.lambda;
    params->topk = d.topk;
    params->seed = d.seed;
    params->dtype_policy = "source";
}

wsm_status wsm_merge(const wsm_checkpoint * base, const wsm_task_vector * const * deltas, size_t count,
                     const wsm_merge_params * params, wsm_checkpoint ** out) {
    return guard([&] {
        require(base, "base");
        require(params, "params");
        require(out, "out");
        if (count > 0) {
            require(deltas, "deltas");
        }
        MergeParams mp;
        mp.method = parse_merge_method(params->method == nullptr ? "" : params->method);
        mp.k = params->k;
        mp.p = params->p;
        mp.lambda = params->lambda;
        mp.topk = params->topk;
        mp.seed = params->seed;
        if (params->alpha_count > 0) {
            require(params->alphas, "alphas");
            mp.alphas.assign(params->alphas, params->alphas + params->alpha_count);
        }
        mp.exclude_patterns = string_list(params->exclude_patterns, params->exclude_count);
        mp.dtype_policy = policy_or_source(params->dtype_policy);
        mp.force = params->force != 0;
        mp.threads = params->threads;
        std::vector<TaskVector> tvs;
        tvs.reserve(count);
        for (std::size_t i = 0; i < count; ++i) {
            require(deltas[i], "delta");
            tvs.push_back(deltas[i]->tv);
        }
        *out = new wsm_checkpoint{merge(base->ckpt, tvs, mp)};
    });
}

void wsm_selectivity_params_init(wsm_selectivity_params * params) {
    if (params != nullptr) {
        *params = wsm_selectivity_params{0.1, 0, 0.8, 0, nullptr};
    }
}

wsm_status wsm_selectivity_report(const char * const * table_paths, size_t count,
                                  const wsm_selectivity_params * params, char ** report_json, char ** layer_csv,
                                  char ** totals_csv) {
    return guard([&] {
        const auto tables = read_tables(table_paths, count);
        const auto reports = run_selectivity(tables, selectivity_options(params));
        set_out(report_json, selectivity_report_json(reports));
        set_out(layer_csv, layer_csv_all(reports));
        set_out(totals_csv, totals_table_csv(reports));
    });
}

wsm_status wsm_selectivity_compare_csv(const char * const * before_paths, size_t before_count,
                                       const char * const * after_paths, size_t after_count,
                                       const wsm_selectivity_params * params, char ** totals_csv) {
    return guard([&] {
        require(totals_csv, "totals_csv");
        const SelectivityOptions opt = selectivity_options(params);
        const auto before = run_selectivity(read_tables(before_paths, before_count), opt);
        const auto after = run_selectivity(read_tables(after_paths, after_count), opt);
        *totals_csv = dup_string(totals_table_csv(before, after));
    });
}

wsm_status wsm_nua_report(const char * table_a, const char * table_b, const char * span, char ** report_json,
                          char ** csv) {
    return guard([&] {
        require(table_a, "table_a");
        require(table_b, "table_b");
        const auto ta = read_count_tables(table_a);
        const auto tb = read_count_tables(table_b);
        const UsageVector a = usage_from_counts(pick_span(ta, span, table_a));
        const UsageVector b = usage_from_counts(pick_span(tb, span, table_b));
        const NuaResult r = neuron_usage_alignment(a, b);
        set_out(report_json, nua_report_json(a, b, r));
        set_out(csv, nua_report_csv(r));
    });
}

wsm_status wsm_dump_read(const char * path, wsm_dump ** out) {
    return guard([&] {
        require(path, "path");
        require(out, "out");
        *out = new wsm_dump{read_representation_dump(path)};
    });
}

void wsm_dump_free(wsm_dump * dump) {
    delete dump;
}

size_t wsm_dump_layers(const wsm_dump * dump) {
    return dump == nullptr ? 0 : dump->dump.layers();
}

wsm_status wsm_cka_report(const wsm_dump * a, const wsm_dump * b, const char * bands, unsigned threads,
                          char ** report_json, char ** csv) {
    return guard([&] {
        require(a, "a");
        require(b, "b");
        LayerBands resolved;
        if (bands == nullptr) {
            resolved = default_layer_bands();
            if (resolved.back().last >= a->dump.layers()) {
                log_warning("dumps have " + std::to_string(a->dump.layers()) +
                            " layers, fewer than the default bands need; band means omitted");
                resolved.clear();
            }
        } else if (*bands != '\0') {
            resolved = parse_layer_bands(bands);
        }
        const CkaProfile profile = cka_profile(a->dump, b->dump, resolved, threads);
        set_out(report_json, cka_report_json(a->dump, b->dump, profile));
        set_out(csv, cka_report_csv(profile));
    });
}

wsm_status wsm_angles_report(const wsm_dump * a, const wsm_dump * b, size_t rank, unsigned threads,
                             char ** report_json, char ** csv) {
    return guard([&] {
        require(a, "a");
        require(b, "b");
        const AnglesProfile profile = angles_profile(a->dump, b->dump, rank, threads);
        set_out(report_json, angles_report_json(a->dump, b->dump, profile));
        set_out(csv, angles_report_csv(profile));
    });
}

wsm_status wsm_linear_cka(const double * ha, size_t n, size_t da, const double * hb, size_t db, double * out) {
    return guard([&] {
        require(ha, "ha");
        require(hb, "hb");
        require(out, "out");
        *out = linear_cka(from_row_major(ha, n, da), from_row_major(hb, n, db));
    });
}

wsm_status wsm_principal_angles(const double * ha, const double * hb, size_t n, size_t d, size_t rank,
                                double * angles_out, double * median_out) {
    return guard([&] {
        require(ha, "ha");
        require(hb, "hb");
        const PrincipalAngles pa = principal_angles(from_row_major(ha, n, d), from_row_major(hb, n, d), rank);
        if (angles_out != nullptr) {
            std::copy(pa.radians.begin(), pa.radians.end(), angles_out);
        }
        if (median_out != nullptr) {
            *median_out = pa.median;
        }
    });
}

} // extern "C"
