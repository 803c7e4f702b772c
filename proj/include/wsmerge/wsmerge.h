/* SPDX-License-Identifier: Apache-2.0 */
/*
 * wsmerge C API.
 *
 * Every fallible call returns a wsm_status; on failure a human-readable
 * message is available from wsm_last_error_message() on the same thread
 * until the next failing call. Objects are opaque handles released with the
 * matching *_free function. Strings and buffers returned through out
 * parameters are owned by the caller and released with wsm_string_free /
 * wsm_buffer_free.
 */
#ifndef WSMERGE_H
#define WSMERGE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#    define WSM_API __declspec(dllexport)
#else
#    define WSM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum wsm_status {
    WSM_OK                      = 0,
    WSM_ERR_INVALID_ARGUMENT    = 1,
    WSM_ERR_IO                  = 2,
    WSM_ERR_TRUNCATED           = 3,
    WSM_ERR_MALFORMED_HEADER    = 4,
    WSM_ERR_OVERLAPPING_OFFSETS = 5,
    WSM_ERR_OFFSET_OUT_OF_RANGE = 6,
    WSM_ERR_UNSUPPORTED_DTYPE   = 7,
    WSM_ERR_DUPLICATE_TENSOR    = 8,
    WSM_ERR_INCOMPATIBLE        = 9,
    WSM_ERR_BASE_MISMATCH       = 10,
    WSM_ERR_FINGERPRINT         = 11,
    WSM_ERR_NON_FINITE          = 12,
    WSM_ERR_ZERO_VARIANCE       = 13,
    WSM_ERR_RANK_DEFICIENT      = 14,
    WSM_ERR_NUMERICAL_RANGE     = 15,
    WSM_ERR_INTERNAL            = 99,
} wsm_status;

typedef struct wsm_checkpoint  wsm_checkpoint;
typedef struct wsm_task_vector wsm_task_vector;
typedef struct wsm_dump        wsm_dump;

WSM_API const char * wsm_version(void);
WSM_API const char * wsm_status_name(wsm_status status);
WSM_API const char * wsm_last_error_message(void);

WSM_API void wsm_string_free(char * str);
WSM_API void wsm_buffer_free(uint8_t * buf);

/* Receives library warnings. NULL restores the default (stderr). */
typedef void (*wsm_log_callback)(const char * message, void * user_data);
WSM_API void wsm_set_log_callback(wsm_log_callback callback, void * user_data);

/* ---- checkpoints ---- */

WSM_API wsm_status wsm_checkpoint_create(wsm_checkpoint ** out);
WSM_API wsm_status wsm_checkpoint_read(const char * path, wsm_checkpoint ** out);
/* index JSON mapping tensor names to shard files */
WSM_API wsm_status wsm_checkpoint_read_sharded(const char * index_path, wsm_checkpoint ** out);
WSM_API wsm_status wsm_checkpoint_parse(const uint8_t * data, size_t size, wsm_checkpoint ** out);
WSM_API void       wsm_checkpoint_free(wsm_checkpoint * ckpt);

WSM_API wsm_status wsm_checkpoint_write(const wsm_checkpoint * ckpt, const char * path);
WSM_API wsm_status wsm_checkpoint_serialize(const wsm_checkpoint * ckpt, uint8_t ** out, size_t * size);

WSM_API size_t wsm_checkpoint_tensor_count(const wsm_checkpoint * ckpt);

/* Pointers stay valid until the checkpoint is modified or freed. */
typedef struct wsm_tensor_info {
    const char *     name;
    const char *     dtype;
    size_t           ndim;
    const uint64_t * shape;
    size_t           nbytes;
} wsm_tensor_info;

/* Tensors are indexed in lexicographic name order. */
WSM_API wsm_status wsm_checkpoint_tensor_info(const wsm_checkpoint * ckpt, size_t index, wsm_tensor_info * out);
WSM_API wsm_status wsm_checkpoint_add_tensor(wsm_checkpoint * ckpt, const char * name, const char * dtype,
                                             const uint64_t * shape, size_t ndim, const void * data, size_t nbytes);
WSM_API wsm_status wsm_checkpoint_tensor_data(const wsm_checkpoint * ckpt, const char * name, const void ** data,
                                              size_t * nbytes);
/* Decodes a float tensor; count must equal its element count. */
WSM_API wsm_status wsm_checkpoint_tensor_to_f32(const wsm_checkpoint * ckpt, const char * name, float * out,
                                                size_t count);

/* *value is NULL when the key is absent. */
WSM_API wsm_status wsm_checkpoint_get_metadata(const wsm_checkpoint * ckpt, const char * key, char ** value);
WSM_API wsm_status wsm_checkpoint_set_metadata(wsm_checkpoint * ckpt, const char * key, const char * value);

/* {"tensor_count", "total_parameters", "dtype_histogram", "tensors", "metadata"} */
WSM_API wsm_status wsm_checkpoint_summary_json(const wsm_checkpoint * ckpt, char ** out);
/* SHA-256 of the canonical serialization with metadata stripped (hex). */
WSM_API wsm_status wsm_checkpoint_content_hash(const wsm_checkpoint * ckpt, char ** out);
/* *compatible is 1 when no shared tensor disagrees in shape or dtype. */
WSM_API wsm_status wsm_checkpoint_compatibility_json(const wsm_checkpoint * a, const wsm_checkpoint * b,
                                                     int * compatible, char ** out);

WSM_API wsm_status wsm_file_sha256(const char * path, char ** out);

/* ---- task vectors and merging ---- */

typedef struct wsm_delta_options {
    int                 strict;  /* nonzero: shape/dtype mismatch is an error */
    const char * const * exclude_patterns;
    size_t              exclude_count;
} wsm_delta_options;

WSM_API void wsm_delta_options_init(wsm_delta_options * options);

WSM_API wsm_status wsm_task_vector_compute(const wsm_checkpoint * finetuned, const wsm_checkpoint * base,
                                           const wsm_delta_options * options, wsm_task_vector ** out);
WSM_API wsm_status wsm_task_vector_read(const char * path, wsm_task_vector ** out);
WSM_API wsm_status wsm_task_vector_write(const wsm_task_vector * tv, const char * path);
WSM_API void       wsm_task_vector_free(wsm_task_vector * tv);
WSM_API const char * wsm_task_vector_source_id(const wsm_task_vector * tv);
WSM_API const char * wsm_task_vector_base_id(const wsm_task_vector * tv);
WSM_API size_t     wsm_task_vector_tensor_count(const wsm_task_vector * tv);

/* dtype_policy: "source", "f32", "f16", "bf16"; NULL means "source". */
WSM_API wsm_status wsm_apply_delta(const wsm_checkpoint * base, const wsm_task_vector * tv, double scale,
                                   int force, const char * dtype_policy, wsm_checkpoint ** out);

typedef struct wsm_merge_params {
    const char *         method;  /* task_arithmetic, ties, dare, sce */
    double               k;
    double               p;
    double               lambda;
    double               topk;
    uint64_t             seed;
    const double *       alphas;  /* NULL: all 1 */
    size_t               alpha_count;
    const char * const * exclude_patterns;
    size_t               exclude_count;
    const char *         dtype_policy;
    int                  force;
    unsigned             threads;  /* 0: WSMERGE_THREADS or hardware concurrency */
} wsm_merge_params;

WSM_API void wsm_merge_params_init(wsm_merge_params * params);

/* The output carries a "merge_provenance" metadata entry. */
WSM_API wsm_status wsm_merge(const wsm_checkpoint * base, const wsm_task_vector * const * deltas, size_t count,
                             const wsm_merge_params * params, wsm_checkpoint ** out);

/* ---- diagnostics ---- */

typedef struct wsm_selectivity_params {
    double rho;
    int    tau_absolute;  /* 0: tau is a percentile level of pooled p values */
    double tau;
    int    pool_across_spans;
    const char * span;    /* "src", "tgt" or NULL for every span present */
} wsm_selectivity_params;

WSM_API void wsm_selectivity_params_init(wsm_selectivity_params * params);

/* Each path is a count-table file with a `<path>.json` sidecar. Any of the
 * outputs may be NULL. layer_csv holds one block per span. */
WSM_API wsm_status wsm_selectivity_report(const char * const * table_paths, size_t count,
                                          const wsm_selectivity_params * params, char ** report_json,
                                          char ** layer_csv, char ** totals_csv);

/* Language x span totals as "before->after" cells. */
WSM_API wsm_status wsm_selectivity_compare_csv(const char * const * before_paths, size_t before_count,
                                               const char * const * after_paths, size_t after_count,
                                               const wsm_selectivity_params * params, char ** totals_csv);

WSM_API wsm_status wsm_nua_report(const char * table_a, const char * table_b, const char * span,
                                  char ** report_json, char ** csv);

WSM_API wsm_status wsm_dump_read(const char * path, wsm_dump ** out);
WSM_API void       wsm_dump_free(wsm_dump * dump);
WSM_API size_t     wsm_dump_layers(const wsm_dump * dump);

/* bands: "0-11,12-27,28-36" or "early:0-11,...". NULL applies the default
 * early/mid/late bands when the dumps have enough layers; "" disables bands. */
WSM_API wsm_status wsm_cka_report(const wsm_dump * a, const wsm_dump * b, const char * bands, unsigned threads,
                                  char ** report_json, char ** csv);
WSM_API wsm_status wsm_angles_report(const wsm_dump * a, const wsm_dump * b, size_t rank, unsigned threads,
                                     char ** report_json, char ** csv);

/* Row-major n x d matrices. */
WSM_API wsm_status wsm_linear_cka(const double * ha, size_t n, size_t da, const double * hb, size_t db,
                                  double * out);
/* angles_out receives `rank` ascending values in radians. */
WSM_API wsm_status wsm_principal_angles(const double * ha, const double * hb, size_t n, size_t d, size_t rank,
                                        double * angles_out, double * median_out);

#ifdef __cplusplus
}
#endif

#endif /* WSMERGE_H */
