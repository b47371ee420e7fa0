#ifndef SRRAG_H
#define SRRAG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SrragStatus {
  SRRAG_STATUS_OK = 0,
  SRRAG_STATUS_NULL_POINTER = 1,
  SRRAG_STATUS_INVALID_UTF8 = 2,
  SRRAG_STATUS_INVALID_ARGUMENT = 3,
  SRRAG_STATUS_DIMENSION_MISMATCH = 4,
  SRRAG_STATUS_UNKNOWN_LABEL = 5,
  SRRAG_STATUS_UNKNOWN_ID = 6,
  SRRAG_STATUS_ZERO_VECTOR = 7,
  SRRAG_STATUS_EMPTY_STORE = 8,
  SRRAG_STATUS_IO = 9,
  SRRAG_STATUS_CORRUPT_FILE = 10,
  SRRAG_STATUS_BUFFER_TOO_SMALL = 11,
  SRRAG_STATUS_PANIC = 12,
} SrragStatus;

typedef enum SrragMatchMode {
  SRRAG_MATCH_MODE_SUBSTRING = 0,
  SRRAG_MATCH_MODE_EXACT_CHOICE = 1,
} SrragMatchMode;

/**
 * Opaque policy datastore handle.
 */
typedef struct SrragDatastore SrragDatastore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, statically allocated.
 */
const char *srrag_version(void);

/**
 * Message for the last failure on this thread. Valid until the next
 * failing call on the same thread.
 */
const char *srrag_last_error_message(void);

/**
 * Creates an empty datastore whose labels are `tokens[0..n_tokens]`.
 */
enum SrragStatus srrag_datastore_new(uint32_t dim,
                                     const char *const *tokens,
                                     size_t n_tokens,
                                     struct SrragDatastore **out);

/**
 * Loads a datastore file.
 */
enum SrragStatus srrag_datastore_open(const char *path, struct SrragDatastore **out);

enum SrragStatus srrag_datastore_save(const struct SrragDatastore *ds, const char *path);

/**
 * Releases a handle; null is ignored.
 */
void srrag_datastore_free(struct SrragDatastore *ds);

/**
 * Number of entries; 0 for a null handle.
 */
size_t srrag_datastore_len(const struct SrragDatastore *ds);

/**
 * Key dimension; 0 for a null handle.
 */
uint32_t srrag_datastore_dim(const struct SrragDatastore *ds);

size_t srrag_datastore_token_count(const struct SrragDatastore *ds);

/**
 * Label token at `index`, owned by the handle; null if out of range.
 */
const char *srrag_datastore_token(const struct SrragDatastore *ds, size_t index);

/**
 * Appends an entry. `meta` may be null.
 */
enum SrragStatus srrag_datastore_insert(struct SrragDatastore *ds,
                                        const float *key,
                                        size_t key_len,
                                        const char *label,
                                        const char *meta,
                                        uint64_t *out_id);

enum SrragStatus srrag_datastore_remove(struct SrragDatastore *ds, uint64_t id);

/**
 * Exact top-`k` neighbors, most similar first. Writes up to `capacity`
 * results; `out_similarities` and `out_labels` may be null. Fails with
 * `BufferTooSmall` (and writes nothing) if `capacity` is below the result
 * count, which is reported through `out_count` either way.
 */
enum SrragStatus srrag_datastore_knn(const struct SrragDatastore *ds,
                                     const float *query,
                                     size_t query_len,
                                     size_t k,
                                     uint64_t *out_ids,
                                     double *out_similarities,
                                     uint16_t *out_labels,
                                     size_t capacity,
                                     size_t *out_count);

/**
 * Neighbor label distribution of the top-`k` neighbors of `query`, one
 * probability per label token in handle order. `out_probs` must hold
 * `srrag_datastore_token_count` values.
 */
enum SrragStatus srrag_datastore_distribution(const struct SrragDatastore *ds,
                                              const float *query,
                                              size_t query_len,
                                              size_t k,
                                              double *out_probs,
                                              size_t capacity);

/**
 * Source decision over `n_sources` parallel probability arrays, where
 * `internal_index` names the internal source and the rest are external.
 * Writes the chosen index and, if non-null, the `n_sources` combined scores.
 */
enum SrragStatus srrag_route_decide(const double *p_m,
                                    const double *p_d,
                                    size_t n_sources,
                                    size_t internal_index,
                                    double tau,
                                    size_t *out_selected,
                                    double *out_combined);

/**
 * Answer correctness against `n_golds` gold strings.
 */
enum SrragStatus srrag_lexical_match(const char *prediction,
                                     const char *const *golds,
                                     size_t n_golds,
                                     enum SrragMatchMode mode,
                                     bool *out_match);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRRAG_H */
