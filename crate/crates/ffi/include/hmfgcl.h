/* C interface to the hmfgcl recommender-training engine.
 *
 * Conventions:
 *   - Constructors return NULL on failure; other fallible calls return a
 *     status code (HMFGCL_OK on success). Either way, the failure message
 *     is available from hmfgcl_last_error() until the next failing call
 *     on the same thread.
 *   - Handles are opaque and must be released with the matching *_free
 *     function exactly once. Passing a pointer that did not come from
 *     this library is undefined behavior. NULL handles are rejected with
 *     HMFGCL_ERR_MISUSE, never dereferenced.
 *   - All strings are NUL-terminated UTF-8.
 */
#ifndef HMFGCL_H
#define HMFGCL_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by fallible calls. */
enum {
    HMFGCL_OK = 0,            /* success */
    HMFGCL_ERR_MISUSE = 1,    /* null pointer, bad UTF-8, unknown enum value */
    HMFGCL_ERR_INPUT = 2,     /* unreadable file, malformed data, bad config */
    HMFGCL_ERR_NUMERICAL = 3  /* divergence or internal numerical failure */
};

/* Opaque handles. */
typedef struct HmfgclMatrix HmfgclMatrix;  /* prepared interaction dataset */
typedef struct HmfgclConfig HmfgclConfig;  /* training hyperparameters */
typedef struct HmfgclModel HmfgclModel;    /* trained embedding tables */

/* Library version, e.g. "0.1.0". Static storage; do not free. */
const char *hmfgcl_version(void);

/* Message of the most recent failure on the calling thread. Valid until
 * the next failing call on the same thread; do not free. */
const char *hmfgcl_last_error(void);

/* ---- dataset ---- */

/* Load a prepared interaction matrix (the `prepare` command's output).
 * Returns NULL on failure. */
HmfgclMatrix *hmfgcl_matrix_load(const char *path);

/* Dimensions of a loaded matrix. Out-pointers may be NULL to skip. */
int32_t hmfgcl_matrix_counts(const HmfgclMatrix *matrix,
                             uint32_t *users,
                             uint32_t *items,
                             uint64_t *interactions);

void hmfgcl_matrix_free(HmfgclMatrix *matrix);

/* ---- configuration ---- */

/* New configuration with every hyperparameter at its built-in default. */
HmfgclConfig *hmfgcl_config_new(void);

/* Set one key from its string form, e.g. hmfgcl_config_set(c, "tau", "0.5").
 * Keys match the CLI --set names. */
int32_t hmfgcl_config_set(HmfgclConfig *config,
                          const char *key,
                          const char *value);

void hmfgcl_config_free(HmfgclConfig *config);

/* ---- training and models ---- */

/* Train on a loaded matrix; blocks until finished. Returns a model handle,
 * or NULL on failure (HMFGCL_ERR_NUMERICAL in hmfgcl_last_error() means
 * the run diverged). */
HmfgclModel *hmfgcl_train(const HmfgclMatrix *matrix,
                          const HmfgclConfig *config);

int32_t hmfgcl_model_save(const HmfgclModel *model, const char *path);

/* Load a checkpoint written by hmfgcl_model_save or the CLI.
 * Returns NULL on failure. */
HmfgclModel *hmfgcl_model_load(const char *path);

/* Embedding-table dimensions. Out-pointers may be NULL to skip. */
int32_t hmfgcl_model_dims(const HmfgclModel *model,
                          uint32_t *users,
                          uint32_t *items,
                          uint32_t *dim);

/* Preference score of one (user, item) pair. */
int32_t hmfgcl_score(const HmfgclModel *model,
                     uint32_t user,
                     uint32_t item,
                     double *score);

/* Top-k recommendations for a user, excluding the user's training items.
 * Writes at most k item indices to out_items and the count actually
 * written to out_count (fewer than k when the candidate pool is smaller).
 * out_items must have room for k values. */
int32_t hmfgcl_recommend(const HmfgclModel *model,
                         const HmfgclMatrix *matrix,
                         uint32_t user,
                         uint32_t k,
                         uint32_t *out_items,
                         uint32_t *out_count);

/* Full-ranking metrics of a model on one split, as a JSON document.
 * split is "train", "valid", or "test"; ks is a comma-separated cutoff
 * list such as "10,20". The returned string must be released with
 * hmfgcl_string_free. Returns NULL on failure. */
char *hmfgcl_evaluate_json(const HmfgclModel *model,
                           const HmfgclMatrix *matrix,
                           const char *split,
                           const char *ks);

/* Release a string returned by this library. NULL is a no-op. */
void hmfgcl_string_free(char *s);

void hmfgcl_model_free(HmfgclModel *model);

#ifdef __cplusplus
}
#endif

#endif /* HMFGCL_H */
