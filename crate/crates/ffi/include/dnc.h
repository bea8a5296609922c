#ifndef DNC_H
#define DNC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define DNC_OK 0

/**
 * A required pointer argument was null.
 */
#define DNC_ERR_NULL_POINTER 1

/**
 * An argument or configuration value is out of range.
 */
#define DNC_ERR_INVALID_ARGUMENT 2

/**
 * Malformed input file or inconsistent array shapes.
 */
#define DNC_ERR_DATA 3

/**
 * Training diverged or a computation produced non-finite values.
 */
#define DNC_ERR_NUMERIC 4

#define DNC_ERR_IO 5

/**
 * A string argument is not valid UTF-8.
 */
#define DNC_ERR_UTF8 6

/**
 * Internal panic caught at the boundary.
 */
#define DNC_ERR_PANIC 7

/**
 * Fitted model with the covariate layout it was trained with.
 */
typedef struct DncModelHandle DncModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *dnc_last_error_message(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *dnc_version(void);

/**
 * Simulates a `design` ("stationary" or "deepgp") dataset of `n` locations
 * and writes it to `out_dir` in the same layout as the command-line tool.
 *
 * # Safety
 * `design` and `out_dir` must be valid nul-terminated strings.
 */
int32_t dnc_simulate(const char *design, uintptr_t n, uint64_t seed, const char *out_dir);

/**
 * Fits a model to dataset CSV files. `config_path` and `design` may be null;
 * `design` selects a training preset. On success `*out` owns a new handle.
 *
 * # Safety
 * String arguments must be null or valid nul-terminated strings and `out`
 * must point to writable storage for one pointer.
 */
int32_t dnc_fit(const char *train_path,
                const char *val_path,
                const char *config_path,
                const char *design,
                uint64_t seed,
                struct DncModelHandle **out);

/**
 * Loads a checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a valid nul-terminated string and `out` writable.
 */
int32_t dnc_model_load(const char *path, struct DncModelHandle **out);

/**
 * Writes the model as a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a valid nul-terminated string.
 */
int32_t dnc_model_save(const struct DncModelHandle *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void dnc_model_free(struct DncModelHandle *model);

/**
 * Number of outcomes `J`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
int32_t dnc_model_n_outcomes(const struct DncModelHandle *model, uintptr_t *out);

/**
 * Number of covariate columns `p` expected by [`dnc_predict`].
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
int32_t dnc_model_n_covariates(const struct DncModelHandle *model, uintptr_t *out);

/**
 * Sets both keep probabilities used at prediction time.
 *
 * # Safety
 * `model` must be a live handle not used concurrently.
 */
int32_t dnc_model_set_keep_prob(struct DncModelHandle *model, double keep_prob);

/**
 * Monte Carlo dropout predictions at `n` locations.
 *
 * `locations` is `n x 2`, `covariates` is `n x p`. Outputs: `mu`, `lower` and
 * `upper` are `n x J`; `rho` is `n x J(J-1)/2` holding the strict upper
 * triangle of each correlation matrix row by row, and may be null when
 * `J = 1`.
 *
 * # Safety
 * Every non-null pointer must reference an array of the stated size.
 */
int32_t dnc_predict(const struct DncModelHandle *model,
                    const double *locations,
                    const double *covariates,
                    uintptr_t n,
                    uintptr_t n_draws,
                    uint64_t seed,
                    double *mu,
                    double *lower,
                    double *upper,
                    double *rho);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DNC_H */
