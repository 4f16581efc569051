#ifndef EDGECL_H
#define EDGECL_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EdgeclStatus {
  EDGECL_STATUS_OK = 0,
  EDGECL_STATUS_NULL_POINTER = 1,
  EDGECL_STATUS_CONFIG = 2,
  EDGECL_STATUS_NON_FINITE = 3,
  EDGECL_STATUS_IO = 4,
  EDGECL_STATUS_INVALID_ARGUMENT = 5,
  EDGECL_STATUS_SHAPE = 6,
  EDGECL_STATUS_FORMAT = 7,
  EDGECL_STATUS_INTERNAL = 8,
} EdgeclStatus;

/**
 * One user's labeled domain dataset.
 */
typedef struct EdgeclDataset EdgeclDataset;

/**
 * Discriminator parameters.
 */
typedef struct EdgeclModel EdgeclModel;

/**
 * Simulated scene.
 */
typedef struct EdgeclScene EdgeclScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *edgecl_version(void);

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call into the library on the same thread.
 */
const char *edgecl_last_error(void);

/**
 * Desk-scale scene: 16 subcarriers, 1 Tx, 2 Rx.
 *
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum EdgeclStatus edgecl_scene_new_desk(struct EdgeclScene **out);

/**
 * Scene from a JSON scene spec; missing fields take desk defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid handle slot.
 */
enum EdgeclStatus edgecl_scene_from_json(const char *json, struct EdgeclScene **out);

/**
 * Width of the preprocessed rows for this scene.
 *
 * # Safety
 * `scene` must come from this library and `out` must be valid.
 */
enum EdgeclStatus edgecl_scene_input_width(const struct EdgeclScene *scene,
                                           size_t temporal_len,
                                           size_t *out);

/**
 * # Safety
 * `scene` must come from this library or be null.
 */
void edgecl_scene_free(struct EdgeclScene *scene);

/**
 * Generates `per_class` sequences for each of `n_classes` activities.
 *
 * # Safety
 * `scene` must come from this library and `out` must be a valid handle slot.
 */
enum EdgeclStatus edgecl_dataset_generate(const struct EdgeclScene *scene,
                                          uint64_t user_id,
                                          size_t n_classes,
                                          size_t per_class,
                                          uint64_t seed,
                                          struct EdgeclDataset **out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` a valid handle slot.
 */
enum EdgeclStatus edgecl_dataset_load(const char *path, struct EdgeclDataset **out);

/**
 * # Safety
 * `dataset` must come from this library and `path` be NUL-terminated.
 */
enum EdgeclStatus edgecl_dataset_save(const struct EdgeclDataset *dataset, const char *path);

/**
 * # Safety
 * `dataset` must come from this library and `out` must be valid.
 */
enum EdgeclStatus edgecl_dataset_len(const struct EdgeclDataset *dataset, size_t *out);

/**
 * # Safety
 * `dataset` must come from this library and `out` must be valid.
 */
enum EdgeclStatus edgecl_dataset_label(const struct EdgeclDataset *dataset,
                                       size_t index,
                                       size_t *out);

/**
 * # Safety
 * `dataset` must come from this library or be null.
 */
void edgecl_dataset_free(struct EdgeclDataset *dataset);

/**
 * Randomly initialized desk-size model for inputs of `scene`.
 *
 * # Safety
 * `scene` must come from this library and `out` must be a valid handle slot.
 */
enum EdgeclStatus edgecl_model_new(const struct EdgeclScene *scene,
                                   size_t n_classes,
                                   uint64_t seed,
                                   struct EdgeclModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid handle slot.
 */
enum EdgeclStatus edgecl_model_load(const char *path, struct EdgeclModel **out);

/**
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum EdgeclStatus edgecl_model_save(const struct EdgeclModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum EdgeclStatus edgecl_model_param_count(const struct EdgeclModel *model, size_t *out);

/**
 * Eval-mode class probabilities of dataset entry `index`, written to
 * `probs[0..len]`; `len` must equal the model's class count.
 *
 * # Safety
 * Handles must come from this library; `probs` must hold `len` doubles.
 */
enum EdgeclStatus edgecl_model_predict(const struct EdgeclModel *model,
                                       const struct EdgeclDataset *dataset,
                                       size_t index,
                                       double *probs,
                                       size_t len);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void edgecl_model_free(struct EdgeclModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EDGECL_H */
