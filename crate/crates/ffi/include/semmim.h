#ifndef SEMMIM_H
#define SEMMIM_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Split selector for evaluation.
typedef enum SemmimSplit {
  SEMMIM_SPLIT_TRAIN = 0,
  SEMMIM_SPLIT_TEST = 1,
} SemmimSplit;

// Result of every fallible call.
typedef enum SemmimStatus {
  SEMMIM_STATUS_OK = 0,
  SEMMIM_STATUS_NULL_POINTER = 1,
  SEMMIM_STATUS_INVALID_ARGUMENT = 2,
  SEMMIM_STATUS_CONFIG = 3,
  SEMMIM_STATUS_CHECKPOINT = 4,
  SEMMIM_STATUS_IO = 5,
  SEMMIM_STATUS_NON_FINITE = 6,
  SEMMIM_STATUS_INTERNAL = 7,
  SEMMIM_STATUS_PANIC = 8,
} SemmimStatus;

// Opaque trainer: model, momentum teacher, optimizer state and corpus.
typedef struct SemmimTrainer SemmimTrainer;

// Loss components of one training step.
typedef struct SemmimLosses {
  double cls;
  double patch;
  double itc;
  double itm;
  double mlm;
  double plm;
  double total;
} SemmimLosses;

// Recall@{1,5,10} in both retrieval directions, as fractions.
typedef struct SemmimRecall {
  size_t pairs;
  double image_to_text[3];
  double text_to_image[3];
} SemmimRecall;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failing call on this thread, or an empty string.
// The pointer stays valid until the next failing call on this thread.
const char *semmim_last_error(void);

// Creates a fresh trainer. `config_toml` may be null for the defaults;
// otherwise it is TOML text in the run-configuration format.
//
// # Safety
// `config_toml` must be null or NUL-terminated; `out` must be writable.
enum SemmimStatus semmim_trainer_new(const char *config_toml,
                                     uint64_t seed,
                                     struct SemmimTrainer **out);

// Restores a trainer from a checkpoint file. A checkpoint whose stored
// configuration hash does not verify is refused unless `force` is nonzero.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum SemmimStatus semmim_trainer_load(const char *path, int32_t force, struct SemmimTrainer **out);

// Runs `steps` training steps. The losses of the last step are written to
// `last` when it is non-null.
//
// # Safety
// `trainer` must come from this library and not be freed; `last` must be
// null or writable.
enum SemmimStatus semmim_trainer_step(struct SemmimTrainer *trainer,
                                      uint32_t steps,
                                      struct SemmimLosses *last);

// Number of steps taken so far, or 0 for a null handle.
//
// # Safety
// `trainer` must be null or a live handle.
uint64_t semmim_trainer_step_count(const struct SemmimTrainer *trainer);

// Writes a checkpoint to `path`.
//
// # Safety
// `trainer` must be a live handle; `path` must be NUL-terminated.
enum SemmimStatus semmim_trainer_save(const struct SemmimTrainer *trainer, const char *path);

// Retrieval recall of the current model on a corpus split.
//
// # Safety
// `trainer` must be a live handle; `out` must be writable.
enum SemmimStatus semmim_trainer_eval(const struct SemmimTrainer *trainer,
                                      enum SemmimSplit split,
                                      struct SemmimRecall *out);

// Releases a handle. Null is accepted and ignored.
//
// # Safety
// `trainer` must be null or a handle not yet freed.
void semmim_trainer_free(struct SemmimTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMMIM_H */
