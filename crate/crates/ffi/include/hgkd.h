#ifndef HGKD_H
#define HGKD_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Result of every fallible call.
typedef enum HgkdStatus {
  HGKD_STATUS_OK = 0,
  HGKD_STATUS_NULL_POINTER = 1,
  HGKD_STATUS_INVALID_ARGUMENT = 2,
  HGKD_STATUS_CONFIG = 3,
  HGKD_STATUS_DATA = 4,
  HGKD_STATUS_FORMAT = 5,
  HGKD_STATUS_IO = 6,
  HGKD_STATUS_SHAPE = 7,
  HGKD_STATUS_OUT_OF_RANGE = 8,
  HGKD_STATUS_NON_FINITE = 9,
  HGKD_STATUS_PROTOCOL = 10,
  HGKD_STATUS_BUFFER_TOO_SMALL = 11,
  HGKD_STATUS_PANIC = 12,
} HgkdStatus;

typedef struct HgkdDataset HgkdDataset;

typedef struct HgkdStudent HgkdStudent;

typedef struct HgkdTrainer HgkdTrainer;

// Loss terms of one distillation step.
typedef struct HgkdLoss {
  uint64_t step;
  double lr;
  double l_sim;
  double l_feat;
  double total;
  // False while the memory queue is still filling.
  bool sim_active;
} HgkdLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *hgkd_version(void);

// Length in bytes (without the terminator) of the last error message on
// this thread, 0 if there is none.
size_t hgkd_last_error_length(void);

// Copy the last error message, NUL-terminated, into `buf`. Fails with
// `HGKD_STATUS_BUFFER_TOO_SMALL` when `len` cannot hold it.
//
// # Safety
// `buf` must be valid for `len` bytes of writes.
enum HgkdStatus hgkd_last_error_message(char *buf, size_t len);

void hgkd_clear_last_error(void);

// Generate the synthetic texture dataset in memory.
//
// # Safety
// `out` must be valid for one pointer write.
enum HgkdStatus hgkd_dataset_synthetic(size_t n,
                                       size_t classes,
                                       size_t image_size,
                                       double val_fraction,
                                       uint64_t seed,
                                       struct HgkdDataset **out);

// Load a dataset directory written by `hgkd gen-data`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` valid for one write.
enum HgkdStatus hgkd_dataset_load(const char *dir, struct HgkdDataset **out);

// # Safety
// `ds` must come from this library; `dir` must be NUL-terminated.
enum HgkdStatus hgkd_dataset_save(const struct HgkdDataset *ds, const char *dir, bool force);

// Number of images, 0 for a null handle.
//
// # Safety
// `ds` must be null or come from this library.
size_t hgkd_dataset_len(const struct HgkdDataset *ds);

// # Safety
// `ds` must be null or come from this library.
size_t hgkd_dataset_image_size(const struct HgkdDataset *ds);

// # Safety
// `ds` must be null or come from this library.
uint64_t hgkd_dataset_checksum(const struct HgkdDataset *ds);

// # Safety
// `ds` must be null or come from this library, and not used afterwards.
void hgkd_dataset_free(struct HgkdDataset *ds);

// Fresh trainer from TOML config text over `ds`.
//
// # Safety
// `config_toml` must be NUL-terminated; `ds` from this library; `out`
// valid for one write.
enum HgkdStatus hgkd_trainer_new(const char *config_toml,
                                 const struct HgkdDataset *ds,
                                 struct HgkdTrainer **out);

// Trainer restored from a checkpoint directory; the config must match
// the one stored there.
//
// # Safety
// As for [`hgkd_trainer_new`]; `checkpoint_dir` must be NUL-terminated.
enum HgkdStatus hgkd_trainer_resume(const char *config_toml,
                                    const struct HgkdDataset *ds,
                                    const char *checkpoint_dir,
                                    struct HgkdTrainer **out);

// Run one distillation step. `loss` may be null.
//
// # Safety
// Handles must come from this library; `loss` null or valid for a write.
enum HgkdStatus hgkd_trainer_step(struct HgkdTrainer *tr,
                                  const struct HgkdDataset *ds,
                                  struct HgkdLoss *loss);

// # Safety
// `tr` must be null or come from this library.
uint64_t hgkd_trainer_current_step(const struct HgkdTrainer *tr);

// # Safety
// `tr` must be null or come from this library.
uint64_t hgkd_trainer_total_steps(const struct HgkdTrainer *tr);

// # Safety
// `tr` must come from this library; `dir` must be NUL-terminated.
enum HgkdStatus hgkd_trainer_save(const struct HgkdTrainer *tr, const char *dir);

// Copy of the trainer's current student.
//
// # Safety
// `tr` must come from this library; `out` valid for one write.
enum HgkdStatus hgkd_trainer_student(const struct HgkdTrainer *tr, struct HgkdStudent **out);

// # Safety
// `tr` must be null or come from this library, and not used afterwards.
void hgkd_trainer_free(struct HgkdTrainer *tr);

// Student stored in a checkpoint directory.
//
// # Safety
// `dir` must be NUL-terminated; `out` valid for one write.
enum HgkdStatus hgkd_student_load(const char *dir, struct HgkdStudent **out);

// # Safety
// `st` must be null or come from this library.
size_t hgkd_student_embed_dim(const struct HgkdStudent *st);

// # Safety
// `st` must be null or come from this library.
size_t hgkd_student_image_size(const struct HgkdStudent *st);

// Mean-pooled backbone features of `n` unmasked images laid out as
// `n x channels x size x size`, written to `out` as `n x embed_dim`.
//
// # Safety
// `images` must hold `images_len` values and `out` room for `out_len`.
enum HgkdStatus hgkd_student_features(const struct HgkdStudent *st,
                                      const double *images,
                                      size_t images_len,
                                      size_t n,
                                      double *out,
                                      size_t out_len);

// # Safety
// `st` must be null or come from this library, and not used afterwards.
void hgkd_student_free(struct HgkdStudent *st);

// Similarity distributions of a unit teacher embedding `t` and student
// embedding `s` (each `dim` values) over a `k x dim` queue. `mode` 0
// normalizes the student by its own logits, 1 by the teacher's. Either
// output pointer may be null.
//
// # Safety
// Inputs must hold the stated number of values; non-null outputs room
// for `k` values.
enum HgkdStatus hgkd_similarity(const double *t,
                                const double *s,
                                size_t dim,
                                const double *queue,
                                size_t k,
                                double tau,
                                uint32_t mode,
                                double *p_teacher,
                                double *p_student);

// Negative Pearson correlation of two length-`len` vectors.
//
// # Safety
// `a` and `b` must hold `len` values; `out` valid for one write.
enum HgkdStatus hgkd_pearson_loss(const double *a, const double *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HGKD_H */
