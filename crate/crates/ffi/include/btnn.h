/* Generated by cbindgen from btnn-ffi. Do not edit. */

#ifndef BTNN_H
#define BTNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define BTNN_LAYOUT_PLAIN 0

#define BTNN_LAYOUT_FSB 1

#define BTNN_VARIANT_NAIVE 0

#define BTNN_VARIANT_BLOCKED 1

#define BTNN_VARIANT_FSB 2

typedef enum BtnnStatus {
  BTNN_STATUS_OK = 0,
  BTNN_STATUS_INVALID_INPUT = 1,
  BTNN_STATUS_UNSUPPORTED_SHAPE = 2,
  BTNN_STATUS_VALIDATION = 3,
  BTNN_STATUS_CORRUPT_FILE = 4,
  BTNN_STATUS_LOAD = 5,
  BTNN_STATUS_PARSE = 6,
  BTNN_STATUS_IO = 7,
  BTNN_STATUS_CHECK = 8,
  BTNN_STATUS_NULL_POINTER = 9,
  BTNN_STATUS_PANIC = 10,
} BtnnStatus;

/**
 * A model bound to its weights; safe to use from several threads at once.
 */
typedef struct BtnnEngine BtnnEngine;

/**
 * Float weights before binarization.
 */
typedef struct BtnnFloatWeights BtnnFloatWeights;

/**
 * A validated model structure.
 */
typedef struct BtnnModel BtnnModel;

/**
 * Packed weights as stored in a weight file.
 */
typedef struct BtnnWeights BtnnWeights;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *btnn_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *btnn_version(void);

/**
 * Parses a JSON model spec.
 */
enum BtnnStatus btnn_model_from_json(const char *json, struct BtnnModel **out);

enum BtnnStatus btnn_model_from_file(const char *path, struct BtnnModel **out);

/**
 * One of the built-in structures: mlp, cifar-vgg, resnet14, alexnet,
 * vgg16, resnet18.
 */
enum BtnnStatus btnn_model_preset(const char *name, struct BtnnModel **out);

/**
 * Input height, width, channels and the class count.
 */
enum BtnnStatus btnn_model_dims(const struct BtnnModel *model,
                                size_t *h,
                                size_t *w,
                                size_t *c,
                                size_t *classes);

void btnn_model_free(struct BtnnModel *model);

/**
 * Seeded random float weights shaped for `model`.
 */
enum BtnnStatus btnn_float_weights_random(const struct BtnnModel *model,
                                          uint64_t seed,
                                          struct BtnnFloatWeights **out);

enum BtnnStatus btnn_float_weights_load(const char *path, struct BtnnFloatWeights **out);

void btnn_float_weights_free(struct BtnnFloatWeights *weights);

/**
 * Binarizes and packs float weights in `layout`.
 */
enum BtnnStatus btnn_weights_convert(const struct BtnnModel *model,
                                     const struct BtnnFloatWeights *weights,
                                     uint32_t layout,
                                     struct BtnnWeights **out);

enum BtnnStatus btnn_weights_load(const char *path, struct BtnnWeights **out);

enum BtnnStatus btnn_weights_from_bytes(const uint8_t *bytes, size_t len, struct BtnnWeights **out);

enum BtnnStatus btnn_weights_save(const struct BtnnWeights *weights, const char *path);

void btnn_weights_free(struct BtnnWeights *weights);

/**
 * Binds weights to a model, running activations in `layout`.
 */
enum BtnnStatus btnn_engine_new(const struct BtnnModel *model,
                                const struct BtnnWeights *weights,
                                uint32_t layout,
                                struct BtnnEngine **out);

/**
 * Runs `n` images given as f32 NHWC. Writes `n × classes` scores and `n`
 * labels; `labels` may be null.
 */
enum BtnnStatus btnn_engine_infer(const struct BtnnEngine *engine,
                                  const float *input,
                                  size_t n,
                                  double *scores,
                                  size_t scores_len,
                                  uint32_t *labels);

void btnn_engine_free(struct BtnnEngine *engine);

/**
 * Number of 64-bit words holding `n` packed signs.
 */
size_t btnn_words_for(size_t n);

/**
 * Packs `sign(values[i])` LSB-first into `words` (`btnn_words_for(n)` long).
 */
enum BtnnStatus btnn_pack_signs(const double *values, size_t n, uint64_t *words, size_t words_len);

/**
 * ±1 dot product of two packed vectors of `n` bits.
 */
enum BtnnStatus btnn_dot_pm1(const uint64_t *a, const uint64_t *b, size_t n, int64_t *out);

/**
 * `sign(a) · sign(b)` for row-major `a` (m × n) and `b` (n × k); `n` must
 * be a multiple of 128. Writes m × k values row-major.
 */
enum BtnnStatus btnn_bmm_pm1_signs(const double *a,
                                   const double *b,
                                   size_t m,
                                   size_t n,
                                   size_t k,
                                   uint32_t variant,
                                   int32_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BTNN_H */
