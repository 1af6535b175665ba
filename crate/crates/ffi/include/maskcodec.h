#ifndef MASKCODEC_H
#define MASKCODEC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum McStatus {
  MC_STATUS_OK = 0,
  MC_STATUS_NULL_POINTER = 1,
  MC_STATUS_INVALID_ARGUMENT = 2,
  MC_STATUS_DIMENSION = 3,
  MC_STATUS_SCHEDULE = 4,
  MC_STATUS_MODEL_MISMATCH = 5,
  MC_STATUS_BITSTREAM = 6,
  MC_STATUS_TRUNCATED = 7,
  MC_STATUS_CHECKSUM = 8,
  MC_STATUS_PARSE = 9,
  MC_STATUS_IO = 10,
  MC_STATUS_BUFFER_TOO_SMALL = 11,
  MC_STATUS_INTERNAL = 12,
} McStatus;

/**
 * An entropy model usable for coding.
 */
typedef struct McModel McModel;

/**
 * Library-owned bytes.
 */
typedef struct McBytes {
  uint8_t *data;
  size_t len;
} McBytes;

/**
 * Dimensions and coding state recorded in a stream header.
 */
typedef struct McStreamInfo {
  uint32_t h;
  uint32_t w;
  uint32_t vocab;
  uint32_t groups_transmitted;
  uint32_t payload_bytes;
  uint32_t header_bytes;
  uint64_t sample_seed;
} McStreamInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *mc_last_error(void);

/**
 * Library version as a static string.
 */
const char *mc_version(void);

enum McStatus mc_model_uniform(uint32_t vocab, struct McModel **out);

/**
 * Adaptive counting model starting from empty counts.
 */
enum McStatus mc_model_counting(uint32_t vocab, struct McModel **out);

/**
 * Loads a counting, MIM or VAR checkpoint file.
 */
enum McStatus mc_model_load(const char *path, struct McModel **out);

uint32_t mc_model_vocab(const struct McModel *model);

void mc_model_free(struct McModel *model);

/**
 * Encodes an `h × w` row-major token grid. `groups` is the number of
 * groups to transmit, 0 meaning all of them; `sample_seed` is stored for
 * hybrid decoding.
 */
enum McStatus mc_encode(const struct McModel *model,
                        const uint32_t *tokens,
                        uint32_t h,
                        uint32_t w,
                        const char *schedule,
                        uint32_t groups,
                        uint64_t sample_seed,
                        struct McBytes *out);

void mc_bytes_free(struct McBytes bytes);

enum McStatus mc_stream_info(const uint8_t *data, size_t len, struct McStreamInfo *info);

/**
 * Losslessly decodes a fully transmitted stream into `tokens_out`
 * (row-major, `cap` entries available).
 */
enum McStatus mc_decode(const struct McModel *model,
                        const uint8_t *data,
                        size_t len,
                        uint32_t *tokens_out,
                        size_t cap);

/**
 * Decodes the transmitted groups and samples the remaining ones with
 * `seed`.
 */
enum McStatus mc_hybrid_decode(const struct McModel *model,
                               const uint8_t *data,
                               size_t len,
                               uint64_t seed,
                               uint32_t *tokens_out,
                               size_t cap);

/**
 * Bits per pixel of uniformly coded `h × w` tokens over a `img_h × img_w`
 * image.
 */
enum McStatus mc_rate_uniform(uint32_t h,
                              uint32_t w,
                              uint32_t vocab,
                              uint32_t img_h,
                              uint32_t img_w,
                              double *out);

enum McStatus mc_savings_percent(double bpp, double baseline, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKCODEC_H */
