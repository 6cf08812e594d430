#ifndef VINO_H
#define VINO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 4 match the command-line exit codes.
 */
typedef enum VinoStatus {
  VINO_STATUS_OK = 0,
  /**
   * Null pointer, bad UTF-8 or an out-of-range argument.
   */
  VINO_STATUS_INVALID_ARGUMENT = 1,
  VINO_STATUS_CONFIG = 2,
  VINO_STATUS_DATA = 3,
  VINO_STATUS_NUMERIC = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  VINO_STATUS_INTERNAL = 5,
} VinoStatus;

/**
 * Experiment configuration.
 */
typedef struct VinoConfig VinoConfig;

/**
 * Frozen encoder ready for single-object discovery.
 */
typedef struct VinoDetector VinoDetector;

/**
 * Axis-aligned box in pixels.
 */
typedef struct VinoBox {
  double x;
  double y;
  double w;
  double h;
} VinoBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Owned by the
 * library; valid until the next call.
 */
const char *vino_last_error(void);

/**
 * Library version as a static string.
 */
const char *vino_version(void);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VinoStatus vino_config_default(struct VinoConfig **out);

/**
 * Configuration from dotted key-value text; unset keys keep their defaults.
 *
 * # Safety
 * `toml` must be a nul-terminated string and `out` a valid pointer.
 */
enum VinoStatus vino_config_parse(const char *toml, struct VinoConfig **out);

/**
 * Dotted form of the configuration. Free with `vino_string_free`.
 *
 * # Safety
 * `config` must come from this library; `out` must be a valid pointer.
 */
enum VinoStatus vino_config_to_string(const struct VinoConfig *config, char **out);

/**
 * # Safety
 * `config` must come from this library or be null.
 */
void vino_config_free(struct VinoConfig *config);

/**
 * # Safety
 * `s` must come from this library or be null.
 */
void vino_string_free(char *s);

/**
 * Renders the configured synthetic corpus to `out_dir`.
 *
 * # Safety
 * `config` must come from this library; `out_dir` must be a nul-terminated string.
 */
enum VinoStatus vino_synth_generate(const struct VinoConfig *config, const char *out_dir);

/**
 * Trains from scratch on the videos under `data_dir`, writing the log and
 * checkpoints to `out_dir`.
 *
 * # Safety
 * `config` must come from this library; the paths must be nul-terminated strings.
 */
enum VinoStatus vino_pretrain(const struct VinoConfig *config,
                              const char *data_dir,
                              const char *out_dir);

/**
 * Loads the teacher (or, with `use_student` non-zero, the student) of a checkpoint.
 *
 * # Safety
 * `checkpoint` must be a nul-terminated string and `out` a valid pointer.
 */
enum VinoStatus vino_detector_load(const char *checkpoint,
                                   int32_t use_student,
                                   struct VinoDetector **out);

/**
 * # Safety
 * `detector` must come from this library or be null.
 */
void vino_detector_free(struct VinoDetector *detector);

/**
 * Box around the most salient object of an image given as row-major
 * interleaved RGB floats in [0, 1].
 *
 * # Safety
 * `rgb` must point to `height * width * 3` floats; `out` must be valid.
 */
enum VinoStatus vino_detector_detect(const struct VinoDetector *detector,
                                     const float *rgb,
                                     size_t height,
                                     size_t width,
                                     struct VinoBox *out);

/**
 * Head-averaged class-token attention, row-major on the patch grid.
 * `out` must hold `capacity` floats; the grid size is written to `rows` and `cols`.
 *
 * # Safety
 * Pointers must be valid for the stated sizes.
 */
enum VinoStatus vino_detector_attention(const struct VinoDetector *detector,
                                        const float *rgb,
                                        size_t height,
                                        size_t width,
                                        double *out,
                                        size_t capacity,
                                        size_t *rows,
                                        size_t *cols);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VinoStatus vino_iou(struct VinoBox a, struct VinoBox b, double *out);

/**
 * Percentage of IoUs at or above 0.5.
 *
 * # Safety
 * `ious` must point to `n` doubles; `out` must be valid.
 */
enum VinoStatus vino_corloc(const double *ious, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VINO_H */
