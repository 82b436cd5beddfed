#ifndef STYLELESS_H
#define STYLELESS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define STL_FILTER_REMOVE 0

#define STL_FILTER_WEIGHTING 1

#define STL_FILTER_NOISE 2

#define STL_CORRUPTION_HAZE 0

#define STL_CORRUPTION_RAIN 1

#define STL_CORRUPTION_GAUSS_NOISE 2

#define STL_CORRUPTION_GAUSS_BLUR 3

#define STL_CORRUPTION_CONTRAST 4

#define STL_GROUP_ALL 0

#define STL_GROUP_BACKBONE 1

#define STL_GROUP_STYLELESS 2

// Result code of every fallible call.
typedef enum StlStatus {
  STL_STATUS_OK = 0,
  STL_STATUS_NULL_POINTER = 1,
  STL_STATUS_INVALID_ARGUMENT = 2,
  STL_STATUS_SHAPE = 3,
  STL_STATUS_IO = 4,
  STL_STATUS_FORMAT = 5,
  STL_STATUS_CHECKPOINT = 6,
  STL_STATUS_INTERNAL = 7,
} StlStatus;

// Opaque `uint8` label map.
typedef struct StlLabels StlLabels;

// Opaque segmentation network.
typedef struct StlNetwork StlNetwork;

// Opaque `float32` tensor.
typedef struct StlTensor StlTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *stl_last_error(void);

// Library version as a static NUL-terminated string.
const char *stl_version(void);

// Copy `len` floats from `data` into a new tensor of the given shape.
enum StlStatus stl_tensor_new(const size_t *shape,
                              size_t ndim,
                              const float *data,
                              size_t len,
                              struct StlTensor **out);

void stl_tensor_free(struct StlTensor *t);

// Number of dimensions; 0 for a null handle.
size_t stl_tensor_ndim(const struct StlTensor *t);

// Number of elements; 0 for a null handle.
size_t stl_tensor_len(const struct StlTensor *t);

// Write the shape into `dims`, which must hold `stl_tensor_ndim(t)` entries.
enum StlStatus stl_tensor_shape(const struct StlTensor *t, size_t *dims, size_t cap);

// Borrowed pointer to the tensor's elements, valid while the handle lives.
const float *stl_tensor_data(const struct StlTensor *t);

enum StlStatus stl_tensor_load(const char *path, struct StlTensor **out);

enum StlStatus stl_tensor_save(const struct StlTensor *t, const char *path);

// Normalized Gram matrix `(c, c)` of a `(c, h, w)` feature map.
enum StlStatus stl_gram(const struct StlTensor *features, struct StlTensor **out);

// Gram loss over `n` layers given input and output feature maps.
enum StlStatus stl_gram_loss(const struct StlTensor *const *features_in,
                             const struct StlTensor *const *features_out,
                             size_t n,
                             double *out);

// Apply a style-perturbation filter (`STL_FILTER_*`) to a `(c, h, w)` map.
enum StlStatus stl_filter_apply(const struct StlTensor *features,
                                uint32_t kind,
                                double p,
                                double tau,
                                uint64_t seed,
                                struct StlTensor **out);

// Procedural scene: a `(3, 64, 64)` image and its `(64, 64)` labels.
enum StlStatus stl_scene_generate(uint64_t seed,
                                  struct StlTensor **image,
                                  struct StlLabels **labels);

// Corrupt an RGB image with `STL_CORRUPTION_*` at severity 1..=5.
enum StlStatus stl_corrupt(const struct StlTensor *image,
                           uint32_t kind,
                           uint8_t severity,
                           uint64_t seed,
                           struct StlTensor **out);

void stl_labels_free(struct StlLabels *l);

// Height and width of a label map.
enum StlStatus stl_labels_shape(const struct StlLabels *l, size_t *height, size_t *width);

// Borrowed pointer to the labels, valid while the handle lives.
const uint8_t *stl_labels_data(const struct StlLabels *l);

// Copy `height * width` labels into a new label map.
enum StlStatus stl_labels_new(size_t height,
                              size_t width,
                              const uint8_t *data,
                              struct StlLabels **out);

// Mean IoU over road, vehicle and vulnerable; pixels labeled 255 are
// ignored. Writes NaN when none of the classes occurs.
enum StlStatus stl_miou(const struct StlLabels *preds, const struct StlLabels *labels, double *out);

// Load a checkpoint directory.
enum StlStatus stl_network_load(const char *path, struct StlNetwork **out);

// Freshly initialized backbone with the default widths.
enum StlStatus stl_network_new(uint64_t seed, struct StlNetwork **out);

void stl_network_free(struct StlNetwork *n);

// Insert StyleLess layers (identity at insertion).
enum StlStatus stl_network_insert_styleless(struct StlNetwork *n, uint64_t seed);

// Parameter count of an `STL_GROUP_*` selection.
enum StlStatus stl_network_parameter_count(const struct StlNetwork *n, uint32_t group, size_t *out);

// Per-pixel class prediction for a `(3, H, W)` image.
enum StlStatus stl_network_predict(const struct StlNetwork *n,
                                   const struct StlTensor *image,
                                   struct StlLabels **out);

// Class logits `(4, H, W)` for a `(3, H, W)` image.
enum StlStatus stl_network_logits(const struct StlNetwork *n,
                                  const struct StlTensor *image,
                                  struct StlTensor **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STYLELESS_H */
