#ifndef CONDATTACK_H
#define CONDATTACK_H

/* C interface to the condattack toolkit.
 *
 * Images are float buffers laid out row-major as [n, c, h, w] with values in [0, 1].
 * Handles are opaque; release them with the matching *_free function.
 * On failure a function returns a non-zero CaStatus and ca_last_error() describes it. */

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum CaStatus {
  CA_OK = 0,
  CA_NULL_POINTER = 1,
  CA_INVALID_INPUT = 2,
  CA_INVALID_PARAMETER = 3,
  CA_IO = 4,
  CA_CHECKPOINT = 5,
  CA_NUMERIC = 6,
  CA_STATE = 7,
  CA_CONFIG = 8,
  CA_TRAINING = 9,
  CA_PANIC = 10,
} CaStatus;

typedef struct CaGenerator CaGenerator;
typedef struct CaClassifier CaClassifier;

const char *ca_version(void);

/* Copies the calling thread's last error message into buf (NUL-terminated, truncated to len).
 * Returns the full message length without the terminator. */
size_t ca_last_error(char *buf, size_t len);

CaStatus ca_generator_load(const char *path, CaGenerator **out);
void ca_generator_free(CaGenerator *handle);
CaStatus ca_generator_epsilon(const CaGenerator *handle, double *out);
CaStatus ca_generator_num_classes(const CaGenerator *handle, size_t *out);

/* out_adv receives n*c*h*w values; out_delta may be NULL. */
CaStatus ca_generator_generate(const CaGenerator *handle,
                               const float *images,
                               size_t n,
                               size_t c,
                               size_t h,
                               size_t w,
                               const uint32_t *targets,
                               float *out_adv,
                               float *out_delta);

CaStatus ca_classifier_load(const char *path, CaClassifier **out);
void ca_classifier_free(CaClassifier *handle);
CaStatus ca_classifier_num_classes(const CaClassifier *handle, size_t *out);

/* out_labels receives n entries; out_probs (n*K values) may be NULL. */
CaStatus ca_classifier_predict(const CaClassifier *handle,
                               const float *images,
                               size_t n,
                               size_t c,
                               size_t h,
                               size_t w,
                               uint32_t *out_labels,
                               float *out_probs);

/* method: "bim", "mim", "dim", "ti-dim", "si-dim" or "logit". steps = 0 uses the default. */
CaStatus ca_attack(const CaClassifier *handle,
                   const char *method,
                   double epsilon,
                   size_t steps,
                   uint64_t seed,
                   const float *images,
                   size_t n,
                   size_t c,
                   size_t h,
                   size_t w,
                   const uint32_t *targets,
                   float *out_adv);

/* weights: row-major [dim, num_classes]. bandwidth <= 0 selects the median heuristic.
 * out_subset[i] receives the subset index of class i. */
CaStatus ca_partition(const double *weights,
                      size_t dim,
                      size_t num_classes,
                      size_t k,
                      uint64_t seed,
                      double bandwidth,
                      uint32_t *out_subset);

#ifdef __cplusplus
}
#endif

#endif /* CONDATTACK_H */
