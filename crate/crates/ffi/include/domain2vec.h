#ifndef DOMAIN2VEC_H
#define DOMAIN2VEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum D2vStatus {
  D2V_STATUS_OK = 0,
  D2V_STATUS_NULL_POINTER = 1,
  /*
   Invalid argument, configuration or precondition.
   */
  D2V_STATUS_INVALID_ARGUMENT = 2,
  /*
   A computation produced NaN or infinity.
   */
  D2V_STATUS_NUMERIC = 3,
  D2V_STATUS_IO = 4,
  D2V_STATUS_NOT_FOUND = 5,
  D2V_STATUS_INTERNAL = 6,
} D2vStatus;

/*
 Embeddings and distances for a set of domains.
 */
typedef struct D2vEmbedding D2vEmbedding;

/*
 Loaded corpus manifest.
 */
typedef struct D2vManifest D2vManifest;

/*
 Loaded network.
 */
typedef struct D2vModel D2vModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty after a success.
 Valid until the next call on the same thread.
 */
const char *d2v_last_error(void);

/*
 Renders a corpus into `out_dir`. `config_path` may be null for defaults;
 `full_scale` selects the full grid instead of the desk grid.
 */
enum D2vStatus d2v_generate_corpus(const char *config_path,
                                   bool full_scale,
                                   uint64_t seed,
                                   const char *out_dir,
                                   struct D2vManifest **out);

enum D2vStatus d2v_manifest_load(const char *path, struct D2vManifest **out);

/*
 Number of domains, or 0 for a null handle.
 */
uintptr_t d2v_manifest_num_domains(const struct D2vManifest *m);

void d2v_manifest_free(struct D2vManifest *m);

enum D2vStatus d2v_model_load(const char *checkpoint, struct D2vModel **out);

void d2v_model_free(struct D2vModel *m);

/*
 Top-1 accuracy on the domain's held-out split.
 */
enum D2vStatus d2v_model_evaluate(const struct D2vModel *model,
                                  const struct D2vManifest *manifest,
                                  uint32_t domain_id,
                                  double *accuracy);

/*
 Embeds every manifest domain with default settings (cosine distance,
 standardized raw vectors). `include_gram = false` keeps prototypes only.
 */
enum D2vStatus d2v_embed(const struct D2vModel *model,
                         const struct D2vManifest *manifest,
                         bool include_gram,
                         uint64_t seed,
                         struct D2vEmbedding **out);

enum D2vStatus d2v_embedding_load(const char *dir, struct D2vEmbedding **out);

/*
 Number of embedded domains, or 0 for a null handle.
 */
uintptr_t d2v_embedding_count(const struct D2vEmbedding *e);

enum D2vStatus d2v_embedding_distance(const struct D2vEmbedding *e,
                                      uint32_t a,
                                      uint32_t b,
                                      double *distance);

enum D2vStatus d2v_embedding_save(const struct D2vEmbedding *e, const char *dir);

void d2v_embedding_free(struct D2vEmbedding *e);

/*
 Softmax source weights from `n` distances at temperature `tau`, written to `weights[0..n]`.
 */
enum D2vStatus d2v_distance_to_weights(const double *distances,
                                       uintptr_t n,
                                       double tau,
                                       double *weights);

/*
 Pearson correlation of `x[0..n]` and `y[0..n]`.
 */
enum D2vStatus d2v_pearson(const double *x, const double *y, uintptr_t n, double *rho);

/*
 Library version as a static NUL-terminated string.
 */
const char *d2v_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DOMAIN2VEC_H */
