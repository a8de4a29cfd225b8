#include <math.h>
#include <stdio.h>
#include <string.h>

#include "soupmix.h"

#define CHECK(call)                                                          \
  do {                                                                       \
    SmStatus st_ = (call);                                                   \
    if (st_ != SM_STATUS_OK) {                                               \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)st_,              \
              sm_last_error_message());                                      \
      return 1;                                                              \
    }                                                                        \
  } while (0)

/* accuracy peaks when enc.w is all 0.5 */
static int evaluate(void *user_data, const SmParams *params, double *out) {
  const float *data;
  size_t len;
  int *calls = (int *)user_data;
  if (sm_params_tensor_data(params, "enc.w", &data, &len) != SM_STATUS_OK)
    return 1;
  double d = 0.0;
  for (size_t i = 0; i < len; i++)
    d += (data[i] - 0.5) * (data[i] - 0.5);
  *out = 1.0 / (1.0 + d);
  (*calls)++;
  return 0;
}

static int make(float a, float b, SmParams **out) {
  size_t shape[1] = {2};
  float enc[2] = {a, b};
  float head[2] = {b, a};
  CHECK(sm_params_new("enc.w", shape, 1, enc, out));
  CHECK(sm_params_push(*out, "head.w", shape, 1, head));
  return 0;
}

int main(int argc, char **argv) {
  const char *path = argc > 1 ? argv[1] : "smoke.ckpt";
  SmParams *models[3];
  if (make(0.0f, 1.0f, &models[0]) || make(1.0f, 0.0f, &models[1]) ||
      make(0.4f, 0.6f, &models[2]))
    return 1;

  SmParams *avg;
  CHECK(sm_params_mean((const SmParams *const *)models, 3, &avg));
  CHECK(sm_params_save(avg, path));
  SmParams *loaded;
  CHECK(sm_params_load(path, &loaded));
  const float *data;
  size_t len;
  CHECK(sm_params_tensor_data(loaded, "enc.w", &data, &len));
  if (len != 2 || fabsf(data[0] - 1.4f / 3.0f) > 1e-6f) {
    fprintf(stderr, "unexpected mean %f\n", data[0]);
    return 1;
  }

  SmPartition *spec;
  CHECK(sm_partition_auto(models[0], 2, "contiguous-blocks", &spec));
  double lambda[2] = {1.0, 0.0};
  SmParams *mixed;
  CHECK(sm_mix_components(models[0], models[1], spec, lambda, 2, &mixed));
  CHECK(sm_params_tensor_data(mixed, "head.w", &data, &len));
  if (data[0] != 0.0f || data[1] != 1.0f) {
    fprintf(stderr, "head.w should come from theta\n");
    return 1;
  }

  int calls = 0;
  SmManifoldOptions opts = sm_manifold_options_default();
  opts.budget = 40;
  SmParams *fused;
  char *report = NULL;
  CHECK(sm_manifold_soup((const SmParams *const *)models, NULL, 3, spec,
                         evaluate, &calls, &opts, &fused, &report));
  if (calls == 0 || report == NULL || strstr(report, "\"manifold\"") == NULL) {
    fprintf(stderr, "bad soup result\n");
    return 1;
  }

  if (sm_params_load("/nonexistent/x.ckpt", &loaded) != SM_STATUS_IO ||
      sm_last_error_message() == NULL) {
    fprintf(stderr, "missing file not reported as io error\n");
    return 1;
  }

  printf("ok calls=%d\n", calls);
  sm_string_free(report);
  sm_params_free(fused);
  sm_params_free(mixed);
  sm_partition_free(spec);
  sm_params_free(loaded);
  sm_params_free(avg);
  for (int i = 0; i < 3; i++)
    sm_params_free(models[i]);
  return 0;
}
