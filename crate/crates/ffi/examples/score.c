/* Scores one point with a checkpoint: score <checkpoint> <x1> <x2> */
#include <stdio.h>
#include <stdlib.h>

#include "fisher_probe.h"

int main(int argc, char **argv) {
  if (argc != 4) {
    fprintf(stderr, "usage: %s <checkpoint> <x1> <x2>\n", argv[0]);
    return 2;
  }
  FpModel *model = NULL;
  FpStatus s = fp_model_load(argv[1], NULL, &model);
  if (s != FP_STATUS_OK) {
    fprintf(stderr, "load failed (%d): %s\n", s, fp_last_error_message());
    return 1;
  }
  double x[2] = {atof(argv[2]), atof(argv[3])};
  double lambda, probs[2];
  size_t prediction;
  s = fp_score_point(model, x, 2, &lambda, &prediction, probs, 2);
  fp_model_free(model);
  if (s != FP_STATUS_OK) {
    fprintf(stderr, "score failed (%d): %s\n", s, fp_last_error_message());
    return 1;
  }
  printf("%.17g %zu %.17g %.17g\n", lambda, prediction, probs[0], probs[1]);
  return 0;
}
