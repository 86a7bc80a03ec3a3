#include <stdio.h>
#include <stdlib.h>

#include "drape.h"

int main(int argc, char **argv) {
  if (argc != 4) {
    fprintf(stderr, "usage: smoke CHECKPOINT BODY GARMENT\n");
    return 2;
  }
  DrapeModel *model = NULL;
  if (drape_model_load(argv[1], argv[2], argv[3], false, &model) != DRAPE_STATUS_OK) {
    fprintf(stderr, "load: %s\n", drape_last_error());
    return 1;
  }
  DrapeModelInfo info;
  drape_model_info(model, &info);
  printf("version %s\nvertices %zu\n", drape_version(), info.vertices);

  size_t np = 3 * info.joints;
  double *theta = calloc(np, sizeof(double));
  double *out = malloc(3 * info.vertices * sizeof(double));
  DrapeStatus s = drape_pose_outfit(model, theta, np, NULL, out, 3 * info.vertices);
  if (s != DRAPE_STATUS_OK) {
    fprintf(stderr, "pose: %s\n", drape_last_error());
    return 1;
  }
  printf("v0 %.17g %.17g %.17g\n", out[0], out[1], out[2]);

  if (drape_pose_outfit(model, theta, np, NULL, out, 3) != DRAPE_STATUS_BUFFER_TOO_SMALL) {
    fprintf(stderr, "short buffer accepted\n");
    return 1;
  }
  free(theta);
  free(out);
  drape_model_free(model);
  return 0;
}
