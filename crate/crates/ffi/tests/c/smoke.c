#include <math.h>
#include <stdio.h>
#include <string.h>

#include "transnet.h"

static int fail(const char *what, enum TnetStatus s) {
    const char *msg = tnet_last_error();
    fprintf(stderr, "%s: status %d: %s\n", what, (int)s, msg ? msg : "(none)");
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: smoke CHECKPOINT\n");
        return 2;
    }
    struct TnetModel *m = NULL;
    enum TnetStatus s = tnet_model_load(argv[1], &m);
    if (s != TNET_STATUS_OK) return fail("load", s);

    size_t heads = 0, classes = 0, channels = 0, params = 0;
    s = tnet_model_info(m, &heads, &classes, &channels, &params);
    if (s != TNET_STATUS_OK) return fail("info", s);

    double x[2 * 6 * 6];
    for (size_t i = 0; i < sizeof x / sizeof x[0]; i++) x[i] = (double)(i % 7) / 7.0;
    double full[8] = {0}, head[8] = {0}, pruned_out[8] = {0};
    s = tnet_model_forward_full(m, x, 2, 6, full, 8);
    if (s != TNET_STATUS_OK) return fail("forward_full", s);
    s = tnet_model_forward_head(m, 1, x, 2, 6, head, 8);
    if (s != TNET_STATUS_OK) return fail("forward_head", s);

    struct TnetModel *p = NULL;
    s = tnet_model_prune(m, 1, true, &p);
    if (s != TNET_STATUS_OK) return fail("prune", s);
    s = tnet_model_forward_head(p, 0, x, 2, 6, pruned_out, 8);
    if (s != TNET_STATUS_OK) return fail("forward pruned", s);
    for (size_t k = 0; k < classes; k++) {
        if (fabs(head[k] - pruned_out[k]) > 1e-12) {
            fprintf(stderr, "compiled head differs at %zu\n", k);
            return 1;
        }
    }

    s = tnet_model_forward_head(m, 99, x, 2, 6, head, 8);
    if (s != TNET_STATUS_INVALID_ARGUMENT || tnet_last_error() == NULL) {
        fprintf(stderr, "expected invalid-argument error\n");
        return 1;
    }

    double w[9] = {1, 0, 0, 0, 0, 0, 0, 0, 0};
    double score = 0;
    bool defined = false;
    s = tnet_invariance_score(w, 1, 3, "c4", "norm", false, &score, &defined);
    if (s != TNET_STATUS_OK) return fail("invariance", s);

    printf("heads=%zu classes=%zu channels=%zu params=%zu score=%.6f version=%s\n",
           heads, classes, channels, params, score, tnet_version());
    tnet_model_free(p);
    tnet_model_free(m);
    return 0;
}
