/* Minimal C client: train a tiny model for a few steps and evaluate. */
#include <stdio.h>
#include "semmim.h"

static const char *CONFIG =
    "image_size = 16\npatch_size = 8\nembed_dim = 16\nimage_layers = 2\n"
    "text_layers = 1\nfusion_layers = 1\ndecoder_layers = 1\nheads = 2\n"
    "mlp_ratio = 2\ncode_dim = 8\nhead_hidden = 8\ninject_start_layer = 2\n"
    "[train]\nbatch_size = 4\ncorpus_size = 16\nheldout = 4\nwarmup_steps = 2\n";

int main(void) {
    SemmimTrainer *t = NULL;
    SemmimLosses l;
    SemmimRecall r;
    if (semmim_trainer_new(CONFIG, 1, &t) != SEMMIM_STATUS_OK) {
        fprintf(stderr, "new: %s\n", semmim_last_error());
        return 1;
    }
    if (semmim_trainer_step(t, 2, &l) != SEMMIM_STATUS_OK) {
        fprintf(stderr, "step: %s\n", semmim_last_error());
        return 1;
    }
    if (semmim_trainer_eval(t, SEMMIM_SPLIT_TEST, &r) != SEMMIM_STATUS_OK) {
        fprintf(stderr, "eval: %s\n", semmim_last_error());
        return 1;
    }
    printf("steps=%llu total=%.4f pairs=%zu r1=%.3f\n",
           (unsigned long long)semmim_trainer_step_count(t), l.total, r.pairs, r.image_to_text[0]);
    if (semmim_trainer_step(NULL, 1, NULL) != SEMMIM_STATUS_NULL_POINTER) return 1;
    semmim_trainer_free(t);
    return 0;
}
