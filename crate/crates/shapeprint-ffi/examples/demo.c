/* Minimal consumer of the C API: synthesise two devices, shape them, learn
 * profiles, and classify one of the shaped traces.
 *
 * Build (from the repository root, after `cargo build -p shapeprint-ffi`):
 *   cc crates/shapeprint-ffi/examples/demo.c \
 *      -Icrates/shapeprint-ffi/include \
 *      target/debug/libshapeprint_ffi.a -lm -o demo
 */
#include <stdio.h>
#include <stdlib.h>

#include "shapeprint.h"

#define CHECK(call)                                                   \
    do {                                                              \
        sp_status s = (call);                                         \
        if (s != SP_OK) {                                             \
            fprintf(stderr, "%s failed: %s (%s)\n", #call,            \
                    sp_status_name(s), sp_last_error_message());      \
            exit(1);                                                  \
        }                                                             \
    } while (0)

int main(void) {
    printf("shapeprint %s, %zu corpus devices\n", sp_version(),
           sp_corpus_device_count());

    sp_trace *raw[2] = {NULL, NULL};
    sp_trace *shaped[2] = {NULL, NULL};
    for (size_t i = 0; i < 2; i++) {
        CHECK(sp_synth_device(i, 600.0, 42 + i, &raw[i]));
        CHECK(sp_stp_shape(raw[i], 0.1, 1.0, 100.0, 80, 7 + i, &shaped[i]));
        printf("device %zu: %zu real packets -> %zu shaped\n", i,
               sp_trace_len(raw[i]), sp_trace_len(shaped[i]));
    }

    sp_profiles *profiles = NULL;
    const sp_trace *learn[2] = {shaped[0], shaped[1]};
    CHECK(sp_profiles_learn(learn, 2, &profiles));

    char id[64];
    double distance = 0.0;
    CHECK(sp_classify_dominant(profiles, shaped[0], id, sizeof id, &distance));
    printf("shaped trace 0 classified as %s (distance %.4f)\n", id, distance);

    size_t count = 0;
    CHECK(sp_estimate_count(profiles, shaped[0], &count));
    printf("estimated devices behind the aggregate: %zu\n", count);

    sp_profiles_free(profiles);
    for (size_t i = 0; i < 2; i++) {
        sp_trace_free(raw[i]);
        sp_trace_free(shaped[i]);
    }
    return 0;
}
