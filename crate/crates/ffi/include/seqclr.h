#ifndef SEQCLR_H
#define SEQCLR_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every fallible call. */
#define SEQCLR_OK 0
#define SEQCLR_ERR_NULL 1
#define SEQCLR_ERR_ARGUMENT 2
#define SEQCLR_ERR_IO 3
#define SEQCLR_ERR_CONFIG 4
#define SEQCLR_ERR_DATA 5
#define SEQCLR_ERR_INCOMPATIBLE 6
#define SEQCLR_ERR_DIVERGENCE 7
#define SEQCLR_ERR_BUFFER_TOO_SMALL 8
#define SEQCLR_ERR_PANIC 9

/* Opaque checkpoint handle. */
typedef struct SeqclrCheckpoint SeqclrCheckpoint;

const char *seqclr_version(void);

/* Message of the last failed call on this thread, "" after a success.
   Valid until the next call on the same thread. */
const char *seqclr_last_error(void);

int seqclr_edit_distance(const char *a, const char *b, size_t *out);

/* logp: frames x classes, row-major log-probabilities.
   Writes +inf when the target does not fit in `frames`. */
int seqclr_ctc_loss(const double *logp, size_t frames, size_t classes,
                    const size_t *target, size_t target_len, size_t blank,
                    double *out);

/* za, zb: m x d row-major; loss summed over all 2m anchors. */
int seqclr_contrastive_loss(const double *za, const double *zb, size_t m,
                            size_t d, double tau, double *out);

int seqclr_checkpoint_load(const char *path, SeqclrCheckpoint **out);
void seqclr_checkpoint_free(SeqclrCheckpoint *h);
int seqclr_checkpoint_iteration(const SeqclrCheckpoint *h, uint64_t *out);
int seqclr_checkpoint_has_decoder(const SeqclrCheckpoint *h, int *out);

/* Needs cap >= 65. `len` may be NULL. */
int seqclr_checkpoint_encoder_digest(const SeqclrCheckpoint *h, char *buf,
                                     size_t cap, size_t *len);

/* pixels: height x width grayscale in [0, 1]. On SEQCLR_ERR_BUFFER_TOO_SMALL
   `len` still receives the needed length minus the NUL. */
int seqclr_recognize(const SeqclrCheckpoint *h, const double *pixels,
                     size_t height, size_t width, char *buf, size_t cap,
                     size_t *len);

#ifdef __cplusplus
}
#endif

#endif
