#ifndef HRED_FFI_H
#define HRED_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HredStatus {
  HRED_STATUS_OK = 0,
  HRED_STATUS_NULL_ARGUMENT = 1,
  HRED_STATUS_INVALID_UTF8 = 2,
  HRED_STATUS_IO = 3,
  HRED_STATUS_CHECKPOINT = 4,
  HRED_STATUS_INVALID_ARGUMENT = 5,
  HRED_STATUS_UNKNOWN_SESSION = 6,
  HRED_STATUS_EMPTY_UTTERANCE = 7,
  HRED_STATUS_INTERNAL = 8,
} HredStatus;

// A loaded model, its vocabulary and tokenizer.
typedef struct HredModel HredModel;

// One conversation with a model. Keeps the model alive, so it may be freed
// after the model handle.
typedef struct HredSession HredSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL. Valid until
// the next failing call on the same thread; do not free.
const char *hred_last_error(void);

// Releases a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void hred_string_free(char *s);

// Loads a checkpoint. `gazetteer_path` (one name per line) may be NULL.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum HredStatus hred_model_load(const char *checkpoint_path,
                                const char *gazetteer_path,
                                struct HredModel **out);

// Frees a model. NULL is ignored.
//
// # Safety
// `model` must come from [`hred_model_load`] and not have been freed.
void hred_model_free(struct HredModel *model);

// JSON object with variant, dimensions and vocabulary hash.
//
// # Safety
// `model` must be a live handle; `out_json` must be writable.
enum HredStatus hred_model_info(const struct HredModel *model, char **out_json);

// Evaluates the model on a triples file and returns the report as JSON
// (`ppl`, `ppl_u3`, `wer`, `wer_u3`, `n`, `n_w`, `n_w_u3`).
//
// # Safety
// `model` must be a live handle; `out_json` must be writable.
enum HredStatus hred_model_evaluate(const struct HredModel *model,
                                    const char *data_path,
                                    char **out_json);

// Starts a conversation. `settings_json` may be NULL for defaults, or an
// object with any of `mode` ("map" | "sample"), `width`, `temperature`,
// `seed`, `max_len`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum HredStatus hred_session_new(const struct HredModel *model,
                                 const char *settings_json,
                                 struct HredSession **out);

// Ends a conversation. NULL is ignored.
//
// # Safety
// `session` must come from [`hred_session_new`] and not have been freed.
void hred_session_free(struct HredSession *session);

// Sends one user utterance and returns the model's reply as JSON
// (`response`, `tokens`, `log_prob`, `turn`, `finished`, `session_id`).
//
// # Safety
// `session` must be a live handle; `out_json` must be writable.
enum HredStatus hred_session_turn(struct HredSession *session,
                                  const char *utterance,
                                  char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HRED_FFI_H */
