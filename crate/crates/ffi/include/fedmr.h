#ifndef FEDMR_H
#define FEDMR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by the API.
typedef enum FedmrStatus {
  FedmrStatus_Ok = 0,
  FedmrStatus_NullPointer = 1,
  FedmrStatus_InvalidConfig = 2,
  FedmrStatus_RunFailed = 3,
  FedmrStatus_NotRun = 4,
} FedmrStatus;

// Opaque experiment handle: a built run plan plus, after a successful run,
// its reports and summary.
typedef struct FedmrExperiment FedmrExperiment;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *fedmr_version(void);

// The most recent error message on this thread, or NULL. The caller owns
// the returned string and must free it with `fedmr_string_free`.
char *fedmr_last_error_message(void);

// Parses a JSON experiment config and builds the run plan (datasets,
// partition, model). Returns NULL on error.
//
// # Safety
// `config_json` must be a valid NUL-terminated C string.
struct FedmrExperiment *fedmr_experiment_from_json(const char *config_json);

// Runs all configured rounds. Idempotent: rerunning replaces the results.
//
// # Safety
// `exp` must be a pointer returned by [`fedmr_experiment_from_json`] that
// has not been freed.
enum FedmrStatus fedmr_experiment_run(struct FedmrExperiment *exp);

// Round reports as newline-delimited JSON, or NULL before a successful
// run. Caller frees via `fedmr_string_free`.
//
// # Safety
// `exp` must be a valid handle.
char *fedmr_experiment_rounds_jsonl(const struct FedmrExperiment *exp);

// The end-of-run summary as JSON, or NULL before a successful run. Caller
// frees via `fedmr_string_free`.
//
// # Safety
// `exp` must be a valid handle.
char *fedmr_experiment_summary_json(const struct FedmrExperiment *exp);

// Releases a string returned by this library. NULL is a no-op.
//
// # Safety
// `s` must be a pointer previously returned by this library and not yet
// freed.
void fedmr_string_free(char *s);

// Releases an experiment handle. NULL is a no-op.
//
// # Safety
// `exp` must be a pointer previously returned by
// [`fedmr_experiment_from_json`] and not yet freed.
void fedmr_experiment_free(struct FedmrExperiment *exp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDMR_H */
