#ifndef ROMELAB_H
#define ROMELAB_H

/* C interface to the romelab experiment pipeline.
 *
 * Every function returns a romelab_status. On failure the calling thread's
 * last error is set; romelab_last_error() returns it as a JSON object
 * {"code": <int>, "error": <name>, "message": <text>}.
 * Strings returned through char** out-parameters are owned by the caller and
 * released with romelab_free_string(). */

#include <stdint.h>

#if defined(_WIN32)
#define ROMELAB_API __declspec(dllexport)
#else
#define ROMELAB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum romelab_status {
  ROMELAB_OK = 0,
  ROMELAB_INVALID_ARGUMENT = 1,
  ROMELAB_DIMENSION = 2,
  ROMELAB_SINGULAR = 3,
  ROMELAB_DEGENERATE_KEY = 4,
  ROMELAB_BOUNDS = 5,
  ROMELAB_EMPTY_STATISTICS = 6,
  ROMELAB_TRAINING_FAILURE = 7,
  ROMELAB_OPTIMIZATION_FAILURE = 8,
  ROMELAB_TOKENIZATION = 9,
  ROMELAB_INSUFFICIENT_DATA = 10,
  ROMELAB_IO = 11,
  ROMELAB_FORMAT = 12,
  ROMELAB_INTERNAL = 99
} romelab_status;

/* Name of the environment variable holding the default output root. */
#define ROMELAB_OUTPUT_ROOT_ENV "ROMELAB_OUTPUT_ROOT"

typedef struct romelab_experiment romelab_experiment;
typedef struct romelab_model romelab_model;

ROMELAB_API const char* romelab_version(void);
ROMELAB_API const char* romelab_status_name(romelab_status status);
ROMELAB_API const char* romelab_last_error(void);
ROMELAB_API void romelab_free_string(char* s);

/* config_json may be NULL for defaults. When the config does not set
 * output_root, the ROMELAB_OUTPUT_ROOT environment variable is used if set. */
ROMELAB_API romelab_status romelab_experiment_create(const char* config_json, romelab_experiment** out);
ROMELAB_API void romelab_experiment_destroy(romelab_experiment* exp);
/* Sets a dotted config field ("trace.window_width") to a JSON value ("3"). */
ROMELAB_API romelab_status romelab_experiment_set(romelab_experiment* exp, const char* field, const char* json_value);
ROMELAB_API romelab_status romelab_experiment_config(const romelab_experiment* exp, char** out_json);

/* Pipeline commands; each writes its artifacts under the output root and
 * returns a JSON summary through out_json (may be NULL). */
ROMELAB_API romelab_status romelab_world(romelab_experiment* exp, char** out_json);
ROMELAB_API romelab_status romelab_train(romelab_experiment* exp, char** out_json);
/* site: "hidden", "mlp" or "attn"; n_prompts < 0 uses the config value. */
ROMELAB_API romelab_status romelab_trace(romelab_experiment* exp, const char* site, int disable_mlp, int n_prompts,
                                         char** out_json);
/* method: "rome", "ft", "ft+l" or "attnedit". */
ROMELAB_API romelab_status romelab_edit(romelab_experiment* exp, const char* method, char** out_json);
/* method: as for romelab_edit, or "none" for the unedited model. */
ROMELAB_API romelab_status romelab_eval(romelab_experiment* exp, const char* method, char** out_json);
ROMELAB_API romelab_status romelab_sweep(romelab_experiment* exp, const char* method, char** out_json);

/* Checkpoint access. */
ROMELAB_API romelab_status romelab_model_load(const char* checkpoint_path, romelab_model** out);
ROMELAB_API void romelab_model_destroy(romelab_model* model);
/* P[target | prompt], multi-token targets teacher-forced. */
ROMELAB_API romelab_status romelab_model_probability(const romelab_model* model, const char* prompt,
                                                     const char* target, double* out);
/* Greedy continuation of at most max_len tokens. */
ROMELAB_API romelab_status romelab_model_complete(const romelab_model* model, const char* prompt, int max_len,
                                                  char** out_text);

#ifdef __cplusplus
}
#endif

#endif /* ROMELAB_H */
