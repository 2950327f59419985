/* C interface to the ssmstyle library.
 *
 * Every fallible call returns an ssm_status. On failure a description is
 * available from ssm_last_error() until the next call on the same thread.
 * Objects are opaque handles released with their _destroy function; strings
 * returned through char** out-parameters are released with ssm_string_free.
 * Handles are not safe to share between threads without external locking.
 */
#ifndef SSMSTYLE_H
#define SSMSTYLE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SSM_API __declspec(dllexport)
#else
#define SSM_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum ssm_status {
  SSM_OK = 0,
  SSM_ERR_DIMENSION = 1,
  SSM_ERR_DEGENERATE_INPUT = 2,
  SSM_ERR_DEGENERATE_PROMPT = 3,
  SSM_ERR_CONTRACT = 4,
  SSM_ERR_INPUT = 5,
  SSM_ERR_NUMERIC = 6,
  SSM_ERR_STATE = 7,
  SSM_ERR_CONFIG = 8,
  SSM_ERR_IO = 9,
  SSM_ERR_NULL_ARGUMENT = 10,
  SSM_ERR_OUT_OF_MEMORY = 11,
  SSM_ERR_INTERNAL = 12
} ssm_status;

SSM_API const char* ssm_version(void);
SSM_API const char* ssm_status_name(ssm_status status);
/* Message of the most recent failure on this thread; "" after a success. */
SSM_API const char* ssm_last_error(void);
SSM_API void ssm_string_free(char* s);

/* ---- run configuration ------------------------------------------------ */

typedef struct ssm_config ssm_config;

SSM_API ssm_status ssm_config_create(ssm_config** out);
SSM_API void ssm_config_destroy(ssm_config* config);
/* Overlays the fields present in a JSON document (see docs/config.md). */
SSM_API ssm_status ssm_config_merge_json(ssm_config* config, const char* json);
SSM_API ssm_status ssm_config_set_content(ssm_config* config, const char* path);
SSM_API ssm_status ssm_config_clear_prompts(ssm_config* config);
SSM_API ssm_status ssm_config_add_prompt(ssm_config* config, const char* prompt);
/* NULL leaves a path unchanged; "" disables that output. */
SSM_API ssm_status ssm_config_set_outputs(ssm_config* config, const char* image, const char* trace,
                                          const char* report);
SSM_API ssm_status ssm_config_validate(const ssm_config* config);
SSM_API ssm_status ssm_config_to_json(const ssm_config* config, char** json_out);

/* ---- stylization -------------------------------------------------------- */

typedef struct ssm_run ssm_run;

/* Runs the full optimization. A numeric failure mid-run still produces a
 * run handle: ssm_run_status then reports SSM_ERR_NUMERIC and the trace holds
 * the completed epochs. */
SSM_API ssm_status ssm_stylize(const ssm_config* config, ssm_run** out);
SSM_API void ssm_run_destroy(ssm_run* run);
SSM_API ssm_status ssm_run_status(const ssm_run* run);
SSM_API ssm_status ssm_run_epochs(const ssm_run* run, size_t* epochs);
/* Row-major [height, width, 3] values in [0, 1], owned by the run. */
SSM_API ssm_status ssm_run_image(const ssm_run* run, size_t* height, size_t* width, const double** pixels);
SSM_API ssm_status ssm_run_trace_csv(const ssm_run* run, char** csv_out);
SSM_API ssm_status ssm_run_report_json(const ssm_run* run, char** json_out);
/* Writes the image, trace and report paths named in the config. */
SSM_API ssm_status ssm_run_write_outputs(const ssm_run* run, const ssm_config* config);

/* ---- experiments and checks --------------------------------------------- */

/* suite: "losses" or "fusion". timing_extent 0 skips the large-latent timing
 * runs of the fusion suite. */
SSM_API ssm_status ssm_ablate(const ssm_config* config, const char* suite, size_t timing_extent,
                              size_t timing_epochs, char** csv_out);

/* csv_out is set only when the equality guard passes (*guard_passed = 1). */
SSM_API ssm_status ssm_bench_scan(size_t max_len, size_t channels, size_t reps, unsigned threads,
                                  int* guard_passed, double* guard_max_abs_diff, char** csv_out);

/* module: "all", "tensor", "ssm", "fusion" or "losses". The report is CSV:
 * module,op,instances,max_rel_err,status. */
SSM_API ssm_status ssm_gradcheck(const char* module, uint64_t seed, size_t instances, int inject_fault,
                                 int* passed, char** report_out);

/* Compares a stylized image with its content image. When prompt is non-NULL
 * the report also carries clip_score_analog against that prompt. */
SSM_API ssm_status ssm_metrics(const char* content_path, const char* image_path, const char* prompt,
                               uint64_t model_seed, char** json_out);

/* ---- image I/O ----------------------------------------------------------- */

SSM_API ssm_status ssm_write_file_atomic(const char* path, const char* bytes, size_t size);

#ifdef __cplusplus
}
#endif

#endif /* SSMSTYLE_H */
