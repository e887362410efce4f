/* C interface to the semid engine. All functions return a semid_status; on
 * failure the calling thread's last error message is available through
 * semid_last_error(). Strings handed out by the library are released with
 * semid_string_free(). */
#ifndef SEMID_SEMID_H
#define SEMID_SEMID_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define SEMID_API __declspec(dllexport)
#else
#define SEMID_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum semid_status {
  SEMID_OK = 0,
  SEMID_ERR_INTERNAL = 1,
  SEMID_ERR_CONFIG = 2,
  SEMID_ERR_DATA = 3,
  SEMID_ERR_DIVERGENCE = 4,
  SEMID_ERR_CONTRACT = 5,
  SEMID_ERR_IO = 6
} semid_status;

typedef struct semid_experiment semid_experiment;
typedef struct semid_matrix semid_matrix;

SEMID_API const char* semid_version(void);
SEMID_API const char* semid_last_error(void);
SEMID_API void semid_string_free(char* s);

/* Experiments. `config_path` may be NULL for the built-in defaults. */
SEMID_API semid_status semid_experiment_open(const char* config_path, semid_experiment** out);
SEMID_API void semid_experiment_free(semid_experiment* exp);
/* Overrides applied before the first stage runs. */
SEMID_API semid_status semid_experiment_set_out(semid_experiment* exp, const char* dir);
SEMID_API semid_status semid_experiment_set_seed(semid_experiment* exp, int64_t seed);
/* Output directory of the experiment (owned by the handle). */
SEMID_API const char* semid_experiment_out_dir(const semid_experiment* exp);
/* Resolved configuration as JSON. */
SEMID_API semid_status semid_experiment_config(const semid_experiment* exp, char** json_out);
/* Stage names: ingest, render, tokenize, fuse, train, eval. */
SEMID_API semid_status semid_experiment_run(semid_experiment* exp, const char* last_stage);
/* Evaluation report in "json", "csv" or "table" form (runs eval if needed). */
SEMID_API semid_status semid_experiment_report(semid_experiment* exp, const char* format, char** text_out);
SEMID_API semid_status semid_experiment_geometry(semid_experiment* exp, char** json_out);
SEMID_API semid_status semid_experiment_resolution_harness(semid_experiment* exp, const int* resolutions,
                                                           size_t count, const char* format, char** text_out);

/* Re-formats a report.json file written by a previous run. */
SEMID_API semid_status semid_report_convert(const char* report_json_path, const char* format, char** text_out);

/* Embedding matrix directories (manifest.json + data.bin). */
SEMID_API semid_status semid_matrix_read(const char* dir, semid_matrix** out);
SEMID_API void semid_matrix_free(semid_matrix* m);
SEMID_API size_t semid_matrix_rows(const semid_matrix* m);
SEMID_API size_t semid_matrix_cols(const semid_matrix* m);
SEMID_API const char* semid_matrix_modality(const semid_matrix* m);
SEMID_API const char* semid_matrix_item_id(const semid_matrix* m, size_t row);
/* Copies one row into `out` (length >= cols). */
SEMID_API semid_status semid_matrix_row(const semid_matrix* m, size_t row, double* out);

#ifdef __cplusplus
}
#endif

#endif
