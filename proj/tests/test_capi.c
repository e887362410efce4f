#include "semid/semid.h"

#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

static int failures = 0;

#define EXPECT(cond)                                                   \
  do {                                                                 \
    if (!(cond)) {                                                     \
      fprintf(stderr, "%s:%d: expected %s\n", __FILE__, __LINE__, #cond); \
      ++failures;                                                      \
    }                                                                  \
  } while (0)

int main(int argc, char** argv) {
  if (argc < 4) {
    fprintf(stderr, "usage: test_capi <smoke.json> <bridge-matrix-dir> <scratch-dir>\n");
    return 2;
  }
  EXPECT(strlen(semid_version()) > 0);

  semid_experiment* exp = NULL;
  EXPECT(semid_experiment_open("/nonexistent.json", &exp) == SEMID_ERR_CONFIG);
  EXPECT(exp == NULL);
  EXPECT(strstr(semid_last_error(), "not found") != NULL);

  EXPECT(semid_experiment_open(argv[1], &exp) == SEMID_OK);
  EXPECT(semid_experiment_set_out(exp, argv[3]) == SEMID_OK);
  EXPECT(strcmp(semid_experiment_out_dir(exp), argv[3]) == 0);
  EXPECT(semid_experiment_set_seed(exp, 3) == SEMID_OK);
  EXPECT(semid_experiment_run(exp, "publish") == SEMID_ERR_CONFIG);

  char* cfg = NULL;
  EXPECT(semid_experiment_config(exp, &cfg) == SEMID_OK);
  EXPECT(cfg != NULL && strstr(cfg, "\"seeds\"") != NULL);
  semid_string_free(cfg);

  char* csv = NULL;
  EXPECT(semid_experiment_report(exp, "csv", &csv) == SEMID_OK);
  EXPECT(csv != NULL && strncmp(csv, "variant,seed,", 13) == 0);
  EXPECT(csv != NULL && strstr(csv, ",3,") != NULL);
  semid_string_free(csv);

  char* bad = NULL;
  EXPECT(semid_experiment_report(exp, "xml", &bad) == SEMID_ERR_CONFIG);
  EXPECT(bad == NULL);

  char* geo = NULL;
  EXPECT(semid_experiment_geometry(exp, &geo) == SEMID_OK);
  EXPECT(geo != NULL && strstr(geo, "modality_gap") != NULL);
  semid_string_free(geo);
  semid_experiment_free(exp);

  char path[4096];
  snprintf(path, sizeof path, "%s/eval/report.json", argv[3]);
  char* table = NULL;
  EXPECT(semid_report_convert(path, "table", &table) == SEMID_OK);
  EXPECT(table != NULL && strstr(table, "Recall@10") != NULL);
  semid_string_free(table);

  semid_matrix* m = NULL;
  EXPECT(semid_matrix_read(argv[2], &m) == SEMID_OK);
  if (m) {
    EXPECT(semid_matrix_rows(m) == 10);
    EXPECT(semid_matrix_cols(m) == 4);
    EXPECT(strcmp(semid_matrix_modality(m), "ocr_text") == 0);
    EXPECT(strcmp(semid_matrix_item_id(m, 3), "item3") == 0);
    double row[4];
    EXPECT(semid_matrix_row(m, 3, row) == SEMID_OK);
    EXPECT(fabs(row[2] - 0.32) < 1e-6);
    EXPECT(semid_matrix_row(m, 10, row) == SEMID_ERR_CONTRACT);
    semid_matrix_free(m);
  }
  EXPECT(semid_matrix_read("/nonexistent", &m) != SEMID_OK);

  if (failures) fprintf(stderr, "%d failure(s)\n", failures);
  else printf("c api: all checks passed\n");
  return failures ? 1 : 0;
}
