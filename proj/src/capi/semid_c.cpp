#include "semid/semid.h"

#include "semid/error.hpp"
#include "semid/pipeline.hpp"

#include <cstdlib>
#include <cstring>
#include <optional>
#include <string>

using namespace semid;

struct semid_experiment {
  pipeline::ExperimentConfig config;
  std::optional<pipeline::Experiment> run;
  bool eval_done = false;
  std::string out_dir;

  void refresh() { out_dir = config.out.string(); }
};

struct semid_matrix {
  embedstore::EmbeddingMatrix m;
  std::string modality;
};

namespace {

thread_local std::string g_last_error;

semid_status set_error(semid_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <typename F>
semid_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return SEMID_OK;
  } catch (const Error& e) {
    return set_error(static_cast<semid_status>(static_cast<int>(e.kind())), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(SEMID_ERR_INTERNAL, "out of memory");
  } catch (const std::filesystem::filesystem_error& e) {
    return set_error(SEMID_ERR_IO, e.what());
  } catch (const std::exception& e) {
    return set_error(SEMID_ERR_INTERNAL, e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void check_arg(const void* p, const char* name) {
  if (!p) fail(ErrorKind::contract, std::string("null argument '") + name + "'");
}

pipeline::Experiment& ensure_run(semid_experiment* exp) {
  if (!exp->run) exp->run.emplace(exp->config);
  return *exp->run;
}

void reconfigure(semid_experiment* exp, const nlohmann::json& patch) {
  expects(!exp->run, "configuration is fixed once a stage has run");
  exp->config = exp->config.with(patch);
  exp->refresh();
}

}  // namespace

extern "C" {

const char* semid_version(void) { return SEMID_VERSION_STRING; }

const char* semid_last_error(void) { return g_last_error.c_str(); }

void semid_string_free(char* s) { std::free(s); }

semid_status semid_experiment_open(const char* config_path, semid_experiment** out) {
  return guarded([&] {
    check_arg(out, "out");
    *out = nullptr;
    auto cfg = config_path ? pipeline::ExperimentConfig::load(config_path)
                           : pipeline::ExperimentConfig::parse(nlohmann::json::object());
    *out = new semid_experiment{std::move(cfg), std::nullopt, false, {}};
    (*out)->refresh();
  });
}

void semid_experiment_free(semid_experiment* exp) { delete exp; }

semid_status semid_experiment_set_out(semid_experiment* exp, const char* dir) {
  return guarded([&] {
    check_arg(exp, "exp");
    check_arg(dir, "dir");
    reconfigure(exp, {{"out", dir}});
  });
}

semid_status semid_experiment_set_seed(semid_experiment* exp, int64_t seed) {
  return guarded([&] {
    check_arg(exp, "exp");
    require(seed >= 0, ErrorKind::config, "seed must be non-negative");
    reconfigure(exp, {{"eval", {{"seeds", {static_cast<std::uint64_t>(seed)}}}}});
  });
}

const char* semid_experiment_out_dir(const semid_experiment* exp) {
  return exp ? exp->out_dir.c_str() : nullptr;
}

semid_status semid_experiment_config(const semid_experiment* exp, char** json_out) {
  return guarded([&] {
    check_arg(exp, "exp");
    check_arg(json_out, "json_out");
    *json_out = dup_string(exp->config.resolved.dump(2) + "\n");
  });
}

semid_status semid_experiment_run(semid_experiment* exp, const char* last_stage) {
  return guarded([&] {
    check_arg(exp, "exp");
    check_arg(last_stage, "last_stage");
    const auto stage = pipeline::parse_stage(last_stage);
    ensure_run(exp).run_until(stage);
    if (stage == pipeline::Stage::eval) exp->eval_done = true;
  });
}

semid_status semid_experiment_report(semid_experiment* exp, const char* format, char** text_out) {
  return guarded([&] {
    check_arg(exp, "exp");
    check_arg(format, "format");
    check_arg(text_out, "text_out");
    *text_out = nullptr;
    if (!exp->eval_done) {
      ensure_run(exp).run_until(pipeline::Stage::eval);
      exp->eval_done = true;
    }
    *text_out = dup_string(pipeline::emit_report(exp->run->report(), format));
  });
}

semid_status semid_experiment_geometry(semid_experiment* exp, char** json_out) {
  return guarded([&] {
    check_arg(exp, "exp");
    check_arg(json_out, "json_out");
    const auto g = ensure_run(exp).geometry();
    const auto& c = exp->config;
    nlohmann::json j = {{"modality_a", embedstore::to_string(c.visual)},
                        {"modality_b", embedstore::to_string(c.textual)},
                        {"pairs", g.item_ids.size()},
                        {"modality_gap", g.modality_gap},
                        {"anisotropy_a", g.anisotropy_a},
                        {"anisotropy_b", g.anisotropy_b}};
    *json_out = dup_string(j.dump(2) + "\n");
  });
}

semid_status semid_experiment_resolution_harness(semid_experiment* exp, const int* resolutions, size_t count,
                                                 const char* format, char** text_out) {
  return guarded([&] {
    check_arg(exp, "exp");
    check_arg(format, "format");
    check_arg(text_out, "text_out");
    if (count > 0) check_arg(resolutions, "resolutions");
    const std::vector<int> res(resolutions, resolutions + count);
    const auto result = pipeline::run_resolution_harness(exp->config, res);
    *text_out = dup_string(pipeline::emit_harness(result, format));
  });
}

semid_status semid_report_convert(const char* report_json_path, const char* format, char** text_out) {
  return guarded([&] {
    check_arg(report_json_path, "report_json_path");
    check_arg(format, "format");
    check_arg(text_out, "text_out");
    const fs::path path(report_json_path);
    require(fs::exists(path), ErrorKind::data, "report not found: " + path.string());
    metrics::EvalReport report;
    try {
      report = metrics::EvalReport::from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::data, "bad report " + path.string() + ": " + e.what());
    }
    // Per-user scores are not stored in report.json; every emitter only needs
    // the per-seed means.
    *text_out = dup_string(pipeline::emit_report(report, format));
  });
}

semid_status semid_matrix_read(const char* dir, semid_matrix** out) {
  return guarded([&] {
    check_arg(dir, "dir");
    check_arg(out, "out");
    *out = nullptr;
    auto m = embedstore::read_matrix(dir);
    auto modality = embedstore::to_string(m.modality);
    *out = new semid_matrix{std::move(m), std::move(modality)};
  });
}

void semid_matrix_free(semid_matrix* m) { delete m; }

size_t semid_matrix_rows(const semid_matrix* m) { return m ? static_cast<size_t>(m->m.count()) : 0; }

size_t semid_matrix_cols(const semid_matrix* m) { return m ? static_cast<size_t>(m->m.dim()) : 0; }

const char* semid_matrix_modality(const semid_matrix* m) { return m ? m->modality.c_str() : nullptr; }

const char* semid_matrix_item_id(const semid_matrix* m, size_t row) {
  if (!m || row >= m->m.item_ids.size()) return nullptr;
  return m->m.item_ids[row].c_str();
}

semid_status semid_matrix_row(const semid_matrix* m, size_t row, double* out) {
  return guarded([&] {
    check_arg(m, "m");
    check_arg(out, "out");
    expects(row < m->m.item_ids.size(), "row " + std::to_string(row) + " out of range");
    const auto r = m->m.rows.row(static_cast<Eigen::Index>(row));
    for (Eigen::Index i = 0; i < r.size(); ++i) out[i] = r(i);
  });
}

}  // extern "C"
