// Command-line front end. Talks to the engine only through the C interface.
#include "semid/semid.h"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace {

struct Options {
  std::string config;
  std::string out;
  std::optional<std::int64_t> seed;
  std::string format = "table";
  std::vector<int> resolutions{1024, 256};
  std::string report_path;
};

int exit_code(semid_status s) {
  switch (s) {
    case SEMID_OK: return 0;
    case SEMID_ERR_CONFIG: return 2;
    case SEMID_ERR_DATA:
    case SEMID_ERR_IO: return 3;
    case SEMID_ERR_DIVERGENCE: return 4;
    default: return 1;
  }
}

class Failure {
 public:
  explicit Failure(semid_status s) : status(s) {}
  semid_status status;
};

void check(semid_status s) {
  if (s != SEMID_OK) throw Failure(s);
}

struct ExpDeleter {
  void operator()(semid_experiment* e) const { semid_experiment_free(e); }
};
using ExpPtr = std::unique_ptr<semid_experiment, ExpDeleter>;

struct StrDeleter {
  void operator()(char* s) const { semid_string_free(s); }
};
using StrPtr = std::unique_ptr<char, StrDeleter>;

ExpPtr open_experiment(const Options& o) {
  semid_experiment* raw = nullptr;
  check(semid_experiment_open(o.config.empty() ? nullptr : o.config.c_str(), &raw));
  ExpPtr exp(raw);
  if (!o.out.empty()) check(semid_experiment_set_out(exp.get(), o.out.c_str()));
  if (o.seed) check(semid_experiment_set_seed(exp.get(), *o.seed));
  return exp;
}

std::string out_dir(const semid_experiment* exp) { return semid_experiment_out_dir(exp); }

void print_stage(const std::string& stage, const std::string& dir, const std::string& format) {
  if (format == "json")
    std::cout << "{\"stage\": \"" << stage << "\", \"out\": \"" << dir << "\", \"status\": \"ok\"}\n";
  else if (format == "csv")
    std::cout << "stage,out,status\n" << stage << ',' << dir << ",ok\n";
  else
    std::cout << "stage " << stage << " complete (" << dir << ")\n";
}

int run_stage(const Options& o, const std::string& stage) {
  auto exp = open_experiment(o);
  check(semid_experiment_run(exp.get(), stage.c_str()));
  print_stage(stage, out_dir(exp.get()), o.format);
  return 0;
}

int run_report(const Options& o) {
  auto exp = open_experiment(o);
  char* raw = nullptr;
  check(semid_experiment_report(exp.get(), o.format.c_str(), &raw));
  StrPtr text(raw);
  std::cout << text.get();
  return 0;
}

int run_geometry(const Options& o) {
  auto exp = open_experiment(o);
  char* raw = nullptr;
  check(semid_experiment_geometry(exp.get(), &raw));
  StrPtr text(raw);
  std::cout << text.get();
  return 0;
}

int run_harness(const Options& o) {
  auto exp = open_experiment(o);
  char* raw = nullptr;
  check(semid_experiment_resolution_harness(exp.get(), o.resolutions.data(), o.resolutions.size(), o.format.c_str(),
                                            &raw));
  StrPtr text(raw);
  const std::string ext = o.format == "table" ? "txt" : o.format;
  const auto path = std::filesystem::path(out_dir(exp.get())) / ("harness_resolution." + ext);
  std::ofstream(path, std::ios::binary) << text.get();
  std::cout << text.get();
  return 0;
}

int convert_report(const Options& o) {
  std::string path = o.report_path;
  if (path.empty()) {
    auto exp = open_experiment(o);
    path = (std::filesystem::path(out_dir(exp.get())) / "eval" / "report.json").string();
  }
  char* raw = nullptr;
  check(semid_report_convert(path.c_str(), o.format.c_str(), &raw));
  StrPtr text(raw);
  std::cout << text.get();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-ID generative recommendation experiments"};
  app.set_version_flag("--version", std::string(semid_version()));
  app.require_subcommand(1);

  Options o;
  int code = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (JSON, comments allowed)");
    sub->add_option("--out", o.out, "Output directory (overrides the config)");
    sub->add_option("--seed", o.seed, "Run a single seed instead of eval.seeds");
    sub->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"json", "csv", "table"}));
  };

  const std::vector<std::pair<std::string, std::string>> stages{
      {"ingest", "Load interactions and build leave-one-out splits"},
      {"render", "Produce, project and store per-modality embeddings"},
      {"tokenize", "Fit quantizers and assign Semantic IDs"},
      {"fuse", "Build the vocabulary and per-item token sequences"},
      {"train", "Train one generator per seed"},
  };
  for (const auto& [name, help] : stages) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub);
    sub->callback([&o, &code, name = name] { code = run_stage(o, name); });
  }
  auto* eval = app.add_subcommand("eval", "Evaluate and print the report");
  auto* run = app.add_subcommand("run", "Full pipeline: ingest through evaluation");
  auto* geometry = app.add_subcommand("geometry", "Modality gap, anisotropy and 2-D projection");
  auto* harness = app.add_subcommand("harness-resolution", "Compare rendering resolutions of the ocr_text route");
  auto* report = app.add_subcommand("report", "Re-format a stored report");
  for (auto* sub : {eval, run, geometry, harness, report}) add_common(sub);
  harness->add_option("--resolutions", o.resolutions, "Rendering resolutions")->delimiter(',');
  report->add_option("--report", o.report_path, "Path to report.json (default: <out>/eval/report.json)");

  try {
    eval->callback([&] { code = run_report(o); });
    run->callback([&] { code = run_report(o); });
    geometry->callback([&] { code = run_geometry(o); });
    harness->callback([&] { code = run_harness(o); });
    report->callback([&] { code = convert_report(o); });
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int rc = app.exit(e);
      return rc == 0 ? 0 : 2;
    }
  } catch (const Failure& f) {
    std::cerr << "error: " << semid_last_error() << '\n';
    return exit_code(f.status);
  }
  return code;
}
