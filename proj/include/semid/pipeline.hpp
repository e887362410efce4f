#pragma once

#include "semid/common.hpp"
#include "semid/corpus.hpp"
#include "semid/embedstore.hpp"
#include "semid/fusion.hpp"
#include "semid/metrics.hpp"
#include "semid/renderkit.hpp"
#include "semid/rvq.hpp"
#include "semid/seq2seq.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace semid::pipeline {

using embedstore::Modality;

enum class Stage { ingest, render, tokenize, fuse, train, eval };

std::string to_string(Stage s);
Stage parse_stage(std::string_view s);

struct ModalitySource {
  enum class Kind { synthetic, embeddings, render } kind = Kind::synthetic;
  fs::path path;                    // embeddings
  renderkit::RenderConfig render;   // render
  int resolution = 1024;            // render: encoder input size after downsampling
  int encode_dim = 256;             // render: reference encoder output size
  std::uint64_t encode_seed = 0;
};

struct ExperimentConfig {
  nlohmann::json resolved;  // full config after defaults

  bool synthetic = true;
  corpus::SyntheticCorpusSpec corpus;
  embedstore::SyntheticSpec embeddings;
  bool shuffle_labels = false;
  fs::path interactions, catalog, descriptions;

  std::map<Modality, ModalitySource> modalities;
  int projection_dim = 128;
  std::uint64_t projection_seed = 0;

  rvq::FitConfig rvq;

  fusion::Layout layout = fusion::Layout::unimodal;
  Modality unimodal = Modality::text;
  Modality visual = Modality::image;
  Modality textual = Modality::text;
  bool image_first = true;
  double alpha = 0.5;

  seq2seq::ModelConfig model;
  seq2seq::TrainConfig train;
  bool alignment = false;
  seq2seq::TrainConfig alignment_train;

  int history = 50;
  seq2seq::BeamConfig decode;
  bool filter_history = false;
  std::vector<int> cutoffs = metrics::kDefaultCutoffs;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  fs::path out = "runs/default";

  /// Default configuration as JSON (every key the parser accepts).
  static nlohmann::json defaults();
  /// Merges `j` over the defaults and validates. Relative paths resolve
  /// against `base_dir`. Throws config error on unknown keys or bad values.
  static ExperimentConfig parse(const nlohmann::json& j, const fs::path& base_dir = {});
  /// JSON with // and /* */ comments allowed.
  static ExperimentConfig load(const fs::path& path);

  /// Digest of the resolved config without the output directory.
  std::string digest() const;
  std::string variant() const;
  /// Modalities the fusion strategy consumes, in slot order.
  std::vector<Modality> used_modalities() const;
  /// Copy with one field overridden (re-validated).
  ExperimentConfig with(const nlohmann::json& patch) const;
};

/// Vocabulary slot of a unimodal run. In two-modality runs the visual role
/// takes the image slot and the textual role the text slot.
fusion::Slot slot_for(Modality m);

/// One experiment bound to an output directory. Stages run in order; each
/// writes its artifacts and records their digests in `manifest.json`.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config);
  ~Experiment();
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  const ExperimentConfig& config() const { return config_; }

  /// Runs every stage up to and including `last`. Takes the output-dir lock,
  /// marks the directory INVALID until the run succeeds, and prefixes errors
  /// with the failing stage.
  void run_until(Stage last);

  const metrics::EvalReport& report() const;
  /// Modality gap, anisotropy and 2-D projection of the fusion pair.
  metrics::GeometryStats geometry();

  struct State;

 private:
  ExperimentConfig config_;
  std::unique_ptr<State> state_;
};

metrics::EvalReport run_experiment(const ExperimentConfig& config);

/// json | csv | table. Throws config error on other formats.
std::string emit_report(const metrics::EvalReport& report, std::string_view format);

struct HarnessRow {
  int resolution = 0;
  metrics::EvalReport report;
};

struct HarnessResult {
  std::string variant;
  std::vector<int> cutoffs;
  std::vector<HarnessRow> rows;  // descending resolution
};

/// Repeats the experiment once per rendering resolution of the render-sourced
/// ocr_text modality; runs live under `<out>/res<r>`.
HarnessResult run_resolution_harness(const ExperimentConfig& config, const std::vector<int>& resolutions);

/// Relative change in percent of each lower resolution against the highest.
std::map<std::string, double> relative_change(const HarnessRow& high, const HarnessRow& low,
                                              const std::vector<int>& cutoffs);

std::string emit_harness(const HarnessResult& result, std::string_view format);

inline const std::vector<int> kSupportedResolutions{256, 512, 1024};

}  // namespace semid::pipeline
