#pragma once

#include "semid/common.hpp"
#include "semid/optim.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <set>
#include <string>
#include <vector>

namespace semid::seq2seq {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

struct ModelConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  int width = 128;
  int heads = 4;
  int ff_width = 512;
  int max_positions = 512;
  int vocab_size = 0;
  double dropout = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 64;
  int steps = 0;   // > 0 takes precedence over epochs
  int epochs = 1;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// One source/target pair. The decoder reads [BOS, target...] and predicts
/// [target..., EOS]; PAD tokens in the target are ignored, and a target made
/// only of PAD contributes no loss terms.
struct Example {
  std::vector<int> source;
  std::vector<int> target;
};

struct ParamInfo {
  std::string name;
  std::size_t offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

/// Pre-norm encoder-decoder Transformer (RMSNorm, ReLU feed-forward, learned
/// absolute positions, untied output projection). All parameters live in one
/// flat buffer so optimizers, checkpoints and gradient checks share a layout.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  const std::vector<ParamInfo>& parameter_table() const { return table_; }
  const ParamInfo& param(const std::string& name) const;

  /// Logits for each decoder position: (|target| + 1) x vocab.
  Matrix forward_logits(const Example& ex) const;

  /// Mean token cross-entropy over non-PAD targets of the batch. Fills
  /// `grad` (resized to parameter_count()) when given. Dropout is applied only
  /// when `dropout_rng` is given and the configured rate is positive.
  double loss_and_grads(std::span<const Example> batch, std::vector<double>* grad,
                        Rng* dropout_rng = nullptr) const;

  /// Encoder memory for a source sequence.
  Matrix encode(std::span<const int> source) const;
  /// Log-probabilities of the next token after [BOS, prefix...].
  Vector next_log_probs(const Matrix& memory, std::span<const int> prefix) const;
  /// Sum of next-token log-probabilities of `target` (no EOS term).
  double sequence_log_prob(std::span<const int> source, std::span<const int> target) const;

  /// config.json + params.bin (little-endian f64).
  void save(const fs::path& dir) const;
  static Model load(const fs::path& dir);

  bool operator==(const Model& o) const { return params_ == o.params_; }

 private:
  ModelConfig config_;
  std::vector<double> params_;
  std::vector<ParamInfo> table_;
  std::map<std::string, std::size_t> index_;

  void build_layout();
  void initialize();
  Eigen::Map<const Matrix> view(const std::string& name) const;

  friend struct ForwardPass;
};

struct TrainReport {
  std::vector<double> loss_curve;  // per step
};

/// Mini-batch Adam with global-norm clipping. Deterministic given tc.seed.
/// Throws divergence error naming the step on a non-finite loss.
TrainReport train(Model& model, std::span<const Example> examples, const TrainConfig& tc);

std::string loss_curve_csv(const std::vector<double>& curve);

// ---------------------------------------------------------------------------

/// Prefix tree over item token sequences.
class ItemTrie {
 public:
  struct Node {
    std::map<int, int> children;  // token -> node index
    int item = -1;                // index into item_ids() at leaves
  };

  /// Throws data error on duplicate sequences or one sequence prefixing another.
  static ItemTrie build(const std::vector<std::pair<std::string, std::vector<int>>>& catalog);

  const Node& root() const { return nodes_.front(); }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  bool empty() const { return items_.empty(); }
  std::size_t leaf_count() const { return items_.size(); }
  std::size_t max_depth() const { return max_depth_; }
  const std::vector<std::string>& item_ids() const { return items_; }
  bool contains(std::span<const int> tokens) const;

 private:
  std::vector<Node> nodes_;
  std::vector<std::string> items_;
  std::size_t max_depth_ = 0;
};

struct Hypothesis {
  std::string item_id;
  double log_prob = 0.0;
  std::vector<int> tokens;
};

struct BeamConfig {
  int beam = 20;
  int max_length = 20;
};

/// Trie-constrained beam search. Returns at most `beam` finished items sorted
/// by log-probability (descending), ties by item id. Items in `exclude` are
/// never completed.
std::vector<Hypothesis> beam_decode(const Model& model, std::span<const int> context, const BeamConfig& config,
                                    const ItemTrie& trie, const std::set<std::string>* exclude = nullptr);

}  // namespace semid::seq2seq
