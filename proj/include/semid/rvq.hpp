#pragma once

#include "semid/common.hpp"
#include "semid/optim.hpp"

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace semid::rvq {

enum class Mode { kmeans_rvq, rqvae };

std::string to_string(Mode m);
Mode parse_mode(std::string_view s);

/// Length-L code tuple plus the disambiguation index assigned by
/// resolve_collisions (0 until then).
struct SemanticId {
  std::vector<int> codes;
  int dedup = 0;

  auto operator<=>(const SemanticId&) const = default;
};

struct KMeansConfig {
  int max_iterations = 100;
  double tolerance = 1e-6;  // stop when no centroid moves further than this
};

struct KMeansResult {
  Matrix centroids;  // k x d
  std::vector<int> assignment;
  int iterations = 0;
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are re-seeded
/// from the point farthest from its centroid; assignment ties go to the
/// smallest index.
KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, const KMeansConfig& config = {});

/// Index of the nearest row of `codebook` (smallest index on ties).
int nearest_row(const Matrix& codebook, const Eigen::Ref<const Vector>& v);

/// Number of distinct rows (exact comparison).
std::size_t distinct_rows(const Matrix& points);

struct RqvaeConfig {
  int hidden = 64;
  int latent_dim = 0;  // 0: same as the input dimension
  int steps = 400;
  int batch = 64;
  double learning_rate = 1e-3;
  double beta = 0.25;
};

struct FitConfig {
  int levels = 3;
  int codebook_size = 256;
  Mode mode = Mode::kmeans_rvq;
  std::uint64_t seed = 0;
  KMeansConfig kmeans;
  RqvaeConfig rqvae;
};

/// in -> hidden (ReLU) -> out.
struct Mlp {
  Matrix w1;  // hidden x in
  Vector b1;
  Matrix w2;  // out x hidden
  Vector b2;

  static Mlp random(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng);
  Eigen::Index in_dim() const { return w1.cols(); }
  Eigen::Index out_dim() const { return w2.rows(); }
  std::size_t parameter_count() const;

  /// Rows are samples.
  Matrix forward(const Matrix& x, Matrix* hidden_pre = nullptr) const;
  /// Accumulates parameter gradients into `grad` (same layout as
  /// to_flat) and returns d loss / d x.
  Matrix backward(const Matrix& x, const Matrix& hidden_pre, const Matrix& grad_out, std::span<double> grad) const;

  void to_flat(std::span<double> out) const;
  void from_flat(std::span<const double> in);
};

class RvqModel {
 public:
  Mode mode = Mode::kmeans_rvq;
  int levels = 0;
  int codebook_size = 0;
  Eigen::Index input_dim = 0;
  Eigen::Index code_dim = 0;
  std::uint64_t seed = 0;
  double beta = 0.25;
  std::vector<Matrix> codebooks;  // levels x (K x code_dim)
  std::optional<Mlp> encoder;     // rqvae only
  std::optional<Mlp> decoder;     // rqvae only
  std::vector<double> loss_curve; // rqvae training loss per step (not serialized)

  struct Trace {
    SemanticId id;
    std::vector<double> residual_norms;  // ||r_1|| .. ||r_{L+1}||, r_1 = code-space input
    Vector quantized;                    // sum of the selected codewords
  };

  /// Code-space view of an input (learned encoder in rqvae mode).
  Vector to_code_space(const Eigen::Ref<const Vector>& v) const;
  Trace encode_trace(const Eigen::Ref<const Vector>& v) const;
  SemanticId encode(const Eigen::Ref<const Vector>& v) const { return encode_trace(v).id; }
  /// Sum of selected codewords (through the learned decoder in rqvae mode).
  Vector decode(const SemanticId& id) const;

  void validate() const;
};

RvqModel fit(const Matrix& data, const FitConfig& config);

/// Mean squared reconstruction error of decode(encode(x)) using only the
/// first `levels` codebooks.
double reconstruction_mse(const RvqModel& model, const Matrix& data, int levels);

/// Joint RQ-VAE training state. The pipeline uses it directly when another
/// network (the early-fusion gate) produces the quantizer input and needs the
/// gradient with respect to that input.
class RqvaeTrainer {
 public:
  RqvaeTrainer(const Matrix& init_data, const FitConfig& config);

  struct StepResult {
    double loss = 0.0;
    Matrix input_grad;  // d loss / d batch
  };

  /// One Adam step on `batch` (rows are samples).
  StepResult step(const Matrix& batch);
  /// Loss and gradients without updating anything.
  StepResult evaluate(const Matrix& batch, std::vector<double>* param_grad = nullptr) const;

  const RvqModel& model() const { return model_; }
  RvqModel take_model() &&;

 private:
  RvqModel model_;
  FitConfig config_;
  std::vector<double> params_;  // encoder | decoder | codebooks
  std::optional<Adam> adam_;

  void pack();
  void unpack();
};

/// Loss of an RQ-VAE with the stop-gradient terms held at the given values:
///   mean ||dec(enc(x) + frozen_offset) - x||^2 + beta * mean ||enc(x) - frozen_q||^2.
/// Its gradient in x equals the straight-through input gradient at the point
/// where the frozen values were captured.
double rqvae_surrogate_loss(const RvqModel& model, const Matrix& x, const Matrix& frozen_offset,
                            const Matrix& frozen_q);

/// Disambiguation: items sharing a code tuple get dedup 0, 1, ...
/// in item-id order.
std::map<std::string, SemanticId> resolve_collisions(const std::map<std::string, SemanticId>& ids);

/// model.json + codebooks.bin (+ encoder.bin / decoder.bin in rqvae mode).
void save_model(const RvqModel& model, const fs::path& dir);
RvqModel load_model(const fs::path& dir);

}  // namespace semid::rvq
