#pragma once

#include "semid/common.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace semid::embedstore {

enum class Modality { text, image, ocr_text };

std::string to_string(Modality m);
Modality parse_modality(std::string_view s);

/// Per-modality item representation table. Values live in memory as doubles;
/// on disk they are stored as little-endian float32.
struct EmbeddingMatrix {
  Modality modality = Modality::text;
  std::string encoder;
  std::vector<std::string> item_ids;
  Matrix rows;
  /// Extra manifest fields (e.g. render resolution, backbone) carried through
  /// read/write untouched.
  nlohmann::json extra = nlohmann::json::object();

  Eigen::Index count() const { return rows.rows(); }
  Eigen::Index dim() const { return rows.cols(); }

  /// Throws data error when an invariant is broken.
  void validate() const;

  /// Row index per item id.
  std::unordered_map<std::string, Eigen::Index> index() const;
};

/// Writes `manifest.json` + `data.bin` under `dir`; returns the manifest path.
fs::path write_matrix(const EmbeddingMatrix& m, const fs::path& dir);
EmbeddingMatrix read_matrix(const fs::path& dir);

enum class DType { f32, f64 };

/// Raw row-major tensor blob in the same little-endian layout as data.bin.
/// f64 is used for model checkpoints where reload must be exact.
std::string encode_tensor(std::span<const double> values, DType dtype);
std::vector<double> decode_tensor(std::string_view bytes, DType dtype, std::size_t expected_count);

/// W maps d_in -> d. `identity` is set when d_in == d and no mixing is wanted.
struct Projection {
  Matrix weights;  // d x d_in
  bool identity = false;

  Eigen::Index in_dim() const { return weights.cols(); }
  Eigen::Index out_dim() const { return weights.rows(); }

  static Projection make_identity(Eigen::Index d);
  /// Fixed random projection with orthonormal rows (or columns when d > d_in).
  static Projection orthonormal(Eigen::Index d_in, Eigen::Index d, std::uint64_t seed);
};

/// (W e) / ||W e||. Throws data error on a zero projection.
Vector project_normalize(const Eigen::Ref<const Vector>& e, const Projection& p);

/// Applies project_normalize to every row; metadata is kept.
EmbeddingMatrix project_all(const EmbeddingMatrix& m, const Projection& p);

/// Projection used by the pipeline: identity when dims match, otherwise a
/// fixed orthonormal draw seeded per (modality, seed).
Projection default_projection(Modality m, Eigen::Index d_in, Eigen::Index d, std::uint64_t seed);

struct SyntheticSpec {
  int n_items = 200;
  int dim = 64;
  int n_clusters = 8;
  double cross_modal_correlation = 1.0;  // rho
  double cluster_spread = 0.35;          // within-cluster RMS radius relative to unit centroid scale
  double spectrum_decay = 1.0;           // within-cluster std on principal axis j ~ (j + 1)^-decay
  std::uint64_t seed = 0;
};

struct SyntheticEmbeddings {
  EmbeddingMatrix first;   // tagged text
  EmbeddingMatrix second;  // tagged image
  std::vector<int> first_labels;
  std::vector<int> second_labels;
};

/// Two paired modalities drawn from Gaussian clusters. Items are named
/// "i0000".. in order. With probability rho the second modality reuses the
/// item's cluster label, otherwise it draws a uniformly random label.
/// `labels`, when given, fixes the first modality's cluster per item.
SyntheticEmbeddings synthesize_embeddings(const SyntheticSpec& spec,
                                          const std::vector<int>* labels = nullptr);

std::string synthetic_item_id(int index);

}  // namespace semid::embedstore
