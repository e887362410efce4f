#pragma once

#include "semid/common.hpp"
#include "semid/rvq.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace semid::fusion {

/// [e_t || e_img] (2d) -> ReLU hidden (d) -> sigmoid (d).
struct GateNetwork {
  Matrix w1;  // d x 2d
  Vector b1;
  Matrix w2;  // d x d
  Vector b2;

  static GateNetwork zeros(Eigen::Index d);
  static GateNetwork random(Eigen::Index d, std::uint64_t seed);

  Eigen::Index dim() const { return w2.rows(); }
  std::size_t parameter_count() const;
  void to_flat(std::span<double> out) const;
  void from_flat(std::span<const double> in);

  Vector alpha(const Eigen::Ref<const Vector>& e_text, const Eigen::Ref<const Vector>& e_image) const;
};

/// z = normalize(alpha * e_text + (1 - alpha) * e_image), alpha = gate(...).
Vector early_fuse(const Eigen::Ref<const Vector>& e_text, const Eigen::Ref<const Vector>& e_image,
                  const GateNetwork& gate);
/// Constant-alpha blend used when no gate is trained.
Vector early_fuse_constant(const Eigen::Ref<const Vector>& e_text, const Eigen::Ref<const Vector>& e_image,
                           double alpha);

/// Forward pass over a batch with everything needed for backprop.
struct GateBatch {
  Matrix input;      // n x 2d
  Matrix hidden_pre;
  Matrix alpha;
  Matrix blend;      // before normalization
  Vector norms;
  Matrix fused;      // normalized
};
GateBatch gate_forward(const GateNetwork& gate, const Matrix& e_text, const Matrix& e_image);
/// Accumulates d loss / d gate-params given d loss / d fused.
void gate_backward(const GateNetwork& gate, const Matrix& e_text, const Matrix& e_image, const GateBatch& fwd,
                   const Matrix& grad_fused, std::span<double> grad);

/// Gate + RQ-VAE trained together on the fused-vector reconstruction loss.
struct EarlyFusionFit {
  GateNetwork gate;
  rvq::RvqModel quantizer;
  Matrix fused;  // final fused vectors (rows aligned with inputs)
  std::vector<double> loss_curve;
};
EarlyFusionFit fit_early_fusion(const Matrix& e_text, const Matrix& e_image, const rvq::FitConfig& config);

// ---------------------------------------------------------------------------
// Vocabulary and token sequences

enum class Slot : int { image = 0, text = 1, fused = 2, special = 3 };
enum class Layout { unimodal, early, lateA, lateB, lateC };

std::string to_string(Layout l);
Layout parse_layout(std::string_view s);
std::string to_string(Slot s);

enum Special : int { PAD = 0, BOS = 1, EOS = 2, IMG = 3, TXT = 4, SEP = 5 };
inline constexpr int kSpecialCount = 6;

/// Token id = slot offset + level * K + code; each slot is followed by its
/// dedup block. Specials occupy [0, 6). Slot ranges are disjoint.
class Vocabulary {
 public:
  Vocabulary() = default;
  /// `dedup_sizes[slot]` = max dedup + 1 for each slot in use.
  Vocabulary(int levels, int codebook_size, const std::map<Slot, int>& dedup_sizes);

  int levels() const { return levels_; }
  int codebook_size() const { return k_; }
  int size() const { return size_; }
  bool has(Slot s) const { return ranges_.contains(s); }

  int code_token(Slot s, int level, int code) const;
  int dedup_token(Slot s, int dedup) const;

  struct Decoded {
    Slot slot = Slot::special;
    int level = -1;  // 0..L-1 for codes, L for the dedup position, -1 for specials
    int value = 0;   // code, dedup index or special id
  };
  Decoded decode(int token) const;

  std::pair<int, int> range(Slot s) const;  // [begin, end)

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  int levels_ = 0, k_ = 0, size_ = kSpecialCount;
  std::map<Slot, std::pair<int, int>> ranges_;
  std::map<Slot, int> dedup_;
};

struct Provenance {
  Slot slot = Slot::special;
  int level = -1;
};

struct TokenSequence {
  std::vector<int> tokens;
  Layout layout = Layout::unimodal;
  std::vector<Provenance> provenance;

  std::size_t size() const { return tokens.size(); }
  bool operator==(const TokenSequence& o) const { return tokens == o.tokens && layout == o.layout; }
};

/// Expected token count per layout for L-level ids (dedup position included).
std::size_t layout_length(Layout layout, int levels);

/// [codes..., dedup] in a single slot (unimodal or early).
TokenSequence single_ids(const rvq::SemanticId& id, Slot slot, Layout layout, const Vocabulary& vocab);
/// Late fusion A: first || second, image first by default.
TokenSequence concat_ids(const rvq::SemanticId& s_img, const rvq::SemanticId& s_text, const Vocabulary& vocab,
                         bool image_first = true);
/// Late fusion B: position-wise alternation.
TokenSequence interleave_ids(const rvq::SemanticId& s_img, const rvq::SemanticId& s_text, const Vocabulary& vocab,
                             bool image_first = true);
std::pair<rvq::SemanticId, rvq::SemanticId> deinterleave(const TokenSequence& seq, const Vocabulary& vocab);
/// Late fusion C: [IMG, s_img..., SEP, TXT, s_text...].
TokenSequence wrap_modality_aware(const rvq::SemanticId& s_img, const rvq::SemanticId& s_text,
                                  const Vocabulary& vocab, bool image_first = true);
/// Recovers (s_img, s_text) from any two-slot layout via provenance-free
/// vocabulary decoding.
std::pair<rvq::SemanticId, rvq::SemanticId> split_modalities(const TokenSequence& seq, const Vocabulary& vocab);

struct AlignmentPair {
  std::string item_id;
  TokenSequence source;
  TokenSequence target;
};

struct ItemIds {
  rvq::SemanticId image;
  rvq::SemanticId text;
};

/// Two pairs per item: [IMG, s_img] -> [TXT, s_text] and the reverse.
/// Throws data error listing items that miss a modality.
std::vector<AlignmentPair> make_alignment_pairs(const std::map<std::string, rvq::SemanticId>& image_ids,
                                                const std::map<std::string, rvq::SemanticId>& text_ids,
                                                const Vocabulary& vocab);

}  // namespace semid::fusion
