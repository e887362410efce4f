#include "semid/fusion.hpp"

#include "semid/error.hpp"
#include "semid/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace semid::fusion {

namespace {

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void check_pair(const Eigen::Ref<const Vector>& t, const Eigen::Ref<const Vector>& i, Eigen::Index d) {
  expects(t.size() == d && i.size() == d, "early fusion inputs must both have dim " + std::to_string(d));
}

Vector normalize_blend(const Vector& blend) {
  const double n = blend.norm();
  require(n > 1e-12 && std::isfinite(n), ErrorKind::data, "degenerate fusion: blended vector is zero");
  return blend / n;
}

}  // namespace

GateNetwork GateNetwork::zeros(Eigen::Index d) {
  GateNetwork g;
  g.w1 = Matrix::Zero(d, 2 * d);
  g.b1 = Vector::Zero(d);
  g.w2 = Matrix::Zero(d, d);
  g.b2 = Vector::Zero(d);
  return g;
}

GateNetwork GateNetwork::random(Eigen::Index d, std::uint64_t seed) {
  GateNetwork g = zeros(d);
  Rng rng(seed);
  const double s1 = std::sqrt(2.0 / static_cast<double>(2 * d));
  const double s2 = 0.1 / std::sqrt(static_cast<double>(d));  // alpha starts near 0.5
  for (Eigen::Index i = 0; i < g.w1.size(); ++i) g.w1.data()[i] = rng.normal() * s1;
  for (Eigen::Index i = 0; i < g.w2.size(); ++i) g.w2.data()[i] = rng.normal() * s2;
  return g;
}

std::size_t GateNetwork::parameter_count() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
}

void GateNetwork::to_flat(std::span<double> out) const {
  expects(out.size() == parameter_count(), "gate flat size");
  double* p = out.data();
  p = std::copy_n(w1.data(), w1.size(), p);
  p = std::copy_n(b1.data(), b1.size(), p);
  p = std::copy_n(w2.data(), w2.size(), p);
  std::copy_n(b2.data(), b2.size(), p);
}

void GateNetwork::from_flat(std::span<const double> in) {
  expects(in.size() == parameter_count(), "gate flat size");
  const double* p = in.data();
  std::copy_n(p, w1.size(), w1.data());
  p += w1.size();
  std::copy_n(p, b1.size(), b1.data());
  p += b1.size();
  std::copy_n(p, w2.size(), w2.data());
  p += w2.size();
  std::copy_n(p, b2.size(), b2.data());
}

Vector GateNetwork::alpha(const Eigen::Ref<const Vector>& e_text, const Eigen::Ref<const Vector>& e_image) const {
  check_pair(e_text, e_image, dim());
  Vector u(2 * dim());
  u << e_text, e_image;
  const Vector h = (w1 * u + b1).cwiseMax(0.0);
  return (w2 * h + b2).unaryExpr([](double x) { return sigmoid(x); });
}

Vector early_fuse(const Eigen::Ref<const Vector>& e_text, const Eigen::Ref<const Vector>& e_image,
                  const GateNetwork& gate) {
  const Vector a = gate.alpha(e_text, e_image);
  return normalize_blend(a.cwiseProduct(e_text) + (Vector::Ones(a.size()) - a).cwiseProduct(e_image));
}

Vector early_fuse_constant(const Eigen::Ref<const Vector>& e_text, const Eigen::Ref<const Vector>& e_image,
                           double alpha) {
  expects(e_text.size() == e_image.size(), "early fusion inputs differ in dim");
  expects(alpha > 0.0 && alpha < 1.0, "constant alpha must lie in (0, 1)");
  return normalize_blend(alpha * e_text + (1.0 - alpha) * e_image);
}

GateBatch gate_forward(const GateNetwork& gate, const Matrix& e_text, const Matrix& e_image) {
  const Eigen::Index d = gate.dim();
  expects(e_text.cols() == d && e_image.cols() == d && e_text.rows() == e_image.rows(), "gate batch shape");
  GateBatch b;
  b.input.resize(e_text.rows(), 2 * d);
  b.input << e_text, e_image;
  b.hidden_pre = b.input * gate.w1.transpose();
  b.hidden_pre.rowwise() += gate.b1.transpose();
  Matrix a_pre = b.hidden_pre.cwiseMax(0.0) * gate.w2.transpose();
  a_pre.rowwise() += gate.b2.transpose();
  b.alpha = a_pre.unaryExpr([](double x) { return sigmoid(x); });
  b.blend = e_image + b.alpha.cwiseProduct(e_text - e_image);
  b.norms = b.blend.rowwise().norm();
  for (Eigen::Index i = 0; i < b.norms.size(); ++i)
    require(b.norms(i) > 1e-12, ErrorKind::data, "degenerate fusion: blended vector is zero at row " + std::to_string(i));
  b.fused = b.blend.array().colwise() / b.norms.array();
  return b;
}

void gate_backward(const GateNetwork& gate, const Matrix& e_text, const Matrix& e_image, const GateBatch& fwd,
                   const Matrix& grad_fused, std::span<double> grad) {
  expects(grad.size() == gate.parameter_count(), "gate gradient buffer size");
  // d/d blend of blend/||blend||
  const Vector dots = fwd.fused.cwiseProduct(grad_fused).rowwise().sum();
  Matrix d_blend = grad_fused - (fwd.fused.array().colwise() * dots.array()).matrix();
  d_blend = (d_blend.array().colwise() / fwd.norms.array()).matrix();
  const Matrix d_alpha = d_blend.cwiseProduct(e_text - e_image);
  const Matrix d_apre = d_alpha.cwiseProduct(fwd.alpha.cwiseProduct((1.0 - fwd.alpha.array()).matrix()));
  const Matrix h = fwd.hidden_pre.cwiseMax(0.0);
  const Matrix d_pre = (d_apre * gate.w2).cwiseProduct((fwd.hidden_pre.array() > 0.0).cast<double>().matrix());

  double* g = grad.data();
  Eigen::Map<Matrix>(g, gate.w1.rows(), gate.w1.cols()) += d_pre.transpose() * fwd.input;
  g += gate.w1.size();
  Eigen::Map<Vector>(g, gate.b1.size()) += d_pre.colwise().sum().transpose();
  g += gate.b1.size();
  Eigen::Map<Matrix>(g, gate.w2.rows(), gate.w2.cols()) += d_apre.transpose() * h;
  g += gate.w2.size();
  Eigen::Map<Vector>(g, gate.b2.size()) += d_apre.colwise().sum().transpose();
}

EarlyFusionFit fit_early_fusion(const Matrix& e_text, const Matrix& e_image, const rvq::FitConfig& config) {
  expects(config.mode == rvq::Mode::rqvae, "gate training needs the rqvae quantizer");
  expects(e_text.rows() == e_image.rows() && e_text.cols() == e_image.cols(), "early fusion inputs differ in shape");
  EarlyFusionFit out;
  out.gate = GateNetwork::random(e_text.cols(), derive_seed(config.seed, "gate/init"));

  rvq::RqvaeTrainer trainer(gate_forward(out.gate, e_text, e_image).fused, config);
  std::vector<double> params(out.gate.parameter_count());
  out.gate.to_flat(params);
  AdamConfig ac;
  ac.learning_rate = config.rqvae.learning_rate;
  Adam adam(params.size(), ac);

  Rng rng(derive_seed(config.seed, "gate/batches"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(e_text.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.rqvae.batch), order.size());
  Matrix bt(static_cast<Eigen::Index>(batch), e_text.cols()), bi(static_cast<Eigen::Index>(batch), e_text.cols());
  std::vector<double> grad(params.size());
  for (int s = 0; s < config.rqvae.steps; ++s) {
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      bt.row(static_cast<Eigen::Index>(i)) = e_text.row(order[cursor]);
      bi.row(static_cast<Eigen::Index>(i)) = e_image.row(order[cursor]);
      ++cursor;
    }
    const auto fwd = gate_forward(out.gate, bt, bi);
    const auto res = trainer.step(fwd.fused);
    std::fill(grad.begin(), grad.end(), 0.0);
    gate_backward(out.gate, bt, bi, fwd, res.input_grad, grad);
    adam.step(params, grad);
    out.gate.from_flat(params);
    out.loss_curve.push_back(res.loss);
  }
  out.fused = gate_forward(out.gate, e_text, e_image).fused;
  out.quantizer = std::move(trainer).take_model();
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Layout l) {
  switch (l) {
    case Layout::unimodal: return "unimodal";
    case Layout::early: return "early";
    case Layout::lateA: return "lateA";
    case Layout::lateB: return "lateB";
    case Layout::lateC: return "lateC";
  }
  return "unimodal";
}

Layout parse_layout(std::string_view s) {
  if (s == "unimodal") return Layout::unimodal;
  if (s == "early") return Layout::early;
  if (s == "lateA") return Layout::lateA;
  if (s == "lateB") return Layout::lateB;
  if (s == "lateC") return Layout::lateC;
  fail(ErrorKind::config, "unknown fusion strategy '" + std::string(s) + "' (expected unimodal|early|lateA|lateB|lateC)");
}

std::string to_string(Slot s) {
  switch (s) {
    case Slot::image: return "image";
    case Slot::text: return "text";
    case Slot::fused: return "fused";
    case Slot::special: return "special";
  }
  return "special";
}

namespace {

Slot parse_slot(const std::string& s) {
  if (s == "image") return Slot::image;
  if (s == "text") return Slot::text;
  if (s == "fused") return Slot::fused;
  fail(ErrorKind::data, "unknown vocabulary slot '" + s + "'");
}

}  // namespace

Vocabulary::Vocabulary(int levels, int codebook_size, const std::map<Slot, int>& dedup_sizes)
    : levels_(levels), k_(codebook_size) {
  expects(levels >= 1 && codebook_size >= 2, "vocabulary needs L >= 1 and K >= 2");
  int next = kSpecialCount;
  for (const auto& [slot, dedup] : dedup_sizes) {
    expects(slot != Slot::special && dedup >= 1, "vocabulary slot spec");
    const int begin = next;
    next += levels * codebook_size + dedup;
    ranges_[slot] = {begin, next};
    dedup_[slot] = dedup;
  }
  size_ = next;
}

int Vocabulary::code_token(Slot s, int level, int code) const {
  expects(has(s), "slot " + to_string(s) + " not in vocabulary");
  expects(level >= 0 && level < levels_ && code >= 0 && code < k_, "code out of range");
  return ranges_.at(s).first + level * k_ + code;
}

int Vocabulary::dedup_token(Slot s, int dedup) const {
  expects(has(s), "slot " + to_string(s) + " not in vocabulary");
  expects(dedup >= 0 && dedup < dedup_.at(s), "dedup index " + std::to_string(dedup) + " outside vocabulary block");
  return ranges_.at(s).first + levels_ * k_ + dedup;
}

Vocabulary::Decoded Vocabulary::decode(int token) const {
  expects(token >= 0 && token < size_, "token " + std::to_string(token) + " outside vocabulary");
  if (token < kSpecialCount) return {Slot::special, -1, token};
  for (const auto& [slot, r] : ranges_) {
    if (token < r.first || token >= r.second) continue;
    const int off = token - r.first;
    if (off < levels_ * k_) return {slot, off / k_, off % k_};
    return {slot, levels_, off - levels_ * k_};
  }
  fail(ErrorKind::internal, "vocabulary ranges do not cover token " + std::to_string(token));
}

std::pair<int, int> Vocabulary::range(Slot s) const {
  if (s == Slot::special) return {0, kSpecialCount};
  expects(has(s), "slot " + to_string(s) + " not in vocabulary");
  return ranges_.at(s);
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json slots = nlohmann::json::array();
  for (const auto& [slot, r] : ranges_)
    slots.push_back({{"slot", to_string(slot)}, {"begin", r.first}, {"end", r.second}, {"dedup", dedup_.at(slot)}});
  return {{"levels", levels_},
          {"codebook_size", k_},
          {"size", size_},
          {"specials", {{"PAD", PAD}, {"BOS", BOS}, {"EOS", EOS}, {"IMG", IMG}, {"TXT", TXT}, {"SEP", SEP}}},
          {"slots", slots}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  std::map<Slot, int> dedup;
  for (const auto& s : j.at("slots")) dedup[parse_slot(s.at("slot").get<std::string>())] = s.at("dedup").get<int>();
  Vocabulary v(j.at("levels").get<int>(), j.at("codebook_size").get<int>(), dedup);
  require(v.size() == j.at("size").get<int>(), ErrorKind::data, "vocabulary size mismatch");
  return v;
}

std::size_t layout_length(Layout layout, int levels) {
  const auto one = static_cast<std::size_t>(levels + 1);
  switch (layout) {
    case Layout::unimodal:
    case Layout::early: return one;
    case Layout::lateA:
    case Layout::lateB: return 2 * one;
    case Layout::lateC: return 2 * one + 3;
  }
  return one;
}

namespace {

void append_id(TokenSequence& seq, const rvq::SemanticId& id, Slot slot, const Vocabulary& vocab) {
  expects(static_cast<int>(id.codes.size()) == vocab.levels(),
          "semantic id length " + std::to_string(id.codes.size()) + " != L=" + std::to_string(vocab.levels()));
  for (int l = 0; l < vocab.levels(); ++l) {
    seq.tokens.push_back(vocab.code_token(slot, l, id.codes[static_cast<std::size_t>(l)]));
    seq.provenance.push_back({slot, l});
  }
  seq.tokens.push_back(vocab.dedup_token(slot, id.dedup));
  seq.provenance.push_back({slot, vocab.levels()});
}

void append_special(TokenSequence& seq, Special s) {
  seq.tokens.push_back(s);
  seq.provenance.push_back({Slot::special, -1});
}

rvq::SemanticId read_id(std::span<const int> tokens, Slot expected, const Vocabulary& vocab) {
  expects(static_cast<int>(tokens.size()) == vocab.levels() + 1, "id token span has wrong length");
  rvq::SemanticId id;
  for (int l = 0; l <= vocab.levels(); ++l) {
    const auto d = vocab.decode(tokens[static_cast<std::size_t>(l)]);
    expects(d.slot == expected && d.level == l, "token " + std::to_string(tokens[static_cast<std::size_t>(l)]) +
                                                    " is not level " + std::to_string(l) + " of slot " +
                                                    to_string(expected));
    if (l < vocab.levels())
      id.codes.push_back(d.value);
    else
      id.dedup = d.value;
  }
  return id;
}

}  // namespace

TokenSequence single_ids(const rvq::SemanticId& id, Slot slot, Layout layout, const Vocabulary& vocab) {
  expects(layout == Layout::unimodal || layout == Layout::early, "single_ids builds unimodal/early layouts");
  TokenSequence seq;
  seq.layout = layout;
  append_id(seq, id, slot, vocab);
  return seq;
}

TokenSequence concat_ids(const rvq::SemanticId& s_img, const rvq::SemanticId& s_text, const Vocabulary& vocab,
                         bool image_first) {
  expects(s_img.codes.size() == s_text.codes.size(), "modality ids differ in length");
  TokenSequence seq;
  seq.layout = Layout::lateA;
  if (image_first) {
    append_id(seq, s_img, Slot::image, vocab);
    append_id(seq, s_text, Slot::text, vocab);
  } else {
    append_id(seq, s_text, Slot::text, vocab);
    append_id(seq, s_img, Slot::image, vocab);
  }
  return seq;
}

TokenSequence interleave_ids(const rvq::SemanticId& s_img, const rvq::SemanticId& s_text, const Vocabulary& vocab,
                             bool image_first) {
  expects(s_img.codes.size() == s_text.codes.size(), "modality ids differ in length");
  TokenSequence a, b;
  append_id(a, image_first ? s_img : s_text, image_first ? Slot::image : Slot::text, vocab);
  append_id(b, image_first ? s_text : s_img, image_first ? Slot::text : Slot::image, vocab);
  TokenSequence seq;
  seq.layout = Layout::lateB;
  for (std::size_t i = 0; i < a.tokens.size(); ++i) {
    seq.tokens.push_back(a.tokens[i]);
    seq.provenance.push_back(a.provenance[i]);
    seq.tokens.push_back(b.tokens[i]);
    seq.provenance.push_back(b.provenance[i]);
  }
  return seq;
}

std::pair<rvq::SemanticId, rvq::SemanticId> deinterleave(const TokenSequence& seq, const Vocabulary& vocab) {
  expects(seq.tokens.size() % 2 == 0, "deinterleave needs an even-length sequence");
  std::vector<int> even, odd;
  for (std::size_t i = 0; i < seq.tokens.size(); ++i) (i % 2 == 0 ? even : odd).push_back(seq.tokens[i]);
  const Slot first = vocab.decode(even.front()).slot;
  expects(first == Slot::image || first == Slot::text, "deinterleave needs image/text tokens");
  const Slot second = first == Slot::image ? Slot::text : Slot::image;
  auto a = read_id(even, first, vocab);
  auto b = read_id(odd, second, vocab);
  return first == Slot::image ? std::pair{a, b} : std::pair{b, a};
}

TokenSequence wrap_modality_aware(const rvq::SemanticId& s_img, const rvq::SemanticId& s_text,
                                  const Vocabulary& vocab, bool image_first) {
  expects(s_img.codes.size() == s_text.codes.size(), "modality ids differ in length");
  TokenSequence seq;
  seq.layout = Layout::lateC;
  auto block = [&](Slot slot) {
    append_special(seq, slot == Slot::image ? IMG : TXT);
    append_id(seq, slot == Slot::image ? s_img : s_text, slot, vocab);
  };
  block(image_first ? Slot::image : Slot::text);
  append_special(seq, SEP);
  block(image_first ? Slot::text : Slot::image);
  return seq;
}

std::pair<rvq::SemanticId, rvq::SemanticId> split_modalities(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<int> img, txt;
  for (int t : seq.tokens) {
    const auto d = vocab.decode(t);
    if (d.slot == Slot::image) img.push_back(t);
    if (d.slot == Slot::text) txt.push_back(t);
  }
  // Late B interleaves but each slot keeps level order, so per-slot streams are ids.
  return {read_id(img, Slot::image, vocab), read_id(txt, Slot::text, vocab)};
}

std::vector<AlignmentPair> make_alignment_pairs(const std::map<std::string, rvq::SemanticId>& image_ids,
                                                const std::map<std::string, rvq::SemanticId>& text_ids,
                                                const Vocabulary& vocab) {
  std::vector<std::string> missing;
  for (const auto& [item, _] : image_ids)
    if (!text_ids.contains(item)) missing.push_back(item + " (text)");
  for (const auto& [item, _] : text_ids)
    if (!image_ids.contains(item)) missing.push_back(item + " (image)");
  if (!missing.empty()) {
    std::string msg = "coverage error: items missing a modality:";
    for (std::size_t i = 0; i < missing.size() && i < 20; ++i) msg += " " + missing[i];
    if (missing.size() > 20) msg += " ... (" + std::to_string(missing.size()) + " total)";
    fail(ErrorKind::data, msg);
  }
  std::vector<AlignmentPair> pairs;
  pairs.reserve(image_ids.size() * 2);
  for (const auto& [item, s_img] : image_ids) {
    const auto& s_txt = text_ids.at(item);
    TokenSequence img, txt;
    img.layout = txt.layout = Layout::lateC;
    append_special(img, IMG);
    append_id(img, s_img, Slot::image, vocab);
    append_special(txt, TXT);
    append_id(txt, s_txt, Slot::text, vocab);
    pairs.push_back({item, img, txt});
    pairs.push_back({item, txt, img});
  }
  return pairs;
}

}  // namespace semid::fusion
