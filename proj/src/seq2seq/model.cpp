#include "semid/seq2seq.hpp"

#include "semid/embedstore.hpp"
#include "semid/error.hpp"

#include <cmath>
#include <limits>

namespace semid::seq2seq {

using nlohmann::json;

void ModelConfig::validate() const {
  require(encoder_layers >= 1 && decoder_layers >= 1, ErrorKind::config, "model needs >= 1 encoder and decoder layer");
  require(width >= 1 && heads >= 1, ErrorKind::config, "model width and heads must be positive");
  require(width % heads == 0, ErrorKind::config,
          "model width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
  require(ff_width >= 1, ErrorKind::config, "feed-forward width must be positive");
  require(max_positions >= 2, ErrorKind::config, "max_positions must be >= 2");
  require(vocab_size >= 7, ErrorKind::config, "vocabulary must hold the specials plus at least one id token");
  require(dropout >= 0.0 && dropout < 1.0, ErrorKind::config, "dropout must lie in [0, 1)");
}

json ModelConfig::to_json() const {
  return {{"encoder_layers", encoder_layers}, {"decoder_layers", decoder_layers}, {"width", width},
          {"heads", heads}, {"ff_width", ff_width}, {"max_positions", max_positions},
          {"vocab_size", vocab_size}, {"dropout", dropout}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.ff_width = j.value("ff_width", c.ff_width);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  c.seed = j.value("seed", c.seed);
  return c;
}

void TrainConfig::validate() const {
  require(learning_rate >= 0.0 && std::isfinite(learning_rate), ErrorKind::config, "learning rate must be >= 0");
  require(batch_size >= 1, ErrorKind::config, "batch size must be >= 1");
  require(steps >= 0 && epochs >= 0, ErrorKind::config, "steps/epochs must be non-negative");
}

// ---------------------------------------------------------------------------
// Parameter layout

void Model::build_layout() {
  const Eigen::Index w = config_.width, f = config_.ff_width, v = config_.vocab_size, p = config_.max_positions;
  std::size_t offset = 0;
  auto add = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    index_[name] = table_.size();
    table_.push_back({name, offset, r, c});
    offset += static_cast<std::size_t>(r * c);
  };
  add("tok_emb", v, w);
  add("enc_pos", p, w);
  add("dec_pos", p, w);
  for (int l = 0; l < config_.encoder_layers; ++l) {
    const auto e = "enc" + std::to_string(l) + ".";
    add(e + "ln1", 1, w);
    for (const char* m : {"q", "k", "v", "o"}) add(e + "attn." + m, w, w);
    add(e + "ln2", 1, w);
    add(e + "ff.w1", w, f);
    add(e + "ff.w2", f, w);
  }
  add("enc.ln_f", 1, w);
  for (int l = 0; l < config_.decoder_layers; ++l) {
    const auto d = "dec" + std::to_string(l) + ".";
    add(d + "ln1", 1, w);
    for (const char* m : {"q", "k", "v", "o"}) add(d + "self." + m, w, w);
    add(d + "ln2", 1, w);
    for (const char* m : {"q", "k", "v", "o"}) add(d + "cross." + m, w, w);
    add(d + "ln3", 1, w);
    add(d + "ff.w1", w, f);
    add(d + "ff.w2", f, w);
  }
  add("dec.ln_f", 1, w);
  add("out", w, v);
  params_.assign(offset, 0.0);
}

void Model::initialize() {
  Rng rng(derive_seed(config_.seed, "seq2seq/init"));
  for (const auto& p : table_) {
    double* data = params_.data() + p.offset;
    const auto n = static_cast<std::size_t>(p.rows * p.cols);
    const bool is_norm = p.name.find(".ln") != std::string::npos;
    if (is_norm) {
      std::fill_n(data, n, 1.0);
      continue;
    }
    double scale = 1.0 / std::sqrt(static_cast<double>(p.rows));  // fan-in of x W
    if (p.name == "tok_emb" || p.name == "enc_pos" || p.name == "dec_pos") scale = 0.5;
    for (std::size_t i = 0; i < n; ++i) data[i] = rng.normal() * scale;
  }
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  build_layout();
  initialize();
}

const ParamInfo& Model::param(const std::string& name) const {
  const auto it = index_.find(name);
  expects(it != index_.end(), "unknown parameter '" + name + "'");
  return table_[it->second];
}

Eigen::Map<const Matrix> Model::view(const std::string& name) const {
  const auto& p = param(name);
  return {params_.data() + p.offset, p.rows, p.cols};
}

// ---------------------------------------------------------------------------
// Forward / backward building blocks

namespace {

constexpr double kNormEps = 1e-6;

using CMap = Eigen::Map<const Matrix>;
using GMap = Eigen::Map<Matrix>;

struct NormCache {
  Matrix xhat;
  Vector inv;
};

Matrix rms_forward(const Matrix& x, const CMap& gain, NormCache& c) {
  const double n = static_cast<double>(x.cols());
  c.inv = ((x.array().square().rowwise().sum() / n) + kNormEps).rsqrt().matrix();
  c.xhat = x.array().colwise() * c.inv.array();
  return c.xhat.array().rowwise() * gain.row(0).array();
}

Matrix rms_backward(const NormCache& c, const CMap& gain, const Matrix& dy, double* dgain) {
  const double n = static_cast<double>(dy.cols());
  if (dgain) GMap(dgain, 1, dy.cols()) += dy.cwiseProduct(c.xhat).colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gain.row(0).array();
  const Vector dots = dxhat.cwiseProduct(c.xhat).rowwise().sum() / n;
  return ((dxhat - (c.xhat.array().colwise() * dots.array()).matrix()).array().colwise() * c.inv.array()).matrix();
}

struct AttnWeights {
  CMap q, k, v, o;
};

struct AttnGrads {
  double *q = nullptr, *k = nullptr, *v = nullptr, *o = nullptr;
};

struct AttnCache {
  Matrix xq, xkv, q, k, v, o;
  std::vector<Matrix> probs;  // per head, Tq x Tk
};

void softmax_rows(Matrix& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - m).exp();
    s.row(i) /= s.row(i).sum();
  }
}

Matrix attn_forward(const Matrix& xq, const Matrix& xkv, const AttnWeights& w, int heads, bool causal,
                    AttnCache& c) {
  const Eigen::Index width = w.q.cols(), dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.xq = xq;
  c.xkv = xkv;
  c.q = xq * w.q;
  c.k = xkv * w.k;
  c.v = xkv * w.v;
  c.o.resize(xq.rows(), width);
  c.probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Matrix s = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose() * scale;
    if (causal)
      for (Eigen::Index i = 0; i < s.rows(); ++i)
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = -std::numeric_limits<double>::infinity();
    softmax_rows(s);
    c.o.middleCols(h * dh, dh) = s * c.v.middleCols(h * dh, dh);
    c.probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return c.o * w.o;
}

/// Returns (d xq, d xkv).
std::pair<Matrix, Matrix> attn_backward(const AttnCache& c, const AttnWeights& w, int heads, const Matrix& dout,
                                        const AttnGrads& g) {
  const Eigen::Index width = w.q.cols(), dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (g.o) GMap(g.o, width, width) += c.o.transpose() * dout;
  const Matrix d_o = dout * w.o.transpose();
  Matrix dq(c.q.rows(), width), dk(c.k.rows(), width), dv(c.v.rows(), width);
  for (int h = 0; h < heads; ++h) {
    const auto& a = c.probs[static_cast<std::size_t>(h)];
    const Matrix d_oh = d_o.middleCols(h * dh, dh);
    const Matrix da = d_oh * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) = a.transpose() * d_oh;
    const Vector rs = da.cwiseProduct(a).rowwise().sum();
    const Matrix ds = (a.array() * (da.array().colwise() - rs.array())).matrix() * scale;
    dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  if (g.q) GMap(g.q, width, width) += c.xq.transpose() * dq;
  if (g.k) GMap(g.k, width, width) += c.xkv.transpose() * dk;
  if (g.v) GMap(g.v, width, width) += c.xkv.transpose() * dv;
  return {dq * w.q.transpose(), dk * w.k.transpose() + dv * w.v.transpose()};
}

struct FfnCache {
  Matrix x, pre;
};

Matrix ffn_forward(const Matrix& x, const CMap& w1, const CMap& w2, FfnCache& c) {
  c.x = x;
  c.pre = x * w1;
  return c.pre.cwiseMax(0.0) * w2;
}

Matrix ffn_backward(const FfnCache& c, const CMap& w1, const CMap& w2, const Matrix& dy, double* g1, double* g2) {
  if (g2) GMap(g2, w2.rows(), w2.cols()) += c.pre.cwiseMax(0.0).transpose() * dy;
  const Matrix dpre = (dy * w2.transpose()).cwiseProduct((c.pre.array() > 0.0).cast<double>().matrix());
  if (g1) GMap(g1, w1.rows(), w1.cols()) += c.x.transpose() * dpre;
  return dpre * w1.transpose();
}

/// Inverted dropout; an empty mask means identity.
void dropout_apply(Matrix& y, double rate, Rng* rng, Matrix& mask) {
  if (!rng || rate <= 0.0) {
    mask.resize(0, 0);
    return;
  }
  mask.resize(y.rows(), y.cols());
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->uniform() < rate ? 0.0 : keep;
  y = y.cwiseProduct(mask);
}

Matrix dropout_backward(const Matrix& dy, const Matrix& mask) {
  return mask.size() == 0 ? dy : Matrix(dy.cwiseProduct(mask));
}

struct EncLayerCache {
  NormCache n1, n2;
  AttnCache attn;
  FfnCache ffn;
  Matrix drop_a, drop_f;
};

struct DecLayerCache {
  NormCache n1, n2, n3;
  AttnCache self, cross;
  FfnCache ffn;
  Matrix drop_s, drop_c, drop_f;
};

}  // namespace

/// One example's forward pass with caches, and its backward pass.
struct ForwardPass {
  const Model& m;
  double* grad;  // nullable
  Rng* rng;

  std::vector<int> src, dec_in;
  std::vector<EncLayerCache> enc;
  std::vector<DecLayerCache> dec;
  NormCache enc_final, dec_final;
  Matrix memory, dec_out;

  CMap P(const std::string& name) const { return m.view(name); }
  double* G(const std::string& name) const { return grad ? grad + m.param(name).offset : nullptr; }
  AttnWeights attn_w(const std::string& p) const { return {P(p + "q"), P(p + "k"), P(p + "v"), P(p + "o")}; }
  AttnGrads attn_g(const std::string& p) const { return {G(p + "q"), G(p + "k"), G(p + "v"), G(p + "o")}; }

  Matrix embed(std::span<const int> tokens, const std::string& pos) const {
    const auto& c = m.config();
    require(static_cast<int>(tokens.size()) <= c.max_positions, ErrorKind::config,
            "sequence of length " + std::to_string(tokens.size()) + " exceeds max_positions " +
                std::to_string(c.max_positions));
    const CMap e = P("tok_emb"), p = P(pos);
    Matrix x(static_cast<Eigen::Index>(tokens.size()), c.width);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      expects(tokens[t] >= 0 && tokens[t] < c.vocab_size, "token " + std::to_string(tokens[t]) + " outside vocabulary");
      x.row(static_cast<Eigen::Index>(t)) = e.row(tokens[t]) + p.row(static_cast<Eigen::Index>(t));
    }
    return x;
  }

  void embed_backward(std::span<const int> tokens, const std::string& pos, const Matrix& dx) const {
    if (!grad) return;
    GMap ge(G("tok_emb"), m.config().vocab_size, m.config().width);
    GMap gp(G(pos), m.config().max_positions, m.config().width);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      ge.row(tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
      gp.row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
    }
  }

  void run_encoder(std::span<const int> source) {
    const auto& c = m.config();
    expects(!source.empty(), "empty source sequence");
    src.assign(source.begin(), source.end());
    Matrix x = embed(src, "enc_pos");
    enc.assign(static_cast<std::size_t>(c.encoder_layers), {});
    for (int l = 0; l < c.encoder_layers; ++l) {
      auto& lc = enc[static_cast<std::size_t>(l)];
      const auto p = "enc" + std::to_string(l) + ".";
      const Matrix a = rms_forward(x, P(p + "ln1"), lc.n1);
      Matrix s = attn_forward(a, a, attn_w(p + "attn."), c.heads, false, lc.attn);
      dropout_apply(s, c.dropout, rng, lc.drop_a);
      x += s;
      const Matrix b = rms_forward(x, P(p + "ln2"), lc.n2);
      Matrix f = ffn_forward(b, P(p + "ff.w1"), P(p + "ff.w2"), lc.ffn);
      dropout_apply(f, c.dropout, rng, lc.drop_f);
      x += f;
    }
    memory = rms_forward(x, P("enc.ln_f"), enc_final);
  }

  /// Decoder over [BOS, prefix...]; returns final hidden states.
  const Matrix& run_decoder(std::span<const int> prefix) {
    const auto& c = m.config();
    dec_in.assign(1, kBos);
    dec_in.insert(dec_in.end(), prefix.begin(), prefix.end());
    Matrix x = embed(dec_in, "dec_pos");
    dec.assign(static_cast<std::size_t>(c.decoder_layers), {});
    for (int l = 0; l < c.decoder_layers; ++l) {
      auto& lc = dec[static_cast<std::size_t>(l)];
      const auto p = "dec" + std::to_string(l) + ".";
      const Matrix a = rms_forward(x, P(p + "ln1"), lc.n1);
      Matrix s = attn_forward(a, a, attn_w(p + "self."), c.heads, true, lc.self);
      dropout_apply(s, c.dropout, rng, lc.drop_s);
      x += s;
      const Matrix b = rms_forward(x, P(p + "ln2"), lc.n2);
      Matrix ca = attn_forward(b, memory, attn_w(p + "cross."), c.heads, false, lc.cross);
      dropout_apply(ca, c.dropout, rng, lc.drop_c);
      x += ca;
      const Matrix h = rms_forward(x, P(p + "ln3"), lc.n3);
      Matrix f = ffn_forward(h, P(p + "ff.w1"), P(p + "ff.w2"), lc.ffn);
      dropout_apply(f, c.dropout, rng, lc.drop_f);
      x += f;
    }
    dec_out = rms_forward(x, P("dec.ln_f"), dec_final);
    return dec_out;
  }

  Matrix logits() const { return dec_out * P("out"); }

  void backward(const Matrix& dlogits) {
    const auto& c = m.config();
    if (grad) GMap(G("out"), c.width, c.vocab_size) += dec_out.transpose() * dlogits;
    Matrix dx = rms_backward(dec_final, P("dec.ln_f"), dlogits * P("out").transpose(), G("dec.ln_f"));
    Matrix dmem = Matrix::Zero(memory.rows(), memory.cols());
    for (int l = c.decoder_layers - 1; l >= 0; --l) {
      const auto& lc = dec[static_cast<std::size_t>(l)];
      const auto p = "dec" + std::to_string(l) + ".";
      Matrix df = dropout_backward(dx, lc.drop_f);
      df = ffn_backward(lc.ffn, P(p + "ff.w1"), P(p + "ff.w2"), df, G(p + "ff.w1"), G(p + "ff.w2"));
      dx += rms_backward(lc.n3, P(p + "ln3"), df, G(p + "ln3"));

      const Matrix dca = dropout_backward(dx, lc.drop_c);
      auto [dq, dkv] = attn_backward(lc.cross, attn_w(p + "cross."), c.heads, dca, attn_g(p + "cross."));
      dmem += dkv;
      dx += rms_backward(lc.n2, P(p + "ln2"), dq, G(p + "ln2"));

      const Matrix ds = dropout_backward(dx, lc.drop_s);
      auto [dsq, dskv] = attn_backward(lc.self, attn_w(p + "self."), c.heads, ds, attn_g(p + "self."));
      dx += rms_backward(lc.n1, P(p + "ln1"), dsq + dskv, G(p + "ln1"));
    }
    embed_backward(dec_in, "dec_pos", dx);

    Matrix de = rms_backward(enc_final, P("enc.ln_f"), dmem, G("enc.ln_f"));
    for (int l = c.encoder_layers - 1; l >= 0; --l) {
      const auto& lc = enc[static_cast<std::size_t>(l)];
      const auto p = "enc" + std::to_string(l) + ".";
      Matrix df = dropout_backward(de, lc.drop_f);
      df = ffn_backward(lc.ffn, P(p + "ff.w1"), P(p + "ff.w2"), df, G(p + "ff.w1"), G(p + "ff.w2"));
      de += rms_backward(lc.n2, P(p + "ln2"), df, G(p + "ln2"));
      const Matrix da = dropout_backward(de, lc.drop_a);
      auto [dq, dkv] = attn_backward(lc.attn, attn_w(p + "attn."), c.heads, da, attn_g(p + "attn."));
      de += rms_backward(lc.n1, P(p + "ln1"), dq + dkv, G(p + "ln1"));
    }
    embed_backward(src, "enc_pos", de);
  }
};

namespace {

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double m = out.row(i).maxCoeff();
    const double lse = m + std::log((out.row(i).array() - m).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

/// Decoder input tail and labels for an example: labels = target + EOS with
/// PAD positions masked; an all-PAD target yields no labels.
std::vector<int> labels_for(const Example& ex) {
  std::vector<int> labels = ex.target;
  const bool any = std::any_of(labels.begin(), labels.end(), [](int t) { return t != kPad; });
  labels.push_back(any ? kEos : kPad);
  return labels;
}

}  // namespace

Matrix Model::forward_logits(const Example& ex) const {
  ForwardPass fp{*this, nullptr, nullptr, {}, {}, {}, {}, {}, {}, {}, {}};
  fp.run_encoder(ex.source);
  fp.run_decoder(ex.target);
  return fp.logits();
}

double Model::loss_and_grads(std::span<const Example> batch, std::vector<double>* grad, Rng* dropout_rng) const {
  expects(!batch.empty(), "empty batch");
  std::size_t count = 0;
  for (const auto& ex : batch)
    for (int t : labels_for(ex)) count += t != kPad;
  expects(count > 0, "batch has no non-PAD targets");
  if (grad) grad->assign(params_.size(), 0.0);

  const double inv = 1.0 / static_cast<double>(count);
  double total = 0.0;
  for (const auto& ex : batch) {
    ForwardPass fp{*this, grad ? grad->data() : nullptr, dropout_rng, {}, {}, {}, {}, {}, {}, {}, {}};
    fp.run_encoder(ex.source);
    fp.run_decoder(ex.target);
    const Matrix logp = log_softmax_rows(fp.logits());
    const auto labels = labels_for(ex);
    Matrix dlogits = Matrix::Zero(logp.rows(), logp.cols());
    bool any = false;
    for (std::size_t t = 0; t < labels.size(); ++t) {
      if (labels[t] == kPad) continue;
      any = true;
      const auto r = static_cast<Eigen::Index>(t);
      total -= logp(r, labels[t]);
      if (grad) {
        dlogits.row(r) = logp.row(r).array().exp() * inv;
        dlogits(r, labels[t]) -= inv;
      }
    }
    if (grad && any) fp.backward(dlogits);
  }
  return total * inv;
}

Matrix Model::encode(std::span<const int> source) const {
  ForwardPass fp{*this, nullptr, nullptr, {}, {}, {}, {}, {}, {}, {}, {}};
  fp.run_encoder(source);
  return fp.memory;
}

Vector Model::next_log_probs(const Matrix& memory, std::span<const int> prefix) const {
  ForwardPass fp{*this, nullptr, nullptr, {}, {}, {}, {}, {}, {}, {}, {}};
  fp.memory = memory;
  fp.run_decoder(prefix);
  const Matrix last = fp.dec_out.bottomRows(1) * view("out");
  return log_softmax_rows(last).row(0).transpose();
}

double Model::sequence_log_prob(std::span<const int> source, std::span<const int> target) const {
  ForwardPass fp{*this, nullptr, nullptr, {}, {}, {}, {}, {}, {}, {}, {}};
  fp.run_encoder(source);
  fp.run_decoder(target);
  const Matrix logp = log_softmax_rows(fp.logits());
  double lp = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) lp += logp(static_cast<Eigen::Index>(t), target[t]);
  return lp;
}

void Model::save(const fs::path& dir) const {
  fs::create_directories(dir);
  json j = config_.to_json();
  json manifest = {{"version", 1}, {"format", "seq2seq"}, {"config", j}, {"parameter_count", params_.size()},
                   {"dtype", "f64"}, {"byte_order", "little"}};
  write_file(dir / "params.bin", embedstore::encode_tensor(params_, embedstore::DType::f64));
  write_file(dir / "config.json", manifest.dump(2) + "\n");
}

Model Model::load(const fs::path& dir) {
  try {
    const auto j = json::parse(read_file(dir / "config.json"));
    require(j.at("format") == "seq2seq" && j.at("dtype") == "f64", ErrorKind::data, "not a seq2seq checkpoint");
    Model m(ModelConfig::from_json(j.at("config")));
    require(j.at("parameter_count").get<std::size_t>() == m.params_.size(), ErrorKind::data,
            "checkpoint parameter count does not match its config");
    m.params_ = embedstore::decode_tensor(read_file(dir / "params.bin"), embedstore::DType::f64, m.params_.size());
    return m;
  } catch (const json::exception& e) {
    fail(ErrorKind::data, "bad checkpoint in " + dir.string() + ": " + e.what());
  }
}

}  // namespace semid::seq2seq
