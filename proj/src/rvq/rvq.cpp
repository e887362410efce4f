#include "semid/rvq.hpp"

#include "semid/embedstore.hpp"
#include "semid/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace semid::rvq {

std::string to_string(Mode m) { return m == Mode::kmeans_rvq ? "kmeans_rvq" : "rqvae"; }

Mode parse_mode(std::string_view s) {
  if (s == "kmeans_rvq") return Mode::kmeans_rvq;
  if (s == "rqvae") return Mode::rqvae;
  fail(ErrorKind::config, "unknown rvq mode '" + std::string(s) + "' (expected kmeans_rvq|rqvae)");
}

int nearest_row(const Matrix& codebook, const Eigen::Ref<const Vector>& v) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
    const double d = (codebook.row(k).transpose() - v).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

std::size_t distinct_rows(const Matrix& points) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    seen.emplace(points.row(i).data(), points.row(i).data() + points.cols());
  return seen.size();
}

KMeansResult kmeans(const Matrix& points, int k, std::uint64_t seed, const KMeansConfig& config) {
  const Eigen::Index n = points.rows(), d = points.cols();
  expects(k >= 1 && n >= k, "kmeans needs at least k points");
  Rng rng(seed);

  // k-means++ seeding.
  Matrix centroids(k, d);
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  auto first = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
  centroids.row(0) = points.row(first);
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto& di = d2[static_cast<std::size_t>(i)];
      di = std::min(di, (points.row(i) - centroids.row(c - 1)).squaredNorm());
      total += di;
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      const double u = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[static_cast<std::size_t>(i)];
        if (acc > u && d2[static_cast<std::size_t>(i)] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centroids.row(c) = points.row(pick);
  }

  KMeansResult res;
  res.assignment.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist(static_cast<std::size_t>(n));
  auto assign = [&] {
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = nearest_row(centroids, points.row(i).transpose());
      res.assignment[static_cast<std::size_t>(i)] = a;
      dist[static_cast<std::size_t>(i)] = (points.row(i) - centroids.row(a)).squaredNorm();
      inertia += dist[static_cast<std::size_t>(i)];
    }
    return inertia;
  };

  for (int iter = 0; iter < config.max_iterations; ++iter) {
    assign();
    Matrix next = Matrix::Zero(k, d);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int a = res.assignment[static_cast<std::size_t>(i)];
      next.row(a) += points.row(i);
      ++counts[static_cast<std::size_t>(a)];
    }
    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty cluster: take over the farthest not-yet-used point.
      Eigen::Index far = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        if (far < 0 || dist[static_cast<std::size_t>(i)] > dist[static_cast<std::size_t>(far)]) far = i;
      }
      taken[static_cast<std::size_t>(far)] = true;
      next.row(c) = points.row(far);
    }
    const double shift = (next - centroids).rowwise().norm().maxCoeff();
    centroids = std::move(next);
    res.iterations = iter + 1;
    if (shift <= config.tolerance) break;
  }
  res.inertia = assign();
  res.centroids = std::move(centroids);
  return res;
}

// ---------------------------------------------------------------------------
// Mlp

Mlp Mlp::random(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, Rng& rng) {
  Mlp m;
  m.w1.resize(hidden, in);
  m.w2.resize(out, hidden);
  const double s1 = std::sqrt(2.0 / static_cast<double>(in));
  const double s2 = std::sqrt(1.0 / static_cast<double>(hidden));
  for (Eigen::Index i = 0; i < m.w1.size(); ++i) m.w1.data()[i] = rng.normal() * s1;
  for (Eigen::Index i = 0; i < m.w2.size(); ++i) m.w2.data()[i] = rng.normal() * s2;
  m.b1 = Vector::Zero(hidden);
  m.b2 = Vector::Zero(out);
  return m;
}

std::size_t Mlp::parameter_count() const {
  return static_cast<std::size_t>(w1.size() + b1.size() + w2.size() + b2.size());
}

Matrix Mlp::forward(const Matrix& x, Matrix* hidden_pre) const {
  Matrix pre = x * w1.transpose();
  pre.rowwise() += b1.transpose();
  Matrix out = pre.cwiseMax(0.0) * w2.transpose();
  out.rowwise() += b2.transpose();
  if (hidden_pre) *hidden_pre = std::move(pre);
  return out;
}

Matrix Mlp::backward(const Matrix& x, const Matrix& hidden_pre, const Matrix& grad_out,
                     std::span<double> grad) const {
  expects(grad.size() == parameter_count(), "Mlp gradient buffer size");
  const Matrix h = hidden_pre.cwiseMax(0.0);
  Matrix dpre = (grad_out * w2).cwiseProduct((hidden_pre.array() > 0.0).cast<double>().matrix());
  double* g = grad.data();
  Eigen::Map<Matrix>(g, w1.rows(), w1.cols()) += dpre.transpose() * x;
  g += w1.size();
  Eigen::Map<Vector>(g, b1.size()) += dpre.colwise().sum().transpose();
  g += b1.size();
  Eigen::Map<Matrix>(g, w2.rows(), w2.cols()) += grad_out.transpose() * h;
  g += w2.size();
  Eigen::Map<Vector>(g, b2.size()) += grad_out.colwise().sum().transpose();
  return dpre * w1;
}

void Mlp::to_flat(std::span<double> out) const {
  expects(out.size() == parameter_count(), "Mlp flat size");
  double* p = out.data();
  p = std::copy_n(w1.data(), w1.size(), p);
  p = std::copy_n(b1.data(), b1.size(), p);
  p = std::copy_n(w2.data(), w2.size(), p);
  std::copy_n(b2.data(), b2.size(), p);
}

void Mlp::from_flat(std::span<const double> in) {
  expects(in.size() == parameter_count(), "Mlp flat size");
  const double* p = in.data();
  std::copy_n(p, w1.size(), w1.data());
  p += w1.size();
  std::copy_n(p, b1.size(), b1.data());
  p += b1.size();
  std::copy_n(p, w2.size(), w2.data());
  p += w2.size();
  std::copy_n(p, b2.size(), b2.data());
}

// ---------------------------------------------------------------------------
// RvqModel

void RvqModel::validate() const {
  expects(levels >= 1 && codebook_size >= 2, "rvq model needs L >= 1 and K >= 2");
  expects(static_cast<int>(codebooks.size()) == levels, "codebook count != levels");
  for (const auto& cb : codebooks) {
    expects(cb.rows() == codebook_size && cb.cols() == code_dim, "codebook shape mismatch");
    require(cb.allFinite(), ErrorKind::data, "non-finite codeword");
  }
  if (mode == Mode::rqvae) expects(encoder.has_value() && decoder.has_value(), "rqvae model without networks");
}

Vector RvqModel::to_code_space(const Eigen::Ref<const Vector>& v) const {
  expects(v.size() == input_dim, "dimension mismatch: got " + std::to_string(v.size()) + ", model expects " +
                                     std::to_string(input_dim));
  if (mode == Mode::kmeans_rvq) return v;
  Matrix row = v.transpose();
  return encoder->forward(row).row(0).transpose();
}

RvqModel::Trace RvqModel::encode_trace(const Eigen::Ref<const Vector>& v) const {
  Trace t;
  Vector r = to_code_space(v);
  t.quantized = Vector::Zero(code_dim);
  t.residual_norms.push_back(r.norm());
  for (const auto& cb : codebooks) {
    const int k = nearest_row(cb, r);
    t.id.codes.push_back(k);
    r -= cb.row(k).transpose();
    t.quantized += cb.row(k).transpose();
    t.residual_norms.push_back(r.norm());
  }
  return t;
}

Vector RvqModel::decode(const SemanticId& id) const {
  expects(static_cast<int>(id.codes.size()) == levels, "semantic id length != levels");
  Vector q = Vector::Zero(code_dim);
  for (int l = 0; l < levels; ++l) {
    const int k = id.codes[static_cast<std::size_t>(l)];
    expects(k >= 0 && k < codebook_size, "code " + std::to_string(k) + " out of range at level " + std::to_string(l));
    q += codebooks[static_cast<std::size_t>(l)].row(k).transpose();
  }
  if (mode == Mode::kmeans_rvq) return q;
  Matrix row = q.transpose();
  return decoder->forward(row).row(0).transpose();
}

double reconstruction_mse(const RvqModel& model, const Matrix& data, int levels) {
  expects(levels >= 1 && levels <= model.levels, "levels out of range");
  double total = 0.0;
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    auto id = model.encode(data.row(i).transpose());
    Vector q = Vector::Zero(model.code_dim);
    for (int l = 0; l < levels; ++l) q += model.codebooks[static_cast<std::size_t>(l)].row(id.codes[static_cast<std::size_t>(l)]).transpose();
    Vector recon = q;
    if (model.mode == Mode::rqvae) {
      Matrix row = q.transpose();
      recon = model.decoder->forward(row).row(0).transpose();
    }
    total += (recon - data.row(i).transpose()).squaredNorm();
  }
  return data.rows() > 0 ? total / static_cast<double>(data.rows()) : 0.0;
}

namespace {

void check_population(const Matrix& residuals, int k, int level) {
  const auto distinct = distinct_rows(residuals);
  require(distinct >= static_cast<std::size_t>(k), ErrorKind::data,
          "under-population at level " + std::to_string(level) + ": " + std::to_string(distinct) +
              " distinct points for codebook size " + std::to_string(k));
}

/// Residual k-means over code-space points; fills `codebooks`.
std::vector<Matrix> fit_residual_codebooks(Matrix residual, const FitConfig& cfg) {
  std::vector<Matrix> books;
  for (int l = 0; l < cfg.levels; ++l) {
    check_population(residual, cfg.codebook_size, l + 1);
    auto km = kmeans(residual, cfg.codebook_size, derive_seed(cfg.seed, "rvq/level" + std::to_string(l)), cfg.kmeans);
    for (Eigen::Index i = 0; i < residual.rows(); ++i) {
      const int k = nearest_row(km.centroids, residual.row(i).transpose());
      residual.row(i) -= km.centroids.row(k);
    }
    books.push_back(std::move(km.centroids));
  }
  return books;
}

void check_fit_config(const Matrix& data, const FitConfig& cfg) {
  require(cfg.levels >= 1, ErrorKind::config, "rvq levels must be >= 1");
  require(cfg.codebook_size >= 2, ErrorKind::config, "rvq codebook size must be >= 2");
  require(data.rows() >= cfg.codebook_size, ErrorKind::data,
          "under-population at level 1: " + std::to_string(data.rows()) + " rows for codebook size " +
              std::to_string(cfg.codebook_size));
  require(data.cols() >= 1 && data.allFinite(), ErrorKind::data, "rvq input must be finite and non-empty");
}

}  // namespace

// ---------------------------------------------------------------------------
// RqvaeTrainer

RqvaeTrainer::RqvaeTrainer(const Matrix& init_data, const FitConfig& config) : config_(config) {
  check_fit_config(init_data, config);
  const auto& rc = config.rqvae;
  require(rc.hidden >= 1 && rc.batch >= 1 && rc.steps >= 0 && rc.beta >= 0.0, ErrorKind::config,
          "invalid rqvae configuration");
  Rng rng(derive_seed(config.seed, "rqvae/init"));
  const Eigen::Index d = init_data.cols();
  const Eigen::Index latent = rc.latent_dim > 0 ? rc.latent_dim : d;
  model_.mode = Mode::rqvae;
  model_.levels = config.levels;
  model_.codebook_size = config.codebook_size;
  model_.input_dim = d;
  model_.code_dim = latent;
  model_.seed = config.seed;
  model_.beta = rc.beta;
  model_.encoder = Mlp::random(d, rc.hidden, latent, rng);
  model_.decoder = Mlp::random(latent, rc.hidden, d, rng);
  model_.codebooks = fit_residual_codebooks(model_.encoder->forward(init_data), config);
  pack();
  AdamConfig ac;
  ac.learning_rate = rc.learning_rate;
  adam_.emplace(params_.size(), ac);
}

void RqvaeTrainer::pack() {
  const std::size_t ne = model_.encoder->parameter_count(), nd = model_.decoder->parameter_count();
  const auto cb = static_cast<std::size_t>(model_.levels * model_.codebook_size * model_.code_dim);
  params_.resize(ne + nd + cb);
  model_.encoder->to_flat({params_.data(), ne});
  model_.decoder->to_flat({params_.data() + ne, nd});
  double* p = params_.data() + ne + nd;
  for (const auto& b : model_.codebooks) p = std::copy_n(b.data(), b.size(), p);
}

void RqvaeTrainer::unpack() {
  const std::size_t ne = model_.encoder->parameter_count(), nd = model_.decoder->parameter_count();
  model_.encoder->from_flat({params_.data(), ne});
  model_.decoder->from_flat({params_.data() + ne, nd});
  const double* p = params_.data() + ne + nd;
  for (auto& b : model_.codebooks) {
    std::copy_n(p, b.size(), b.data());
    p += b.size();
  }
}

RqvaeTrainer::StepResult RqvaeTrainer::evaluate(const Matrix& x, std::vector<double>* param_grad) const {
  expects(x.rows() >= 1 && x.cols() == model_.input_dim, "rqvae batch shape");
  const auto& enc = *model_.encoder;
  const auto& dec = *model_.decoder;
  const double n = static_cast<double>(x.rows());
  const double beta = model_.beta;

  Matrix h_enc, h_dec;
  const Matrix z = enc.forward(x, &h_enc);
  Matrix q = Matrix::Zero(z.rows(), z.cols());
  std::vector<std::vector<int>> codes(static_cast<std::size_t>(x.rows()));
  double codebook_term = 0.0;
  // residual before each level, needed for the codebook gradient
  std::vector<Matrix> level_residual;
  Matrix r = z;
  for (int l = 0; l < model_.levels; ++l) {
    level_residual.push_back(r);
    const auto& cb = model_.codebooks[static_cast<std::size_t>(l)];
    for (Eigen::Index i = 0; i < r.rows(); ++i) {
      const int k = nearest_row(cb, r.row(i).transpose());
      codes[static_cast<std::size_t>(i)].push_back(k);
      r.row(i) -= cb.row(k);
      q.row(i) += cb.row(k);
    }
    codebook_term += r.squaredNorm();
  }
  const Matrix xhat = dec.forward(q, &h_dec);
  const Matrix diff = xhat - x;
  const double recon = diff.squaredNorm() / n;
  const double commit = beta * (z - q).squaredNorm() / n;

  StepResult out;
  out.loss = recon + commit + codebook_term / n;

  const std::size_t ne = enc.parameter_count(), nd = dec.parameter_count();
  std::vector<double> local;
  std::vector<double>& g = param_grad ? *param_grad : local;
  g.assign(params_.size(), 0.0);

  const Matrix g_xhat = 2.0 * diff / n;
  // Straight-through: the decoder-input gradient is handed to z unchanged.
  Matrix dz = dec.backward(q, h_dec, g_xhat, {g.data() + ne, nd});
  dz += 2.0 * beta * (z - q) / n;
  out.input_grad = enc.backward(x, h_enc, dz, {g.data(), ne}) - g_xhat;

  double* gcb = g.data() + ne + nd;
  const auto stride = static_cast<std::size_t>(model_.codebook_size * model_.code_dim);
  for (int l = 0; l < model_.levels; ++l) {
    Eigen::Map<Matrix> gl(gcb + static_cast<std::size_t>(l) * stride, model_.codebook_size, model_.code_dim);
    const auto& cb = model_.codebooks[static_cast<std::size_t>(l)];
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const int k = codes[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)];
      gl.row(k) += 2.0 * (cb.row(k) - level_residual[static_cast<std::size_t>(l)].row(i)) / n;
    }
  }
  return out;
}

RqvaeTrainer::StepResult RqvaeTrainer::step(const Matrix& batch) {
  std::vector<double> grad;
  auto res = evaluate(batch, &grad);
  require(std::isfinite(res.loss), ErrorKind::divergence,
          "rqvae loss became non-finite at step " + std::to_string(adam_->steps_taken()));
  adam_->step(params_, grad);
  unpack();
  model_.loss_curve.push_back(res.loss);
  return res;
}

RvqModel RqvaeTrainer::take_model() && { return std::move(model_); }

double rqvae_surrogate_loss(const RvqModel& model, const Matrix& x, const Matrix& frozen_offset,
                            const Matrix& frozen_q) {
  expects(model.mode == Mode::rqvae, "surrogate loss needs an rqvae model");
  const double n = static_cast<double>(x.rows());
  const Matrix z = model.encoder->forward(x);
  const Matrix xhat = model.decoder->forward(z + frozen_offset);
  return (xhat - x).squaredNorm() / n + model.beta * (z - frozen_q).squaredNorm() / n;
}

RvqModel fit(const Matrix& data, const FitConfig& config) {
  check_fit_config(data, config);
  if (config.mode == Mode::kmeans_rvq) {
    RvqModel m;
    m.mode = Mode::kmeans_rvq;
    m.levels = config.levels;
    m.codebook_size = config.codebook_size;
    m.input_dim = m.code_dim = data.cols();
    m.seed = config.seed;
    m.beta = config.rqvae.beta;
    m.codebooks = fit_residual_codebooks(data, config);
    return m;
  }

  RqvaeTrainer trainer(data, config);
  Rng rng(derive_seed(config.seed, "rqvae/batches"));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.rqvae.batch), order.size());
  Matrix b(static_cast<Eigen::Index>(batch), data.cols());
  for (int s = 0; s < config.rqvae.steps; ++s) {
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      b.row(static_cast<Eigen::Index>(i)) = data.row(order[cursor++]);
    }
    trainer.step(b);
  }
  return std::move(trainer).take_model();
}

std::map<std::string, SemanticId> resolve_collisions(const std::map<std::string, SemanticId>& ids) {
  std::map<std::vector<int>, int> next;
  std::map<std::string, SemanticId> out;
  for (const auto& [item, id] : ids) {  // std::map iterates in item-id order
    SemanticId s = id;
    s.dedup = next[id.codes]++;
    out.emplace(item, std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

void save_model(const RvqModel& model, const fs::path& dir) {
  model.validate();
  fs::create_directories(dir);
  nlohmann::json j = {
      {"version", 1},
      {"L", model.levels},
      {"K", model.codebook_size},
      {"d", model.code_dim},
      {"input_dim", model.input_dim},
      {"mode", to_string(model.mode)},
      {"seed", model.seed},
      {"beta", model.beta},
      {"dtype", "f64"},
      {"byte_order", "little"},
  };
  std::vector<double> flat;
  for (const auto& cb : model.codebooks) flat.insert(flat.end(), cb.data(), cb.data() + cb.size());
  write_file(dir / "codebooks.bin", embedstore::encode_tensor(flat, embedstore::DType::f64));
  if (model.mode == Mode::rqvae) {
    j["hidden"] = model.encoder->w1.rows();
    for (const auto& [name, net] : {std::pair{"encoder", &*model.encoder}, std::pair{"decoder", &*model.decoder}}) {
      std::vector<double> p(net->parameter_count());
      net->to_flat(p);
      write_file(dir / (std::string(name) + ".bin"), embedstore::encode_tensor(p, embedstore::DType::f64));
    }
  }
  write_file(dir / "model.json", j.dump(2) + "\n");
}

RvqModel load_model(const fs::path& dir) {
  RvqModel m;
  try {
    const auto j = nlohmann::json::parse(read_file(dir / "model.json"));
    require(j.at("version").get<int>() == 1 && j.at("dtype") == "f64", ErrorKind::data, "unsupported rvq model file");
    m.levels = j.at("L").get<int>();
    m.codebook_size = j.at("K").get<int>();
    m.code_dim = j.at("d").get<Eigen::Index>();
    m.input_dim = j.at("input_dim").get<Eigen::Index>();
    m.mode = parse_mode(j.at("mode").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.beta = j.at("beta").get<double>();
    require(m.levels >= 1 && m.codebook_size >= 2 && m.code_dim >= 1, ErrorKind::data, "rvq header out of range");
    const auto per = static_cast<std::size_t>(m.codebook_size * m.code_dim);
    const auto flat = embedstore::decode_tensor(read_file(dir / "codebooks.bin"), embedstore::DType::f64,
                                                per * static_cast<std::size_t>(m.levels));
    for (int l = 0; l < m.levels; ++l)
      m.codebooks.push_back(Eigen::Map<const Matrix>(flat.data() + static_cast<std::size_t>(l) * per,
                                                     m.codebook_size, m.code_dim));
    if (m.mode == Mode::rqvae) {
      const auto hidden = j.at("hidden").get<Eigen::Index>();
      Rng dummy(0);
      m.encoder = Mlp::random(m.input_dim, hidden, m.code_dim, dummy);
      m.decoder = Mlp::random(m.code_dim, hidden, m.input_dim, dummy);
      for (auto* net : {&*m.encoder, &*m.decoder}) {
        const auto name = net == &*m.encoder ? "encoder.bin" : "decoder.bin";
        net->from_flat(embedstore::decode_tensor(read_file(dir / name), embedstore::DType::f64, net->parameter_count()));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "bad rvq model in " + dir.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

}  // namespace semid::rvq
