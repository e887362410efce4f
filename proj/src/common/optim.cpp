#include "semid/optim.hpp"

#include "semid/error.hpp"

#include <cmath>

namespace semid {

Adam::Adam(std::size_t n_params, AdamConfig config)
    : config_(config), m_(n_params, 0.0), v_(n_params, 0.0) {
  require(config.learning_rate >= 0.0, ErrorKind::config, "learning rate must be non-negative");
}

double Adam::step(std::span<double> params, std::span<double> grads) {
  expects(params.size() == m_.size() && grads.size() == m_.size(), "Adam buffer size mismatch");
  double sq = 0.0;
  for (double g : grads) sq += g * g;
  const double norm = std::sqrt(sq);
  double scale = 1.0;
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm) scale = config_.clip_norm / norm;

  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] * scale;
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g * g;
    if (lr == 0.0) continue;
    params[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.epsilon);
  }
  return norm;
}

}  // namespace semid
