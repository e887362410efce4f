#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace semid {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

/// Adam over a flat parameter buffer. Gradients are clipped by global L2 norm
/// before the moment update.
class Adam {
 public:
  Adam(std::size_t n_params, AdamConfig config);

  /// Returns the gradient norm before clipping.
  double step(std::span<double> params, std::span<double> grads);

  std::int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<double> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace semid
