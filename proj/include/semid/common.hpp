#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace semid {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

namespace fs = std::filesystem;

/// Portable seeded generator. The mt19937_64 engine sequence is fixed by the
/// standard but std::*_distribution output is not, so sampling is done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                          // [0, 1)
  double normal();                           // N(0, 1)
  std::uint64_t below(std::uint64_t bound);  // [0, bound)

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent stream seed from a base seed and a label.
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const fs::path& path);

std::string read_file(const fs::path& path);
void write_file(const fs::path& path, std::string_view bytes);

/// Fixed-width number formatting used by every text artifact.
std::string format_fixed(double v, int decimals);

}  // namespace semid
