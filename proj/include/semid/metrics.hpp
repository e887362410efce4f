#pragma once

#include "semid/common.hpp"
#include "semid/embedstore.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace semid::metrics {

inline const std::vector<int> kDefaultCutoffs{5, 10, 20};

/// 1 if `target` is among the first k entries of `ranked`, else 0.
int recall_at_k(const std::vector<std::string>& ranked, const std::string& target, int k);
/// 1 / log2(rank + 1) when the target ranks within k, else 0.
double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target, int k);

struct EvalCase {
  std::string user_id;
  std::vector<std::string> history;
  std::string target;
};

using Ranker = std::function<std::vector<std::string>(const EvalCase&)>;
/// Builds (typically trains) the ranker used for one seed.
using RankerFactory = std::function<Ranker(std::uint64_t seed)>;

struct SeedResult {
  std::uint64_t seed = 0;
  std::map<int, double> recall, ndcg;                    // cutoff -> mean over users
  std::map<int, std::vector<double>> user_recall, user_ndcg;  // cutoff -> per user, case order
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation across seeds, 0 for one seed
};

struct EvalReport {
  std::string variant;
  std::string config_digest;
  std::vector<int> cutoffs;
  std::vector<std::string> users;
  std::vector<SeedResult> seeds;

  Summary recall(int k) const;
  Summary ndcg(int k) const;
  /// Per-user score averaged over seeds.
  std::vector<double> user_mean_recall(int k) const;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Runs every case through each seed's ranker. Rankings shorter than a cutoff
/// count the missing ranks as misses. Throws data error when a case lacks a
/// target.
EvalReport evaluate(const std::vector<EvalCase>& cases, const std::vector<std::uint64_t>& seeds,
                    const RankerFactory& factory, const std::vector<int>& cutoffs = kDefaultCutoffs);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
  double mean_difference = 0.0;
  bool degenerate = false;  // zero variance of differences
};

/// Two-sided paired t-test over per-user scores.
TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct GeometryStats {
  double modality_gap = 0.0;
  double anisotropy_a = 0.0;
  double anisotropy_b = 0.0;
  std::vector<std::string> item_ids;  // joined ids, order of the first matrix
  Matrix projection;                  // 2n x 2: rows of a, then rows of b
};

/// Mean pairwise cosine over all pairs, or over `max_pairs` sampled pairs when
/// there are more.
double anisotropy(const Matrix& rows, std::uint64_t seed, std::size_t max_pairs = 10000);

/// Top-2 principal component scores of mean-centred rows. Component signs are
/// fixed so each axis's largest-magnitude loading is positive.
Matrix pca_2d(const Matrix& rows);

GeometryStats geometry_stats(const embedstore::EmbeddingMatrix& a, const embedstore::EmbeddingMatrix& b,
                             std::uint64_t seed = 0);

}  // namespace semid::metrics
