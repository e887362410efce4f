#include "semid/metrics.hpp"

#include "semid/error.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace semid::metrics {

using nlohmann::json;

namespace {

/// 1-based rank of target within the first k entries, 0 when absent.
std::size_t rank_within(const std::vector<std::string>& ranked, const std::string& target, int k) {
  require(k > 0, ErrorKind::config, "cutoff K must be positive, got " + std::to_string(k));
  const auto limit = std::min(ranked.size(), static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < limit; ++i)
    if (ranked[i] == target) return i + 1;
  return 0;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace

int recall_at_k(const std::vector<std::string>& ranked, const std::string& target, int k) {
  return rank_within(ranked, target, k) > 0 ? 1 : 0;
}

double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target, int k) {
  const auto r = rank_within(ranked, target, k);
  return r == 0 ? 0.0 : 1.0 / std::log2(static_cast<double>(r) + 1.0);
}

Summary EvalReport::recall(int k) const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.recall.at(k));
  return summarize(v);
}

Summary EvalReport::ndcg(int k) const {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(s.ndcg.at(k));
  return summarize(v);
}

std::vector<double> EvalReport::user_mean_recall(int k) const {
  std::vector<double> out(users.size(), 0.0);
  for (const auto& s : seeds) {
    const auto& u = s.user_recall.at(k);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += u[i];
  }
  for (double& v : out) v /= static_cast<double>(seeds.size());
  return out;
}

json EvalReport::to_json() const {
  expects(!seeds.empty(), "report has no seeds");
  json per_seed = json::array();
  for (const auto& s : seeds) {
    json r, n;
    for (int k : cutoffs) {
      r[std::to_string(k)] = s.recall.at(k);
      n[std::to_string(k)] = s.ndcg.at(k);
    }
    per_seed.push_back({{"seed", s.seed}, {"recall", r}, {"ndcg", n}});
  }
  json agg_r, agg_n;
  for (int k : cutoffs) {
    const auto r = recall(k), n = ndcg(k);
    agg_r[std::to_string(k)] = {{"mean", r.mean}, {"std", r.std}};
    agg_n[std::to_string(k)] = {{"mean", n.mean}, {"std", n.std}};
  }
  json seed_list = json::array();
  for (const auto& s : seeds) seed_list.push_back(s.seed);
  return {{"variant", variant},       {"config_digest", config_digest}, {"cutoffs", cutoffs},
          {"seeds", seed_list},       {"user_count", users.size()},     {"per_seed", per_seed},
          {"aggregate", {{"recall", agg_r}, {"ndcg", agg_n}}}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.variant = j.at("variant").get<std::string>();
  r.config_digest = j.at("config_digest").get<std::string>();
  r.cutoffs = j.at("cutoffs").get<std::vector<int>>();
  r.users.resize(j.at("user_count").get<std::size_t>());
  for (const auto& s : j.at("per_seed")) {
    SeedResult sr;
    sr.seed = s.at("seed").get<std::uint64_t>();
    for (int k : r.cutoffs) {
      sr.recall[k] = s.at("recall").at(std::to_string(k)).get<double>();
      sr.ndcg[k] = s.at("ndcg").at(std::to_string(k)).get<double>();
    }
    r.seeds.push_back(std::move(sr));
  }
  return r;
}

EvalReport evaluate(const std::vector<EvalCase>& cases, const std::vector<std::uint64_t>& seeds,
                    const RankerFactory& factory, const std::vector<int>& cutoffs) {
  require(!seeds.empty(), ErrorKind::config, "evaluation needs at least one seed");
  require(!cutoffs.empty(), ErrorKind::config, "evaluation needs at least one cutoff");
  for (int k : cutoffs) require(k > 0, ErrorKind::config, "cutoff K must be positive, got " + std::to_string(k));
  std::vector<std::string> missing;
  for (const auto& c : cases)
    if (c.target.empty()) missing.push_back(c.user_id);
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) list += (i ? ", " : "") + missing[i];
    fail(ErrorKind::data, "protocol error: " + std::to_string(missing.size()) + " user(s) lack a test target (" +
                              list + ")");
  }

  EvalReport report;
  report.cutoffs = cutoffs;
  std::sort(report.cutoffs.begin(), report.cutoffs.end());
  report.cutoffs.erase(std::unique(report.cutoffs.begin(), report.cutoffs.end()), report.cutoffs.end());
  for (const auto& c : cases) report.users.push_back(c.user_id);

  for (std::uint64_t seed : seeds) {
    const Ranker rank = factory(seed);
    SeedResult sr;
    sr.seed = seed;
    for (int k : report.cutoffs) {
      sr.user_recall[k].reserve(cases.size());
      sr.user_ndcg[k].reserve(cases.size());
    }
    for (const auto& c : cases) {
      const auto ranked = rank(c);
      for (int k : report.cutoffs) {
        sr.user_recall[k].push_back(recall_at_k(ranked, c.target, k));
        sr.user_ndcg[k].push_back(ndcg_at_k(ranked, c.target, k));
      }
    }
    const double n = std::max<double>(1.0, static_cast<double>(cases.size()));
    for (int k : report.cutoffs) {
      double r = 0.0, g = 0.0;
      for (double v : sr.user_recall[k]) r += v;
      for (double v : sr.user_ndcg[k]) g += v;
      sr.recall[k] = r / n;
      sr.ndcg[k] = g / n;
    }
    report.seeds.push_back(std::move(sr));
  }
  return report;
}

TTestResult paired_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  expects(a.size() == b.size(), "paired t-test needs equal-length samples");
  expects(a.size() >= 2, "paired t-test needs at least two pairs");
  const auto n = a.size();
  TTestResult r;
  r.df = static_cast<int>(n - 1);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  r.mean_difference = mean;
  const double var = ss / static_cast<double>(n - 1);
  if (!(var > 1e-300)) {
    r.degenerate = true;
    r.t = 0.0;
    r.p = 1.0;
    return r;
  }
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  const boost::math::students_t dist(static_cast<double>(r.df));
  r.p = std::clamp(2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))), 0.0, 1.0);
  return r;
}

double anisotropy(const Matrix& rows, std::uint64_t seed, std::size_t max_pairs) {
  const auto n = static_cast<std::size_t>(rows.rows());
  expects(n >= 2, "anisotropy needs at least two rows");
  Matrix unit = rows;
  for (Eigen::Index i = 0; i < unit.rows(); ++i) {
    const double norm = unit.row(i).norm();
    require(norm > 0.0, ErrorKind::data, "zero row in anisotropy input");
    unit.row(i) /= norm;
  }
  const std::size_t all_pairs = n * (n - 1) / 2;
  double sum = 0.0;
  std::size_t count = 0;
  if (all_pairs <= max_pairs) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j, ++count)
        sum += unit.row(static_cast<Eigen::Index>(i)).dot(unit.row(static_cast<Eigen::Index>(j)));
  } else {
    Rng rng(derive_seed(seed, "metrics/anisotropy"));
    for (; count < max_pairs; ++count) {
      const auto i = rng.below(n);
      auto j = rng.below(n - 1);
      if (j >= i) ++j;
      sum += unit.row(static_cast<Eigen::Index>(i)).dot(unit.row(static_cast<Eigen::Index>(j)));
    }
  }
  return sum / static_cast<double>(count);
}

Matrix pca_2d(const Matrix& rows) {
  expects(rows.rows() >= 1 && rows.cols() >= 2, "PCA needs rows of dimension >= 2");
  const Matrix centred = rows.rowwise() - rows.colwise().mean();
  const Matrix cov = centred.transpose() * centred;
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  const Eigen::Index d = cov.rows();
  Matrix basis(d, 2);
  for (int c = 0; c < 2; ++c) {
    Vector v = solver.eigenvectors().col(d - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(c) = v;
  }
  Matrix proj = centred * basis;
  proj.rowwise() -= proj.colwise().mean();
  return proj;
}

GeometryStats geometry_stats(const embedstore::EmbeddingMatrix& a, const embedstore::EmbeddingMatrix& b,
                             std::uint64_t seed) {
  require(a.rows.cols() == b.rows.cols(), ErrorKind::data, "geometry inputs have different dimensions");
  std::map<std::string, Eigen::Index> b_index;
  for (std::size_t i = 0; i < b.item_ids.size(); ++i) b_index[b.item_ids[i]] = static_cast<Eigen::Index>(i);
  GeometryStats g;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> pairs;
  for (std::size_t i = 0; i < a.item_ids.size(); ++i) {
    const auto it = b_index.find(a.item_ids[i]);
    if (it == b_index.end()) continue;
    pairs.emplace_back(static_cast<Eigen::Index>(i), it->second);
    g.item_ids.push_back(a.item_ids[i]);
  }
  require(!pairs.empty(), ErrorKind::data, "pairing error: the two matrices share no item ids");

  const auto n = static_cast<Eigen::Index>(pairs.size());
  Matrix ra(n, a.rows.cols()), rb(n, b.rows.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    ra.row(i) = a.rows.row(pairs[static_cast<std::size_t>(i)].first);
    rb.row(i) = b.rows.row(pairs[static_cast<std::size_t>(i)].second);
  }
  double gap = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double denom = ra.row(i).norm() * rb.row(i).norm();
    require(denom > 0.0, ErrorKind::data, "zero row in geometry input");
    gap += 1.0 - ra.row(i).dot(rb.row(i)) / denom;
  }
  g.modality_gap = gap / static_cast<double>(n);
  if (n >= 2) {
    g.anisotropy_a = anisotropy(ra, derive_seed(seed, "a"));
    g.anisotropy_b = anisotropy(rb, derive_seed(seed, "b"));
  }
  Matrix stacked(2 * n, ra.cols());
  stacked << ra, rb;
  g.projection = pca_2d(stacked);
  return g;
}

}  // namespace semid::metrics
