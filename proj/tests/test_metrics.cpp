#include <doctest.h>

#include "semid/metrics.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <cmath>

using namespace semid;
using namespace semid::metrics;

namespace {

std::vector<std::string> ranking(int n) {
  std::vector<std::string> r;
  for (int i = 0; i < n; ++i) r.push_back("r" + std::to_string(i));
  return r;
}

embedstore::EmbeddingMatrix matrix(const Matrix& rows, embedstore::Modality m) {
  embedstore::EmbeddingMatrix e;
  e.modality = m;
  e.rows = rows;
  for (Eigen::Index i = 0; i < rows.rows(); ++i) e.item_ids.push_back(embedstore::synthetic_item_id(static_cast<int>(i)));
  return e;
}

}  // namespace

TEST_CASE("recall and ndcg on fixed ranks") {
  const auto r = ranking(30);
  CHECK(recall_at_k(r, "r0", 5) == 1);
  CHECK(ndcg_at_k(r, "r0", 5) == 1.0);
  CHECK(recall_at_k(r, "r2", 5) == 1);
  CHECK(ndcg_at_k(r, "r2", 5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(recall_at_k(r, "r6", 5) == 0);
  CHECK(ndcg_at_k(r, "r6", 5) == 0.0);
  CHECK(ndcg_at_k(r, "r6", 10) == doctest::Approx(1.0 / std::log2(8.0)));
  CHECK(recall_at_k(r, "absent", 20) == 0);
  CHECK_THROWS_KIND(recall_at_k(r, "r0", 0), ErrorKind::config);
}

TEST_CASE("metrics are monotone in the cutoff") {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const auto r = ranking(25);
    const auto target = "r" + std::to_string(rng.below(30));
    double prev_r = 0, prev_n = 0;
    for (int k : {1, 5, 10, 20}) {
      const double rk = recall_at_k(r, target, k), nk = ndcg_at_k(r, target, k);
      CHECK(rk >= prev_r);
      CHECK(nk >= prev_n);
      CHECK(nk <= rk);
      prev_r = rk;
      prev_n = nk;
    }
  }
}

TEST_CASE("two-user evaluation fixture") {
  const std::vector<EvalCase> cases{{"u1", {"a"}, "x"}, {"u2", {"b"}, "y"}};
  const auto rep = evaluate(cases, {0}, [](std::uint64_t) -> Ranker {
    return [](const EvalCase& c) {
      return c.user_id == "u1" ? std::vector<std::string>{"x", "y", "z"} : std::vector<std::string>{"z", "y"};
    };
  }, {1, 5});
  CHECK(rep.recall(1).mean == 0.5);
  CHECK(rep.recall(5).mean == 1.0);
  CHECK(rep.ndcg(5).mean == doctest::Approx((1.0 + 1.0 / std::log2(3.0)) / 2));
  CHECK(rep.users == std::vector<std::string>{"u1", "u2"});
  CHECK(rep.recall(5).std == 0.0);

  const auto back = EvalReport::from_json(rep.to_json());
  CHECK(back.to_json() == rep.to_json());

  CHECK_THROWS_KIND(evaluate({{"u1", {"a"}, ""}}, {0}, [](std::uint64_t) -> Ranker {
    return [](const EvalCase&) { return std::vector<std::string>{}; };
  }), ErrorKind::data);
}

TEST_CASE("seed summaries use the sample standard deviation") {
  const std::vector<EvalCase> cases{{"u1", {}, "x"}};
  const auto rep = evaluate(cases, {0, 1, 2}, [](std::uint64_t seed) -> Ranker {
    return [seed](const EvalCase&) {
      return seed == 0 ? std::vector<std::string>{"x"} : std::vector<std::string>{"y"};
    };
  }, {1});
  CHECK(rep.recall(1).mean == doctest::Approx(1.0 / 3));
  CHECK(rep.recall(1).std == doctest::Approx(std::sqrt(1.0 / 3)));
  CHECK(rep.user_mean_recall(1) == std::vector<double>{1.0 / 3});
}

TEST_CASE("paired t-test matches quadrature") {
  std::vector<double> a(10), b(10, 0.0);
  for (int i = 0; i < 10; ++i) a[static_cast<std::size_t>(i)] = i < 9 ? 0.1 : -0.1;
  const auto r = paired_t_test(a, b);
  CHECK(r.df == 9);
  CHECK(r.mean_difference == doctest::Approx(0.08));
  CHECK(std::abs(r.p - oracle::student_t_two_sided(r.t, 9)) < 1e-3);
  const auto s = paired_t_test(b, a);
  CHECK(s.t == doctest::Approx(-r.t));
  CHECK(s.p == doctest::Approx(r.p));

  const auto d = paired_t_test({1, 2, 3}, {1, 2, 3});
  CHECK(d.degenerate);
  CHECK(d.p == 1.0);
  CHECK_THROWS_KIND(paired_t_test({1}, {2}), ErrorKind::contract);
}

TEST_CASE("geometry of identical and orthogonal modalities") {
  Rng rng(4);
  Matrix a(20, 6);
  for (auto& x : a.reshaped()) x = rng.normal();
  a.rowwise().normalize();
  const auto same = geometry_stats(matrix(a, embedstore::Modality::text), matrix(a, embedstore::Modality::image));
  CHECK(same.modality_gap < 1e-12);
  CHECK(same.anisotropy_a == doctest::Approx(same.anisotropy_b));
  CHECK(same.projection.rows() == 40);

  const Matrix eye = Matrix::Identity(6, 6);
  CHECK(std::abs(anisotropy(eye, 0)) < 1e-12);
}

TEST_CASE("isotropic samples have near-zero anisotropy") {
  Rng rng(5);
  Matrix a(400, 32);
  for (auto& x : a.reshaped()) x = rng.normal();
  CHECK(std::abs(anisotropy(a, 1)) < 0.05);
  Matrix shifted = a.array() + 3.0;
  CHECK(anisotropy(shifted, 1) > 0.5);
}

TEST_CASE("pca projection is centred and sign-normalized") {
  Rng rng(6);
  Matrix a(50, 5);
  for (auto& x : a.reshaped()) x = rng.normal();
  a.col(0) *= 5.0;
  const Matrix p = pca_2d(a);
  CHECK(p.rows() == 50);
  CHECK(p.cols() == 2);
  CHECK(std::abs(p.col(0).mean()) < 1e-10);
  CHECK(std::abs(p.col(1).mean()) < 1e-10);
  CHECK(p.col(0).squaredNorm() >= p.col(1).squaredNorm());
  const Matrix q = pca_2d(-a);
  CHECK((q + p).norm() < 1e-8);
}

TEST_CASE("geometry requires shared items") {
  Matrix a = Matrix::Identity(3, 3);
  auto x = matrix(a, embedstore::Modality::text);
  auto y = matrix(a, embedstore::Modality::image);
  for (auto& id : y.item_ids) id += "_other";
  CHECK_THROWS_KIND(geometry_stats(x, y), ErrorKind::data);
}
