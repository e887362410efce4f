#include <doctest.h>

#include "semid/common.hpp"
#include "semid/optim.hpp"
#include "support.hpp"

#include <cmath>
#include <set>

using namespace semid;

TEST_CASE("rng streams are reproducible and seed-dependent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng d(42), e(43);
  CHECK(d.next_u64() != e.next_u64());
}

TEST_CASE("rng uniform and below stay in range") {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.below(7) < 7u);
  }
}

TEST_CASE("rng normal has unit moments") {
  Rng r(9);
  const int n = 200000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    ss += x * x;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(ss / n - 1.0) < 0.02);
}

TEST_CASE("shuffle is a permutation") {
  Rng r(3);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(v);
  CHECK(std::set<int>(v.begin(), v.end()).size() == 50);
}

TEST_CASE("derive_seed separates labels") {
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
}

TEST_CASE("sha256 known vector") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("file round trip and missing file") {
  testing::TempDir dir;
  write_file(dir / "a/b/c.bin", std::string("x\0y", 3));
  CHECK(read_file(dir / "a/b/c.bin") == std::string("x\0y", 3));
  CHECK(sha256_file(dir / "a/b/c.bin") == sha256_hex(std::string("x\0y", 3)));
  CHECK_THROWS_KIND(read_file(dir / "missing"), ErrorKind::io);
}

TEST_CASE("format_fixed") {
  CHECK(format_fixed(0.123456789, 4) == "0.1235");
  CHECK(format_fixed(-0.00001, 3) == "0.000");
  CHECK(format_fixed(2.0, 0) == "2");
}

TEST_CASE("adam minimizes a quadratic and clips") {
  std::vector<double> p{3.0, -2.0}, g(2);
  AdamConfig cfg;
  cfg.learning_rate = 0.05;
  Adam adam(2, cfg);
  for (int i = 0; i < 2000; ++i) {
    g[0] = 2 * p[0];
    g[1] = 2 * p[1];
    adam.step(p, g);
  }
  CHECK(std::abs(p[0]) < 1e-3);
  CHECK(std::abs(p[1]) < 1e-3);
  CHECK(adam.steps_taken() == 2000);

  std::vector<double> q{1.0}, big{100.0};
  Adam clipped(1, AdamConfig{});
  CHECK(clipped.step(q, big) == doctest::Approx(100.0));
}

TEST_CASE("adam with zero learning rate leaves parameters untouched") {
  std::vector<double> p{1.5, -0.5}, g{0.3, 0.7};
  AdamConfig cfg;
  cfg.learning_rate = 0.0;
  Adam adam(2, cfg);
  adam.step(p, g);
  CHECK(p[0] == 1.5);
  CHECK(p[1] == -0.5);
}
