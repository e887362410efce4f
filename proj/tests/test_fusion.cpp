#include <doctest.h>

#include "semid/fusion.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <set>

using namespace semid;
using namespace semid::fusion;
using rvq::SemanticId;

namespace {

Vector random_unit(Eigen::Index d, Rng& rng) {
  Vector v(d);
  for (auto& x : v) x = rng.normal();
  return v.normalized();
}

SemanticId random_id(int levels, int k, int max_dedup, Rng& rng) {
  SemanticId id;
  for (int l = 0; l < levels; ++l) id.codes.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(k))));
  id.dedup = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_dedup)));
  return id;
}

Vocabulary two_slot_vocab(int levels = 3, int k = 8, int dedup = 4) {
  return Vocabulary(levels, k, {{Slot::image, dedup}, {Slot::text, dedup}});
}

}  // namespace

TEST_CASE("zero gate gives alpha one half") {
  Rng rng(1);
  const auto gate = GateNetwork::zeros(6);
  const Vector t = random_unit(6, rng), i = random_unit(6, rng);
  const Vector a = gate.alpha(t, i);
  for (double x : a) CHECK(x == 0.5);
  CHECK((early_fuse(t, i, gate) - (0.5 * (t + i)).normalized()).norm() < 1e-12);
}

TEST_CASE("equal inputs fuse to themselves") {
  Rng rng(2);
  const auto gate = GateNetwork::random(5, 3);
  const Vector t = random_unit(5, rng);
  CHECK((early_fuse(t, t, gate) - t).norm() < 1e-12);
}

TEST_CASE("opposite inputs with a zero gate are degenerate") {
  Rng rng(3);
  const Vector t = random_unit(4, rng);
  const Vector neg = -t;
  const auto msg = testing::thrown_message([&] { early_fuse(t, neg, GateNetwork::zeros(4)); });
  CHECK(msg.find("degenerate fusion") != std::string::npos);
}

TEST_CASE("gate output is strictly inside (0, 1) and fusion is unit norm") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto gate = GateNetwork::random(8, static_cast<std::uint64_t>(trial));
    const Vector t = random_unit(8, rng), i = random_unit(8, rng);
    const Vector a = gate.alpha(t, i);
    CHECK(a.minCoeff() > 0.0);
    CHECK(a.maxCoeff() < 1.0);
    CHECK(std::abs(early_fuse(t, i, gate).norm() - 1.0) < 1e-6);
  }
}

TEST_CASE("gate parameter gradient matches finite differences") {
  Rng rng(5);
  const Eigen::Index d = 4, n = 3;
  Matrix et(n, d), ei(n, d), g(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    et.row(r) = random_unit(d, rng).transpose();
    ei.row(r) = random_unit(d, rng).transpose();
    for (Eigen::Index c = 0; c < d; ++c) g(r, c) = rng.normal();
  }
  auto gate = GateNetwork::random(d, 11);
  std::vector<double> flat(gate.parameter_count()), grad(gate.parameter_count(), 0.0);
  gate.to_flat(flat);
  const auto fwd = gate_forward(gate, et, ei);
  gate_backward(gate, et, ei, fwd, g, grad);

  auto loss = [&] {
    GateNetwork probe = gate;
    probe.from_flat(flat);
    return gate_forward(probe, et, ei).fused.cwiseProduct(g).sum();
  };
  for (std::size_t p = 0; p < flat.size(); ++p) {
    const double fd = oracle::central_difference(loss, flat[p]);
    CHECK(oracle::relative_error(fd, grad[p]) < 1e-4);
  }
}

TEST_CASE("joint gate and rqvae training runs and keeps the loss finite") {
  Rng rng(6);
  const Eigen::Index n = 64, d = 6;
  Matrix et(n, d), ei(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    et.row(r) = random_unit(d, rng).transpose();
    ei.row(r) = random_unit(d, rng).transpose();
  }
  rvq::FitConfig fc;
  fc.levels = 2;
  fc.codebook_size = 4;
  fc.mode = rvq::Mode::rqvae;
  fc.rqvae.hidden = 8;
  fc.rqvae.steps = 40;
  fc.rqvae.batch = 16;
  const auto fit = fit_early_fusion(et, ei, fc);
  CHECK(fit.loss_curve.size() == 40);
  for (double l : fit.loss_curve) CHECK(std::isfinite(l));
  for (Eigen::Index r = 0; r < n; ++r) CHECK(std::abs(fit.fused.row(r).norm() - 1.0) < 1e-6);
}

TEST_CASE("concatenation layout") {
  const auto v = two_slot_vocab();
  const SemanticId img{{1, 2, 3}, 0}, txt{{4, 5, 6}, 1};
  const auto s = concat_ids(img, txt, v);
  CHECK(s.layout == Layout::lateA);
  CHECK(s.size() == 8);
  const std::vector<int> want{v.code_token(Slot::image, 0, 1), v.code_token(Slot::image, 1, 2),
                              v.code_token(Slot::image, 2, 3), v.dedup_token(Slot::image, 0),
                              v.code_token(Slot::text, 0, 4),  v.code_token(Slot::text, 1, 5),
                              v.code_token(Slot::text, 2, 6),  v.dedup_token(Slot::text, 1)};
  CHECK(s.tokens == want);
  for (std::size_t i = 0; i < 8; ++i) CHECK(s.provenance[i].slot == (i < 4 ? Slot::image : Slot::text));
  CHECK_THROWS_KIND(concat_ids(SemanticId{{1, 2}, 0}, txt, v), ErrorKind::contract);
}

TEST_CASE("interleaving layout and inverse") {
  const Vocabulary v(2, 4, {{Slot::image, 1}, {Slot::text, 1}});
  const SemanticId a{{1, 2}, 0}, b{{3, 0}, 0};
  const auto s = interleave_ids(a, b, v);
  CHECK(s.tokens[0] == v.code_token(Slot::image, 0, 1));
  CHECK(s.tokens[1] == v.code_token(Slot::text, 0, 3));
  CHECK(s.tokens[2] == v.code_token(Slot::image, 1, 2));
  CHECK(s.tokens[3] == v.code_token(Slot::text, 1, 0));
  const auto [ra, rb] = deinterleave(s, v);
  CHECK(ra == a);
  CHECK(rb == b);

  auto multiset = [](std::vector<int> t) {
    std::sort(t.begin(), t.end());
    return t;
  };
  CHECK(multiset(s.tokens) == multiset(concat_ids(a, b, v).tokens));

  TokenSequence odd = s;
  odd.tokens.pop_back();
  odd.provenance.pop_back();
  CHECK_THROWS_KIND(deinterleave(odd, v), ErrorKind::contract);
}

TEST_CASE("modality-aware wrapping") {
  const auto v = two_slot_vocab();
  const SemanticId img{{0, 1, 2}, 0}, txt{{3, 4, 5}, 2};
  const auto s = wrap_modality_aware(img, txt, v);
  CHECK(s.size() == 11);
  CHECK(s.size() == layout_length(Layout::lateC, 3));
  CHECK(s.tokens[0] == IMG);
  CHECK(s.tokens[3 + 2] == SEP);
  CHECK(s.tokens[6] == TXT);
  const auto [ri, rt] = split_modalities(s, v);
  CHECK(ri == img);
  CHECK(rt == txt);
}

TEST_CASE("interleave round trip on random pairs") {
  const auto v = two_slot_vocab(3, 16, 5);
  Rng rng(7);
  for (int t = 0; t < 2000; ++t) {
    const auto a = random_id(3, 16, 5, rng), b = random_id(3, 16, 5, rng);
    const auto [ra, rb] = deinterleave(interleave_ids(a, b, v), v);
    CHECK(ra == a);
    CHECK(rb == b);
  }
}

TEST_CASE("late layouts are injective on a brute-forced catalog") {
  const Vocabulary v(2, 3, {{Slot::image, 2}, {Slot::text, 2}});
  std::vector<std::pair<SemanticId, SemanticId>> all;
  for (int a = 0; a < 18; ++a)
    for (int b = 0; b < 18; b += 5)
      all.push_back({{{a / 6, (a / 2) % 3}, a % 2}, {{b / 6, (b / 2) % 3}, b % 2}});
  for (auto build : {concat_ids, interleave_ids, wrap_modality_aware}) {
    std::set<std::vector<int>> seen;
    for (const auto& [a, b] : all) CHECK(seen.insert(build(a, b, v, true).tokens).second);
  }
}

TEST_CASE("vocabulary ranges are disjoint and decode inverts encode") {
  const Vocabulary v(3, 8, {{Slot::image, 3}, {Slot::text, 2}, {Slot::fused, 1}});
  std::vector<std::pair<int, int>> ranges{{0, kSpecialCount}};
  for (Slot s : {Slot::image, Slot::text, Slot::fused}) ranges.push_back(v.range(s));
  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) CHECK(ranges[i].first >= ranges[i - 1].second);
  CHECK(ranges.back().second == v.size());
  for (Slot s : {Slot::image, Slot::text})
    for (int l = 0; l < 3; ++l)
      for (int c = 0; c < 8; ++c) {
        const auto d = v.decode(v.code_token(s, l, c));
        CHECK(d.slot == s);
        CHECK(d.level == l);
        CHECK(d.value == c);
      }
  CHECK(v.decode(v.dedup_token(Slot::image, 2)).level == 3);
  CHECK(Vocabulary::from_json(v.to_json()).size() == v.size());
  CHECK_THROWS_KIND(v.code_token(Slot::text, 0, 8), ErrorKind::contract);
}

TEST_CASE("alignment pairs") {
  const auto v = two_slot_vocab();
  std::map<std::string, SemanticId> img, txt;
  Rng rng(8);
  for (int i = 0; i < 5; ++i) {
    img["i" + std::to_string(i)] = random_id(3, 8, 4, rng);
    txt["i" + std::to_string(i)] = random_id(3, 8, 4, rng);
  }
  const auto pairs = make_alignment_pairs(img, txt, v);
  CHECK(pairs.size() == 10);
  for (const auto& p : pairs) {
    CHECK((p.source.tokens.front() == IMG || p.source.tokens.front() == TXT));
    CHECK((p.target.tokens.front() == IMG || p.target.tokens.front() == TXT));
    CHECK(p.source.tokens.front() != p.target.tokens.front());
  }
  for (const auto& p : pairs) {
    const auto reverse = std::find_if(pairs.begin(), pairs.end(), [&](const AlignmentPair& q) {
      return q.item_id == p.item_id && q.source == p.target && q.target == p.source;
    });
    CHECK(reverse != pairs.end());
  }

  txt.erase("i3");
  const auto msg = testing::thrown_message([&] { make_alignment_pairs(img, txt, v); });
  CHECK(msg.find("coverage") != std::string::npos);
  CHECK(msg.find("i3") != std::string::npos);
}
