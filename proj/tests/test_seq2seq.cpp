#include <doctest.h>

#include "semid/seq2seq.hpp"
#include "oracles.hpp"
#include "support.hpp"

#include <cmath>
#include <set>

using namespace semid;
using namespace semid::seq2seq;

namespace {

ModelConfig tiny(int vocab, std::uint64_t seed = 1) {
  ModelConfig c;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.width = 16;
  c.heads = 2;
  c.ff_width = 24;
  c.max_positions = 32;
  c.vocab_size = vocab;
  c.seed = seed;
  return c;
}

std::vector<std::pair<std::string, std::vector<int>>> toy_catalog(int items, int depth, int vocab, Rng& rng) {
  std::vector<std::pair<std::string, std::vector<int>>> cat;
  std::set<std::vector<int>> seen;
  while (static_cast<int>(cat.size()) < items) {
    std::vector<int> t;
    for (int d = 0; d < depth; ++d) t.push_back(6 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab - 6))));
    if (!seen.insert(t).second) continue;
    char name[16];
    std::snprintf(name, sizeof name, "it%02d", static_cast<int>(cat.size()));
    cat.emplace_back(name, t);
  }
  return cat;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny(20);
  c.heads = 3;
  CHECK_THROWS_KIND(Model{c}, ErrorKind::config);
  c = tiny(20);
  c.max_positions = 4;
  Model m(c);
  CHECK_THROWS_KIND(m.forward_logits({{7, 8, 9, 10, 11}, {7}}), ErrorKind::config);
}

TEST_CASE("deterministic initialization") {
  const std::vector<Example> batch{{{7, 8, 9}, {10, 11}}};
  Model a(tiny(20, 4)), b(tiny(20, 4)), c(tiny(20, 5));
  CHECK(a == b);
  CHECK(a.loss_and_grads(batch, nullptr) == b.loss_and_grads(batch, nullptr));
  CHECK(a.loss_and_grads(batch, nullptr) != c.loss_and_grads(batch, nullptr));
}

TEST_CASE("logit shape") {
  auto c = tiny(64);
  c.width = 32;
  Model m(c);
  const auto logits = m.forward_logits({{7, 8, 9, 10}, {11, 12, 13}});
  CHECK(logits.rows() == 4);
  CHECK(logits.cols() == 64);
}

TEST_CASE("uniform logits give ln V") {
  Model m(tiny(30));
  const auto& out = m.param("out");
  auto p = m.parameters();
  std::fill(p.begin() + static_cast<std::ptrdiff_t>(out.offset),
            p.begin() + static_cast<std::ptrdiff_t>(out.offset + static_cast<std::size_t>(out.rows * out.cols)), 0.0);
  const std::vector<Example> batch{{{7, 8}, {9, 10, 11}}, {{12}, {13}}};
  CHECK(std::abs(m.loss_and_grads(batch, nullptr) - std::log(30.0)) < 1e-6);
}

TEST_CASE("empty and all-PAD batches violate the contract") {
  Model m(tiny(20));
  CHECK_THROWS_KIND(m.loss_and_grads({}, nullptr), ErrorKind::contract);
  const std::vector<Example> pads{{{7, 8}, {kPad, kPad}}};
  CHECK_THROWS_KIND(m.loss_and_grads(pads, nullptr), ErrorKind::contract);
}

TEST_CASE("analytic gradient matches central differences") {
  Model m(tiny(24, 9));
  const std::vector<Example> batch{{{7, 8, 9, 10}, {11, 12, kPad}}, {{13, 14}, {15, 16, 17}}};
  std::vector<double> grad;
  m.loss_and_grads(batch, &grad);
  auto p = m.parameters();
  Rng rng(3);
  for (int t = 0; t < 60; ++t) {
    const auto idx = rng.below(p.size());
    const double fd = oracle::central_difference([&] { return m.loss_and_grads(batch, nullptr); }, p[idx]);
    CHECK(oracle::relative_error(fd, grad[idx]) < 1e-4);
  }
}

TEST_CASE("every parameter block receives gradient") {
  Model m(tiny(24, 2));
  const std::vector<Example> batch{{{7, 8, 9}, {10, 11}}};
  std::vector<double> grad;
  m.loss_and_grads(batch, &grad);
  for (const auto& info : m.parameter_table()) {
    double s = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(info.rows * info.cols); ++i) s += std::abs(grad[info.offset + i]);
    CHECK_MESSAGE(s > 0.0, info.name);
  }
}

TEST_CASE("training memorizes a small mapping") {
  Model m(tiny(24, 6));
  std::vector<Example> ex;
  for (int i = 0; i < 8; ++i) ex.push_back({{6 + i, 6 + (i + 3) % 8}, {14 + i, 6 + i}});
  TrainConfig tc;
  tc.learning_rate = 1e-2;
  tc.batch_size = 8;
  tc.steps = 500;
  const auto rep = train(m, ex, tc);
  REQUIRE(rep.loss_curve.size() == 500);
  CHECK(rep.loss_curve.back() < 0.1 * rep.loss_curve.front());
}

TEST_CASE("zero steps and zero learning rate leave the model unchanged") {
  const std::vector<Example> ex{{{7, 8}, {9}}, {{10}, {11, 12}}};
  Model m(tiny(20, 3));
  const Model before = m;
  TrainConfig tc;
  tc.steps = 0;
  tc.epochs = 0;
  train(m, ex, tc);
  CHECK(m == before);

  const double loss0 = m.loss_and_grads(ex, nullptr);
  tc.steps = 5;
  tc.learning_rate = 0.0;
  train(m, ex, tc);
  CHECK(std::abs(m.loss_and_grads(ex, nullptr) - loss0) <= 1e-12);
}

TEST_CASE("dropout changes the training loss only when enabled") {
  auto c = tiny(20, 3);
  c.dropout = 0.3;
  Model m(c);
  const std::vector<Example> ex{{{7, 8, 9}, {10, 11}}};
  Rng r1(1);
  CHECK(m.loss_and_grads(ex, nullptr) == m.loss_and_grads(ex, nullptr));
  CHECK(m.loss_and_grads(ex, nullptr, &r1) != m.loss_and_grads(ex, nullptr));
}

TEST_CASE("checkpoint round trip is exact") {
  testing::TempDir dir;
  Model m(tiny(20, 8));
  m.save(dir.path());
  const auto r = Model::load(dir.path());
  CHECK(r == m);
  CHECK(r.config().to_json() == m.config().to_json());
}

TEST_CASE("trie construction and membership") {
  const auto trie = ItemTrie::build({{"a", {6, 7}}, {"b", {8, 7}}, {"c", {9, 6}}});
  CHECK(trie.root().children.size() == 3);
  CHECK(trie.leaf_count() == 3);
  CHECK(trie.contains(std::vector<int>{8, 7}));
  CHECK_FALSE(trie.contains(std::vector<int>{8, 6}));
  CHECK_FALSE(trie.contains(std::vector<int>{8}));
  CHECK_THROWS_KIND(ItemTrie::build({{"a", {6, 7}}, {"b", {6, 7}}}), ErrorKind::data);
  CHECK_THROWS_KIND(ItemTrie::build({{"a", {6, 7}}, {"b", {6}}}), ErrorKind::data);
}

TEST_CASE("beam over the whole catalog equals exhaustive scoring") {
  Rng rng(12);
  for (std::uint64_t s = 0; s < 3; ++s) {
    Model m(tiny(20, 30 + s));
    const auto cat = toy_catalog(24, 3, 20, rng);
    const auto trie = ItemTrie::build(cat);
    const std::vector<int> context{7, 9, 11, 13};
    const auto beam = beam_decode(m, context, {32, 20}, trie);
    const auto want = oracle::exhaustive_ranking(m, context, cat);
    REQUIRE(beam.size() == want.size());
    for (std::size_t i = 0; i < beam.size(); ++i) {
      CHECK(beam[i].item_id == want[i].first);
      CHECK(std::abs(beam[i].log_prob - want[i].second) < 1e-9);
    }
  }
}

TEST_CASE("beam of one is constrained greedy") {
  Rng rng(13);
  Model m(tiny(20, 41));
  const auto cat = toy_catalog(16, 3, 20, rng);
  const auto trie = ItemTrie::build(cat);
  const std::vector<int> context{8, 10};
  const auto got = beam_decode(m, context, {1, 20}, trie);
  REQUIRE(got.size() == 1);
  const Matrix memory = m.encode(context);
  int node = 0;
  std::vector<int> prefix;
  while (trie.node(node).item < 0) {
    const Vector lp = m.next_log_probs(memory, prefix);
    int best_tok = -1, best_child = -1;
    for (const auto& [tok, child] : trie.node(node).children)
      if (best_tok < 0 || lp(tok) > lp(best_tok)) {
        best_tok = tok;
        best_child = child;
      }
    prefix.push_back(best_tok);
    node = best_child;
  }
  CHECK(got[0].tokens == prefix);
}

TEST_CASE("beam results are valid items and wider beams are never worse") {
  Rng rng(14);
  Model m(tiny(20, 50));
  const auto cat = toy_catalog(30, 3, 20, rng);
  const auto trie = ItemTrie::build(cat);
  const std::vector<int> context{12, 6};
  double prev = -1e300;
  for (int b : {1, 2, 4, 8, 16}) {
    const auto got = beam_decode(m, context, {b, 20}, trie);
    CHECK(static_cast<int>(got.size()) <= b);
    for (const auto& h : got) CHECK(trie.contains(h.tokens));
    CHECK(got[0].log_prob >= prev - 1e-12);
    prev = got[0].log_prob;
  }
}

TEST_CASE("beam exclusions and contract errors") {
  Rng rng(15);
  Model m(tiny(20, 51));
  const auto cat = toy_catalog(10, 2, 20, rng);
  const auto trie = ItemTrie::build(cat);
  const std::set<std::string> exclude{cat[0].first, cat[1].first};
  for (const auto& h : beam_decode(m, std::vector<int>{7}, {20, 20}, trie, &exclude)) CHECK(!exclude.contains(h.item_id));
  CHECK_THROWS_KIND(beam_decode(m, std::vector<int>{7}, {5, 1}, trie), ErrorKind::contract);
  CHECK_THROWS_KIND(beam_decode(m, std::vector<int>{7}, {5, 20}, ItemTrie::build({})), ErrorKind::contract);
}

TEST_CASE("loss curve csv") {
  CHECK(loss_curve_csv({1.5, 0.25}) == "step,loss\n0,1.500000\n1,0.250000\n");
}
