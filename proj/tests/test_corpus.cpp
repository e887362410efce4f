#include <doctest.h>

#include "semid/corpus.hpp"
#include "support.hpp"

#include <sstream>

using namespace semid;
using namespace semid::corpus;

namespace {

InteractionLog parse(const std::string& tsv, const Catalog& catalog) {
  std::istringstream in(tsv);
  return parse_interactions(in, catalog, "fixture.tsv");
}

const Catalog kItems{"a", "b", "c", "d", "e", "f"};

}  // namespace

TEST_CASE("three users with four records each") {
  std::string tsv;
  for (const char* u : {"u1", "u2", "u3"})
    for (int t = 0; t < 4; ++t) tsv += std::string(u) + "\t" + std::string(1, static_cast<char>('a' + t)) + "\t" + std::to_string(10 + t) + "\n";
  const auto log = parse(tsv, kItems);
  CHECK(log.users.size() == 3);
  CHECK(log.record_count() == 12);
}

TEST_CASE("records are sorted by timestamp with stable ties") {
  const auto log = parse("u1\tc\t30\nu1\ta\t10\nu1\tb\t20\nu1\td\t20\n", kItems);
  REQUIRE(log.users.size() == 1);
  CHECK(log.users[0].items == std::vector<std::string>{"a", "b", "d", "c"});
}

TEST_CASE("users below three interactions are dropped") {
  const auto log = parse("u1\ta\t1\nu1\tb\t2\nu2\ta\t1\nu2\tb\t2\nu2\tc\t3\n", kItems);
  REQUIRE(log.users.size() == 1);
  CHECK(log.users[0].user_id == "u2");
}

TEST_CASE("malformed lines report the line number") {
  const auto msg = testing::thrown_message([&] { parse("u1\ta\t1\nu1\tb\n", kItems); });
  CHECK(msg.find("fixture.tsv:2") != std::string::npos);
  CHECK_THROWS_KIND(parse("u1\ta\tnotanumber\n", kItems), ErrorKind::data);
}

TEST_CASE("unknown items are a referential-integrity error") {
  const auto msg = testing::thrown_message([&] { parse("u1\ta\t1\nu1\tzzz\t2\n", kItems); });
  CHECK(msg.find("referential-integrity") != std::string::npos);
}

TEST_CASE("leave-one-out split") {
  InteractionLog log;
  log.users.push_back({"u", {"i1", "i2", "i3"}, {1, 2, 3}});
  log.users.push_back({"v", {"a", "b", "c", "d", "e"}, {1, 2, 3, 4, 5}});
  const auto split = build_splits(log);
  REQUIRE(split.users.size() == 2);
  CHECK(split.users[0].train == std::vector<std::string>{"i1"});
  CHECK(split.users[0].valid == "i2");
  CHECK(split.users[0].test == "i3");
  CHECK(split.users[1].train == std::vector<std::string>{"a", "b", "c"});
  CHECK(split.users[1].valid == "d");
  CHECK(split.users[1].test == "e");
  CHECK(build_splits(InteractionLog{}).users.empty());
}

TEST_CASE("short users violate the split contract") {
  InteractionLog log;
  log.users.push_back({"u", {"a", "b"}, {1, 2}});
  CHECK_THROWS_KIND(build_splits(log), ErrorKind::contract);
}

TEST_CASE("sliding-window instances") {
  SplitSpec split;
  split.users.push_back({"u", {"a", "b", "c"}, "d", "e"});
  const auto inst = make_training_instances(split, 50);
  REQUIRE(inst.train.size() == 2);
  CHECK(inst.train[0].history == std::vector<std::string>{"a"});
  CHECK(inst.train[0].target == "b");
  CHECK(inst.train[1].history == std::vector<std::string>{"a", "b"});
  CHECK(inst.train[1].target == "c");
  REQUIRE(inst.valid.size() == 1);
  CHECK(inst.valid[0].history == std::vector<std::string>{"a", "b", "c"});
  CHECK(inst.valid[0].target == "d");
  REQUIRE(inst.test.size() == 1);
  CHECK(inst.test[0].history == std::vector<std::string>{"a", "b", "c", "d"});
  CHECK(inst.test[0].target == "e");
}

TEST_CASE("single-item prefix yields no training instance") {
  SplitSpec split;
  split.users.push_back({"u", {"a"}, "b", "c"});
  CHECK(make_training_instances(split, 50).train.empty());
}

TEST_CASE("window bound holds for long prefixes") {
  SplitSpec split;
  UserSplit u{"u", {}, "v", "t"};
  for (int i = 0; i < 60; ++i) u.train.push_back("x" + std::to_string(i));
  split.users.push_back(u);
  const auto inst = make_training_instances(split, 50);
  CHECK(inst.train.size() == 59);
  for (const auto& t : inst.train) {
    CHECK(t.history.size() >= 1);
    CHECK(t.history.size() <= 50);
  }
  CHECK(inst.test[0].history.size() == 50);
  CHECK(inst.test[0].history.back() == "v");
  CHECK_THROWS_KIND(make_training_instances(split, 0), ErrorKind::config);
}

TEST_CASE("synthetic corpus is deterministic and round-trips through TSV") {
  SyntheticCorpusSpec spec;
  spec.n_items = 40;
  spec.n_users = 30;
  spec.n_clusters = 4;
  spec.seed = 5;
  const auto a = synthesize_corpus(spec);
  const auto b = synthesize_corpus(spec);
  CHECK(to_tsv(a.log) == to_tsv(b.log));
  CHECK(a.item_ids.size() == 40);
  CHECK(a.descriptions.size() == 40);
  Catalog cat(a.item_ids.begin(), a.item_ids.end());
  const auto again = parse(to_tsv(a.log), cat);
  CHECK(to_tsv(again) == to_tsv(a.log));
  for (const auto& u : a.log.users) {
    CHECK(u.items.size() >= kMinInteractions);
    for (std::size_t i = 1; i < u.timestamps.size(); ++i) CHECK(u.timestamps[i] > u.timestamps[i - 1]);
  }
}

TEST_CASE("split totality on the synthetic corpus") {
  SyntheticCorpusSpec spec;
  spec.seed = 11;
  const auto c = synthesize_corpus(spec);
  const auto split = build_splits(c.log);
  for (std::size_t i = 0; i < split.users.size(); ++i)
    CHECK(split.users[i].train.size() + 2 == c.log.users[i].items.size());
}

TEST_CASE("catalog loading") {
  testing::TempDir dir;
  write_file(dir / "cat.json", R"(["x", "y"])");
  CHECK(load_catalog(dir / "cat.json") == Catalog{"x", "y"});
  write_file(dir / "bad.json", R"({"x": 1})");
  CHECK_THROWS_KIND(load_catalog(dir / "bad.json"), ErrorKind::data);
}
