#include <doctest.h>

#include "semid/pipeline.hpp"
#include "support.hpp"

#include <fstream>
#include <sstream>

using namespace semid;
using namespace semid::pipeline;
using nlohmann::json;

namespace {

ExperimentConfig smoke(const fs::path& out) {
  return ExperimentConfig::load(fs::path(SEMID_SOURCE_DIR) / "configs" / "smoke.json").with({{"out", out.string()}});
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("defaults parse and round trip") {
  const auto c = ExperimentConfig::parse(json::object());
  CHECK(c.layout == fusion::Layout::unimodal);
  CHECK(ExperimentConfig::parse(c.resolved).digest() == c.digest());
  CHECK(c.with({{"out", "elsewhere"}}).digest() == c.digest());
  CHECK(c.with({{"history", 20}}).digest() != c.digest());
}

TEST_CASE("config errors") {
  CHECK_THROWS_KIND(ExperimentConfig::parse({{"bogus", 1}}), ErrorKind::config);
  CHECK_THROWS_KIND(ExperimentConfig::parse({{"rvq", {{"levels", "three"}}}}), ErrorKind::config);
  const json one_modality{{"modalities", {{"text", {{"source", "synthetic"}}}}},
                          {"fusion", {{"strategy", "early"}}}};
  const auto msg = testing::thrown_message([&] { ExperimentConfig::parse(one_modality); });
  CHECK(msg.find("requires two modalities") != std::string::npos);
  CHECK_THROWS_KIND(ExperimentConfig::parse({{"fusion", {{"strategy", "lateA"}, {"visual", "image"}}},
                                              {"alignment", {{"enabled", true}}}}),
                    ErrorKind::config);
  CHECK_THROWS_KIND(ExperimentConfig::parse({{"fusion", {{"strategy", "lateZ"}}}}), ErrorKind::config);
  CHECK_THROWS_KIND(ExperimentConfig::parse({{"history", 500}}), ErrorKind::config);
  CHECK_THROWS_KIND(ExperimentConfig::load("/nonexistent/config.json"), ErrorKind::config);
  CHECK_THROWS_KIND(parse_stage("deploy"), ErrorKind::config);
}

TEST_CASE("smoke run writes every stage and is reproducible") {
  testing::TempDir dir;
  const auto cfg = smoke(dir / "a");
  Experiment exp(cfg);
  exp.run_until(Stage::eval);
  const auto out = dir / "a";
  for (const char* p : {"config.resolved.json", "manifest.json", "ingest/interactions.tsv", "ingest/splits.json",
                        "tokenize/image/semantic_ids.json", "fuse/vocabulary.json", "fuse/alignment_pairs.json",
                        "train/seed0/loss.csv", "train/seed1/alignment_loss.csv", "eval/report.json",
                        "eval/per_user.csv"})
    CHECK_MESSAGE(fs::exists(out / p), p);
  CHECK_FALSE(fs::exists(out / "INVALID"));
  CHECK_FALSE(fs::exists(out / ".lock"));
  const auto manifest = json::parse(slurp(out / "manifest.json"));
  CHECK(manifest.at("config_digest") == cfg.digest());

  const auto& rep = exp.report();
  CHECK(rep.seeds.size() == 2);
  CHECK(rep.variant == "lateC+align:image+text");

  const auto second = run_experiment(smoke(dir / "b"));
  CHECK(second.to_json() == rep.to_json());
  CHECK(slurp(out / "eval" / "report.json") == slurp(dir / "b" / "eval" / "report.json"));

  const auto geo = exp.geometry();
  CHECK(geo.item_ids.size() == 64);
  CHECK(fs::exists(out / "geometry" / "geometry.json"));
}

TEST_CASE("a held lock is a config error") {
  testing::TempDir dir;
  fs::create_directories(dir / "run");
  std::ofstream(dir / "run" / ".lock") << "1";
  Experiment exp(smoke(dir / "run"));
  CHECK_THROWS_KIND(exp.run_until(Stage::ingest), ErrorKind::config);
}

TEST_CASE("report formats agree") {
  metrics::EvalReport rep;
  rep.variant = "lateA";
  rep.cutoffs = {5, 10};
  rep.users = {"u"};
  for (std::uint64_t s : {0u, 1u}) {
    metrics::SeedResult r;
    r.seed = s;
    r.recall = {{5, 0.25 + 0.5 * static_cast<double>(s)}, {10, 0.75}};
    r.ndcg = {{5, 0.125}, {10, 0.5}};
    rep.seeds.push_back(r);
  }
  const auto csv = emit_report(rep, "csv");
  CHECK(csv.find("variant,seed,recall@5,recall@10,ndcg@5,ndcg@10") == 0);
  CHECK(csv.find("lateA,mean,0.500000,0.750000,0.125000,0.500000") != std::string::npos);
  const auto table = emit_report(rep, "table");
  CHECK(table.find("0.5000 ± 0.3536") != std::string::npos);
  CHECK(json::parse(emit_report(rep, "json")) == rep.to_json());
  CHECK_THROWS_KIND(emit_report(rep, "xml"), ErrorKind::config);
}

TEST_CASE("harness relative change") {
  HarnessRow high, low;
  for (auto* row : {&high, &low}) {
    row->report.cutoffs = {10};
    metrics::SeedResult r;
    r.recall = {{10, row == &high ? 0.4 : 0.3}};
    r.ndcg = {{10, 0.2}};
    row->report.seeds.push_back(r);
  }
  high.resolution = 1024;
  low.resolution = 256;
  const auto change = relative_change(high, low, {10});
  CHECK(change.at("recall@10") == doctest::Approx(-25.0));
  CHECK(change.at("ndcg@10") == doctest::Approx(0.0));

  HarnessResult single{"lateA", {10}, {high}};
  CHECK(emit_harness(single, "csv").find("Rel. Change") == std::string::npos);
  HarnessResult both{"lateA", {10}, {high, low}};
  CHECK(emit_harness(both, "csv").find("Rel. Change (%)") != std::string::npos);
}
