#include "semid/pipeline.hpp"

#include "semid/error.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace semid::pipeline {

using nlohmann::json;
using embedstore::EmbeddingMatrix;
using fusion::Slot;

struct Experiment::State {
  int completed = -1;  // index of the last finished stage

  // ingest
  std::vector<std::string> catalog;  // ordered item ids
  std::vector<int> labels;           // synthetic cluster label per catalog item
  std::map<std::string, std::string> descriptions;
  corpus::InteractionLog log;
  corpus::SplitSpec split;
  corpus::InstanceSet instances;

  // render
  std::map<Modality, EmbeddingMatrix> raw;
  std::map<Modality, EmbeddingMatrix> projected;

  // tokenize
  std::map<Slot, std::map<std::string, rvq::SemanticId>> ids;
  std::map<Slot, rvq::RvqModel> quantizers;
  std::optional<fusion::GateNetwork> gate;

  // fuse
  fusion::Vocabulary vocab;
  std::map<std::string, std::vector<int>> item_tokens;
  std::optional<seq2seq::ItemTrie> trie;
  std::vector<fusion::AlignmentPair> pairs;

  // train / eval
  std::map<std::uint64_t, seq2seq::Model> models;
  std::optional<metrics::EvalReport> report;

  json manifest = {{"stages", json::object()}};
};

namespace {

/// Exclusive lock on an output directory for the lifetime of the object.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    require(f != nullptr, ErrorKind::config,
            "output directory " + dir.string() + " is locked by another run (remove " + path_.string() +
                " if it is stale)");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

json digest_tree(const fs::path& root) {
  json files = json::object();
  if (!fs::exists(root)) return files;
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) files[fs::relative(p, root).generic_string()] = sha256_file(p);
  return files;
}

json ids_to_json(const std::map<std::string, rvq::SemanticId>& ids) {
  json j = json::object();
  for (const auto& [item, id] : ids) {
    json codes = id.codes;
    codes.push_back(id.dedup);
    j[item] = codes;
  }
  return j;
}

std::vector<int> history_tokens(const std::vector<std::string>& history,
                                const std::map<std::string, std::vector<int>>& item_tokens) {
  std::vector<int> out;
  for (const auto& item : history) {
    const auto& t = item_tokens.at(item);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

EmbeddingMatrix reorder_to_catalog(const EmbeddingMatrix& m, const std::vector<std::string>& catalog) {
  const auto index = m.index();
  std::vector<std::string> missing;
  EmbeddingMatrix out;
  out.modality = m.modality;
  out.encoder = m.encoder;
  out.extra = m.extra;
  out.item_ids = catalog;
  out.rows.resize(static_cast<Eigen::Index>(catalog.size()), m.dim());
  for (std::size_t i = 0; i < catalog.size(); ++i) {
    const auto it = index.find(catalog[i]);
    if (it == index.end()) {
      missing.push_back(catalog[i]);
      continue;
    }
    out.rows.row(static_cast<Eigen::Index>(i)) = m.rows.row(it->second);
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) list += (i ? ", " : "") + missing[i];
    fail(ErrorKind::data, "coverage error: " + std::to_string(missing.size()) + " catalog item(s) have no " +
                              embedstore::to_string(m.modality) + " embedding (" + list + ")");
  }
  return out;
}

}  // namespace

Experiment::Experiment(ExperimentConfig config) : config_(std::move(config)), state_(std::make_unique<State>()) {}
Experiment::~Experiment() = default;

const metrics::EvalReport& Experiment::report() const {
  expects(state_->report.has_value(), "evaluation has not run");
  return *state_->report;
}

namespace {

void stage_ingest(const ExperimentConfig& c, Experiment::State& s, const fs::path& dir) {
  if (c.synthetic) {
    auto synth = corpus::synthesize_corpus(c.corpus);
    s.catalog = synth.item_ids;
    s.labels = synth.item_labels;
    for (std::size_t i = 0; i < synth.item_ids.size(); ++i) s.descriptions[synth.item_ids[i]] = synth.descriptions[i];
    s.log = std::move(synth.log);
  } else {
    const auto catalog = corpus::load_catalog(c.catalog);
    s.catalog.assign(catalog.begin(), catalog.end());
    s.log = corpus::load_interactions(c.interactions, catalog);
    if (!c.descriptions.empty()) {
      std::ifstream in(c.descriptions);
      require(in.good(), ErrorKind::data, "cannot open descriptions file " + c.descriptions.string());
      std::string line;
      int line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
          const auto j = json::parse(line);
          s.descriptions[j.at("item_id").get<std::string>()] = j.at("description").get<std::string>();
        } catch (const json::exception&) {
          fail(ErrorKind::data, "parse error at " + c.descriptions.string() + ":" + std::to_string(line_no));
        }
      }
    }
  }
  require(!s.log.users.empty(), ErrorKind::data, "no user has at least three interactions");
  s.split = corpus::build_splits(s.log);
  s.instances = corpus::make_training_instances(s.split, c.history);

  write_file(dir / "interactions.tsv", corpus::to_tsv(s.log));
  write_file(dir / "catalog.json", json(s.catalog).dump() + "\n");
  if (!s.descriptions.empty()) {
    std::string lines;
    for (const auto& [item, text] : s.descriptions) lines += json{{"item_id", item}, {"description", text}}.dump() + "\n";
    write_file(dir / "descriptions.jsonl", lines);
  }
  json splits = json::array();
  for (const auto& u : s.split.users)
    splits.push_back({{"user", u.user_id}, {"train", u.train}, {"valid", u.valid}, {"test", u.test}});
  write_file(dir / "splits.json", splits.dump() + "\n");
  auto dump_instances = [](const std::vector<corpus::TrainingInstance>& v) {
    json a = json::array();
    for (const auto& t : v) a.push_back({{"user", t.user_id}, {"history", t.history}, {"target", t.target}});
    return a;
  };
  write_file(dir / "instances.json", json{{"train", dump_instances(s.instances.train)},
                                          {"valid", dump_instances(s.instances.valid)},
                                          {"test", dump_instances(s.instances.test)}}
                                         .dump() +
                                         "\n");
}

EmbeddingMatrix render_modality(const ModalitySource& src, const Experiment::State& s, const fs::path& png_dir) {
  EmbeddingMatrix m;
  m.modality = Modality::ocr_text;
  m.encoder = "renderkit-reference";
  m.item_ids = s.catalog;
  m.rows.resize(static_cast<Eigen::Index>(s.catalog.size()), src.encode_dim);
  m.extra = {{"resolution", src.resolution}, {"canvas", src.render.canvas}, {"backbone", "renderkit-reference"}};
  for (std::size_t i = 0; i < s.catalog.size(); ++i) {
    const auto it = s.descriptions.find(s.catalog[i]);
    require(it != s.descriptions.end(), ErrorKind::data,
            "item '" + s.catalog[i] + "' has no description to render");
    auto img = renderkit::render_text(it->second, src.render);
    if (src.resolution != img.width) img = renderkit::downsample(img, src.resolution);
    if (i < 4) renderkit::write_png(img, png_dir / (s.catalog[i] + ".png"));
    const auto v = renderkit::reference_visual_encode(img, src.encode_dim, src.encode_seed);
    m.rows.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  return m;
}

void stage_render(const ExperimentConfig& c, Experiment::State& s, const fs::path& dir) {
  std::optional<embedstore::SyntheticEmbeddings> synth;
  for (const auto& [modality, src] : c.modalities) {
    const bool used = std::ranges::count(c.used_modalities(), modality) > 0 || modality == c.visual ||
                      modality == c.textual;
    if (!used && src.kind != ModalitySource::Kind::synthetic) continue;
    EmbeddingMatrix m;
    switch (src.kind) {
      case ModalitySource::Kind::synthetic: {
        if (!synth) {
          std::vector<int> labels = s.labels;
          if (c.shuffle_labels) {
            Rng rng(derive_seed(c.corpus.seed, "shuffle_labels"));
            rng.shuffle(labels);
          }
          synth = embedstore::synthesize_embeddings(c.embeddings, &labels);
        }
        m = modality == Modality::text ? synth->first : synth->second;
        break;
      }
      case ModalitySource::Kind::embeddings:
        m = reorder_to_catalog(embedstore::read_matrix(src.path), s.catalog);
        m.modality = modality;
        break;
      case ModalitySource::Kind::render:
        require(modality == Modality::ocr_text, ErrorKind::config, "only ocr_text can be rendered");
        m = render_modality(src, s, dir / "png");
        break;
    }
    const auto name = embedstore::to_string(modality);
    embedstore::write_matrix(m, dir / "raw" / name);
    const auto proj = embedstore::default_projection(modality, m.dim(), c.projection_dim, c.projection_seed);
    auto p = embedstore::project_all(m, proj);
    embedstore::write_matrix(p, dir / "projected" / name);
    s.raw[modality] = std::move(m);
    s.projected[modality] = std::move(p);
  }
}

std::map<std::string, rvq::SemanticId> quantize(const rvq::RvqModel& model, const Matrix& rows,
                                                const std::vector<std::string>& items) {
  std::map<std::string, rvq::SemanticId> ids;
  for (std::size_t i = 0; i < items.size(); ++i) ids[items[i]] = model.encode(rows.row(static_cast<Eigen::Index>(i)).transpose());
  return rvq::resolve_collisions(ids);
}

void stage_tokenize(const ExperimentConfig& c, Experiment::State& s, const fs::path& dir) {
  auto fit_slot = [&](Slot slot, const Matrix& rows) {
    rvq::FitConfig fc = c.rvq;
    fc.seed = derive_seed(c.rvq.seed, "tokenize/" + fusion::to_string(slot));
    auto model = rvq::fit(rows, fc);
    s.ids[slot] = quantize(model, rows, s.catalog);
    s.quantizers.emplace(slot, std::move(model));
  };

  if (c.layout == fusion::Layout::unimodal) {
    fit_slot(slot_for(c.unimodal), s.projected.at(c.unimodal).rows);
  } else if (c.layout == fusion::Layout::early) {
    const Matrix& e_text = s.projected.at(c.textual).rows;
    const Matrix& e_image = s.projected.at(c.visual).rows;
    if (c.rvq.mode == rvq::Mode::rqvae) {
      rvq::FitConfig fc = c.rvq;
      fc.seed = derive_seed(c.rvq.seed, "tokenize/fused");
      auto fit = fusion::fit_early_fusion(e_text, e_image, fc);
      s.gate = fit.gate;
      s.ids[Slot::fused] = quantize(fit.quantizer, fit.fused, s.catalog);
      write_file(dir / "gate_loss.csv", seq2seq::loss_curve_csv(fit.loss_curve));
      std::vector<double> flat(fit.gate.parameter_count());
      fit.gate.to_flat(flat);
      write_file(dir / "gate.bin", embedstore::encode_tensor(flat, embedstore::DType::f64));
      s.quantizers.emplace(Slot::fused, std::move(fit.quantizer));
    } else {
      Matrix fused(e_text.rows(), e_text.cols());
      for (Eigen::Index i = 0; i < fused.rows(); ++i)
        fused.row(i) = fusion::early_fuse_constant(e_text.row(i).transpose(), e_image.row(i).transpose(), c.alpha).transpose();
      fit_slot(Slot::fused, fused);
    }
  } else {
    fit_slot(Slot::image, s.projected.at(c.visual).rows);
    fit_slot(Slot::text, s.projected.at(c.textual).rows);
  }

  for (const auto& [slot, model] : s.quantizers) {
    const auto sub = dir / fusion::to_string(slot);
    rvq::save_model(model, sub / "model");
    write_file(sub / "semantic_ids.json", ids_to_json(s.ids.at(slot)).dump() + "\n");
  }
}

void stage_fuse(const ExperimentConfig& c, Experiment::State& s, const fs::path& dir) {
  std::map<Slot, int> dedup;
  for (const auto& [slot, ids] : s.ids) {
    int top = 0;
    for (const auto& [_, id] : ids) top = std::max(top, id.dedup);
    dedup[slot] = top + 1;
  }
  s.vocab = fusion::Vocabulary(c.rvq.levels, c.rvq.codebook_size, dedup);

  std::vector<std::pair<std::string, std::vector<int>>> catalog;
  for (const auto& item : s.catalog) {
    fusion::TokenSequence seq;
    switch (c.layout) {
      case fusion::Layout::unimodal: {
        const auto slot = slot_for(c.unimodal);
        seq = fusion::single_ids(s.ids.at(slot).at(item), slot, c.layout, s.vocab);
        break;
      }
      case fusion::Layout::early:
        seq = fusion::single_ids(s.ids.at(Slot::fused).at(item), Slot::fused, c.layout, s.vocab);
        break;
      case fusion::Layout::lateA:
        seq = fusion::concat_ids(s.ids.at(Slot::image).at(item), s.ids.at(Slot::text).at(item), s.vocab, c.image_first);
        break;
      case fusion::Layout::lateB:
        seq = fusion::interleave_ids(s.ids.at(Slot::image).at(item), s.ids.at(Slot::text).at(item), s.vocab,
                                     c.image_first);
        break;
      case fusion::Layout::lateC:
        seq = fusion::wrap_modality_aware(s.ids.at(Slot::image).at(item), s.ids.at(Slot::text).at(item), s.vocab,
                                          c.image_first);
        break;
    }
    s.item_tokens[item] = seq.tokens;
    catalog.emplace_back(item, seq.tokens);
  }
  s.trie = seq2seq::ItemTrie::build(catalog);

  write_file(dir / "vocabulary.json", s.vocab.to_json().dump(2) + "\n");
  write_file(dir / "item_tokens.json", json(s.item_tokens).dump() + "\n");
  if (c.alignment) {
    s.pairs = fusion::make_alignment_pairs(s.ids.at(Slot::image), s.ids.at(Slot::text), s.vocab);
    json pairs = json::array();
    for (const auto& p : s.pairs)
      pairs.push_back({{"item", p.item_id}, {"source", p.source.tokens}, {"target", p.target.tokens}});
    write_file(dir / "alignment_pairs.json", pairs.dump() + "\n");
  }
}

seq2seq::Model train_seed(const ExperimentConfig& c, const Experiment::State& s, std::uint64_t seed,
                          const fs::path& dir) {
  seq2seq::ModelConfig mc = c.model;
  mc.vocab_size = s.vocab.size();
  mc.seed = derive_seed(seed, "model");
  seq2seq::Model model(mc);

  if (c.alignment) {
    std::vector<seq2seq::Example> pairs;
    for (const auto& p : s.pairs) pairs.push_back({p.source.tokens, p.target.tokens});
    auto tc = c.alignment_train;
    tc.seed = derive_seed(seed, "alignment");
    const auto rep = seq2seq::train(model, pairs, tc);
    write_file(dir / "alignment_loss.csv", seq2seq::loss_curve_csv(rep.loss_curve));
  }

  std::vector<seq2seq::Example> examples;
  examples.reserve(s.instances.train.size());
  for (const auto& inst : s.instances.train)
    examples.push_back({history_tokens(inst.history, s.item_tokens), s.item_tokens.at(inst.target)});
  require(!examples.empty(), ErrorKind::data, "no next-item training instances (every train prefix is a single item)");
  auto tc = c.train;
  tc.seed = derive_seed(seed, "train");
  const auto rep = seq2seq::train(model, examples, tc);
  write_file(dir / "loss.csv", seq2seq::loss_curve_csv(rep.loss_curve));
  return model;
}

void stage_train(const ExperimentConfig& c, Experiment::State& s, const fs::path& dir) {
  const auto tokens_digest = sha256_hex(json(s.item_tokens).dump());
  for (std::uint64_t seed : c.seeds) {
    const auto sub = dir / ("seed" + std::to_string(seed));
    const auto key = sha256_hex(c.digest() + "|" + tokens_digest + "|" + std::to_string(seed));
    const auto stamp = sub / "stage.json";
    if (fs::exists(stamp)) {
      try {
        if (json::parse(read_file(stamp)).at("key") == key) {
          s.models.emplace(seed, seq2seq::Model::load(sub / "model"));
          continue;
        }
      } catch (const std::exception&) {
        // stale or unreadable cache entry: retrain
      }
    }
    fs::remove_all(sub);
    auto model = train_seed(c, s, seed, sub);
    model.save(sub / "model");
    write_file(stamp, json{{"key", key}}.dump() + "\n");
    s.models.emplace(seed, std::move(model));
  }
}

void stage_eval(const ExperimentConfig& c, Experiment::State& s, const fs::path& dir) {
  std::vector<metrics::EvalCase> cases;
  for (const auto& t : s.instances.test) cases.push_back({t.user_id, t.history, t.target});
  const auto& trie = *s.trie;
  auto factory = [&](std::uint64_t seed) -> metrics::Ranker {
    const auto& model = s.models.at(seed);
    return [&, seed](const metrics::EvalCase& ec) {
      (void)seed;
      const auto context = history_tokens(ec.history, s.item_tokens);
      std::set<std::string> exclude;
      if (c.filter_history) exclude.insert(ec.history.begin(), ec.history.end());
      const auto hyps = seq2seq::beam_decode(model, context, c.decode, trie, c.filter_history ? &exclude : nullptr);
      std::vector<std::string> ranked;
      for (const auto& h : hyps) ranked.push_back(h.item_id);
      return ranked;
    };
  };
  auto report = metrics::evaluate(cases, c.seeds, factory, c.cutoffs);
  report.variant = c.variant();
  report.config_digest = c.digest();

  write_file(dir / "report.json", emit_report(report, "json"));
  write_file(dir / "report.csv", emit_report(report, "csv"));
  write_file(dir / "report.txt", emit_report(report, "table"));
  std::ostringstream pu;
  pu << "user,seed";
  for (int k : report.cutoffs) pu << ",recall@" << k;
  for (int k : report.cutoffs) pu << ",ndcg@" << k;
  pu << '\n';
  for (const auto& sr : report.seeds)
    for (std::size_t u = 0; u < report.users.size(); ++u) {
      pu << report.users[u] << ',' << sr.seed;
      for (int k : report.cutoffs) pu << ',' << format_fixed(sr.user_recall.at(k)[u], 0);
      for (int k : report.cutoffs) pu << ',' << format_fixed(sr.user_ndcg.at(k)[u], 6);
      pu << '\n';
    }
  write_file(dir / "per_user.csv", pu.str());
  s.report = std::move(report);
}

}  // namespace

void Experiment::run_until(Stage last) {
  const fs::path out = config_.out;
  fs::create_directories(out);
  DirLock lock(out);
  const auto sentinel = out / "INVALID";
  write_file(sentinel, "run in progress or failed; artifacts in this directory are incomplete\n");
  write_file(out / "config.resolved.json", config_.resolved.dump(2) + "\n");
  if (state_->completed < 0 && fs::exists(out / "manifest.json")) {
    try {
      const auto previous = json::parse(read_file(out / "manifest.json"));
      if (previous.at("config_digest") == config_.digest()) state_->manifest = previous;
    } catch (const std::exception&) {
      // unreadable manifest: start a fresh one
    }
  }

  using StageFn = void (*)(const ExperimentConfig&, State&, const fs::path&);
  const std::pair<Stage, StageFn> stages[] = {
      {Stage::ingest, stage_ingest}, {Stage::render, stage_render}, {Stage::tokenize, stage_tokenize},
      {Stage::fuse, stage_fuse},     {Stage::train, stage_train},   {Stage::eval, stage_eval},
  };
  for (const auto& [stage, fn] : stages) {
    const int idx = static_cast<int>(stage);
    if (idx > static_cast<int>(last)) break;
    if (idx <= state_->completed) continue;
    const auto name = to_string(stage);
    const auto dir = out / name;
    try {
      if (stage != Stage::train) fs::remove_all(dir);
      fs::create_directories(dir);
      fn(config_, *state_, dir);
    } catch (const Error& e) {
      throw Error(e.kind(), "stage '" + name + "' failed: " + e.what());
    } catch (const fs::filesystem_error& e) {
      throw Error(ErrorKind::io, "stage '" + name + "' failed: " + e.what());
    }
    state_->manifest["stages"][name] = digest_tree(dir);
    state_->completed = idx;
  }
  state_->manifest["config_digest"] = config_.digest();
  state_->manifest["variant"] = config_.variant();
  write_file(out / "manifest.json", state_->manifest.dump(2) + "\n");
  fs::remove(sentinel);
}

metrics::GeometryStats Experiment::geometry() {
  require(config_.modalities.contains(config_.visual) && config_.modalities.contains(config_.textual) &&
              config_.visual != config_.textual,
          ErrorKind::config, "geometry needs two configured modalities (fusion.visual and fusion.textual)");
  run_until(Stage::render);
  const auto& a = state_->projected.at(config_.visual);
  const auto& b = state_->projected.at(config_.textual);
  auto g = metrics::geometry_stats(a, b, config_.projection_seed);

  const fs::path dir = fs::path(config_.out) / "geometry";
  json j = {{"modality_a", embedstore::to_string(config_.visual)},
            {"modality_b", embedstore::to_string(config_.textual)},
            {"pairs", g.item_ids.size()},
            {"modality_gap", g.modality_gap},
            {"anisotropy", {{embedstore::to_string(config_.visual), g.anisotropy_a},
                            {embedstore::to_string(config_.textual), g.anisotropy_b}}}};
  write_file(dir / "geometry.json", j.dump(2) + "\n");
  std::ostringstream csv;
  csv << "item,modality,x,y\n";
  const auto n = g.item_ids.size();
  for (std::size_t r = 0; r < 2 * n; ++r) {
    const auto row = static_cast<Eigen::Index>(r);
    csv << g.item_ids[r % n] << ',' << embedstore::to_string(r < n ? config_.visual : config_.textual) << ','
        << format_fixed(g.projection(row, 0), 6) << ',' << format_fixed(g.projection(row, 1), 6) << '\n';
  }
  write_file(dir / "projection.csv", csv.str());
  return g;
}

metrics::EvalReport run_experiment(const ExperimentConfig& config) {
  Experiment e(config);
  e.run_until(Stage::eval);
  return e.report();
}

}  // namespace semid::pipeline
