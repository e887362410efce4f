#include "semid/pipeline.hpp"

#include "semid/error.hpp"

#include <algorithm>
#include <set>

namespace semid::pipeline {

using nlohmann::json;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::ingest: return "ingest";
    case Stage::render: return "render";
    case Stage::tokenize: return "tokenize";
    case Stage::fuse: return "fuse";
    case Stage::train: return "train";
    case Stage::eval: return "eval";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (Stage st : {Stage::ingest, Stage::render, Stage::tokenize, Stage::fuse, Stage::train, Stage::eval})
    if (to_string(st) == s) return st;
  fail(ErrorKind::config, "unknown stage '" + std::string(s) + "'");
}

fusion::Slot slot_for(Modality m) {
  return m == Modality::text ? fusion::Slot::text : fusion::Slot::image;
}

namespace {

json render_source_defaults() {
  return {{"source", "render"},
          {"render", {{"canvas", 1024}, {"glyph_px", 16}, {"margin", 16}, {"wrap", 80}}},
          {"resolution", 1024},
          {"encode_dim", 256},
          {"seed", 0}};
}

const std::set<std::string> kModalityKeys{"source", "path", "render", "resolution", "encode_dim", "seed"};

/// Rejects keys of `given` that `reference` does not have, recursively.
void check_keys(const json& given, const json& reference, const std::string& where) {
  for (const auto& [key, value] : given.items()) {
    const auto path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) fail(ErrorKind::config, "unknown config key '" + path + "'");
    if (key == "modalities" && where.empty()) continue;
    if (value.is_object() && reference.at(key).is_object()) check_keys(value, reference.at(key), path);
  }
}

template <typename T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::config, std::string("config value '") + section + "." + key + "' is missing or has the wrong type");
  }
}

template <typename T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::config, std::string("config value '") + key + "' is missing or has the wrong type");
  }
}

fs::path resolve_path(const std::string& p, const fs::path& base) {
  if (p.empty()) return {};
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

Modality modality_from_config(const std::string& name) {
  try {
    return embedstore::parse_modality(name);
  } catch (const Error&) {
    fail(ErrorKind::config, "unknown modality '" + name + "' (expected text, image or ocr_text)");
  }
}

}  // namespace

json ExperimentConfig::defaults() {
  return {
      {"data",
       {{"source", "synthetic"},
        {"synthetic",
         {{"n_items", 200}, {"n_users", 300}, {"n_clusters", 8}, {"min_length", 6}, {"max_length", 14},
          {"advance_prob", 0.75}, {"stay_prob", 0.15}, {"popularity_skew", 1.0}, {"seed", 0},
          {"embedding_dim", 64}, {"cross_modal_correlation", 1.0}, {"cluster_spread", 0.35},
          {"spectrum_decay", 1.0}, {"shuffle_labels", false}}},
        {"interactions", ""},
        {"catalog", ""},
        {"descriptions", ""}}},
      {"modalities",
       {{"text", {{"source", "synthetic"}}}, {"image", {{"source", "synthetic"}}}, {"ocr_text", render_source_defaults()}}},
      {"projection", {{"dim", 128}, {"seed", 0}}},
      {"rvq",
       {{"levels", 3}, {"codebook_size", 256}, {"mode", "kmeans_rvq"}, {"seed", 0}, {"max_iterations", 100},
        {"tolerance", 1e-6},
        {"rqvae",
         {{"hidden", 64}, {"latent_dim", 0}, {"steps", 400}, {"batch", 64}, {"learning_rate", 1e-3}, {"beta", 0.25}}}}},
      {"fusion",
       {{"strategy", "unimodal"}, {"modality", "text"}, {"visual", "image"}, {"textual", "text"},
        {"image_first", true}, {"alpha", 0.5}}},
      {"model",
       {{"encoder_layers", 2}, {"decoder_layers", 2}, {"width", 128}, {"heads", 4}, {"ff_width", 512},
        {"max_positions", 512}, {"dropout", 0.0}}},
      {"train", {{"learning_rate", 1e-3}, {"batch_size", 64}, {"steps", 0}, {"epochs", 1}, {"clip_norm", 1.0}}},
      {"alignment",
       {{"enabled", false}, {"steps", 2000}, {"learning_rate", 1e-4}, {"batch_size", 64}, {"clip_norm", 1.0}}},
      {"history", 50},
      {"decode", {{"beam", 20}, {"max_length", 20}, {"filter_history", false}}},
      {"eval", {{"cutoffs", {5, 10, 20}}, {"seeds", {0, 1, 2, 3, 4}}}},
      {"out", "runs/default"},
  };
}

ExperimentConfig ExperimentConfig::parse(const json& user, const fs::path& base_dir) {
  require(user.is_object(), ErrorKind::config, "config must be a JSON object");
  const json def = defaults();
  check_keys(user, def, "");

  json j = def;
  json user_rest = user;
  user_rest.erase("modalities");
  j.merge_patch(user_rest);
  if (user.contains("modalities")) {
    require(user.at("modalities").is_object(), ErrorKind::config, "'modalities' must be an object");
    j["modalities"] = json::object();
    for (const auto& [name, entry] : user.at("modalities").items()) {
      modality_from_config(name);
      require(entry.is_object() && entry.contains("source"), ErrorKind::config,
              "modality '" + name + "' needs exactly one 'source'");
      for (const auto& [key, _] : entry.items())
        require(kModalityKeys.contains(key), ErrorKind::config, "unknown config key 'modalities." + name + "." + key + "'");
      json full = entry;
      if (entry.at("source") == "render") {
        full = render_source_defaults();
        full.merge_patch(entry);
      }
      j["modalities"][name] = full;
    }
  }

  ExperimentConfig c;
  const auto& data = j.at("data");
  const auto source = get<std::string>(j, "data", "source");
  require(source == "synthetic" || source == "files", ErrorKind::config,
          "data.source must be 'synthetic' or 'files', got '" + source + "'");
  c.synthetic = source == "synthetic";
  {
    const auto& s = data.at("synthetic");
    c.corpus.n_items = get<int>(s, "n_items");
    c.corpus.n_users = get<int>(s, "n_users");
    c.corpus.n_clusters = get<int>(s, "n_clusters");
    c.corpus.min_length = get<int>(s, "min_length");
    c.corpus.max_length = get<int>(s, "max_length");
    c.corpus.advance_prob = get<double>(s, "advance_prob");
    c.corpus.stay_prob = get<double>(s, "stay_prob");
    c.corpus.popularity_skew = get<double>(s, "popularity_skew");
    c.corpus.seed = get<std::uint64_t>(s, "seed");
    c.embeddings.n_items = c.corpus.n_items;
    c.embeddings.n_clusters = c.corpus.n_clusters;
    c.embeddings.dim = get<int>(s, "embedding_dim");
    c.embeddings.cross_modal_correlation = get<double>(s, "cross_modal_correlation");
    c.embeddings.cluster_spread = get<double>(s, "cluster_spread");
    c.embeddings.spectrum_decay = get<double>(s, "spectrum_decay");
    c.embeddings.seed = derive_seed(c.corpus.seed, "embeddings");
    c.shuffle_labels = get<bool>(s, "shuffle_labels");
  }
  c.interactions = resolve_path(get<std::string>(j, "data", "interactions"), base_dir);
  c.catalog = resolve_path(get<std::string>(j, "data", "catalog"), base_dir);
  c.descriptions = resolve_path(get<std::string>(j, "data", "descriptions"), base_dir);
  if (!c.synthetic) {
    require(!c.interactions.empty() && !c.catalog.empty(), ErrorKind::config,
            "data.source 'files' needs data.interactions and data.catalog");
  }
  j["data"]["interactions"] = c.interactions.string();
  j["data"]["catalog"] = c.catalog.string();
  j["data"]["descriptions"] = c.descriptions.string();

  for (const auto& [name, entry] : j.at("modalities").items()) {
    ModalitySource ms;
    const auto kind = get<std::string>(entry, "source");
    if (kind == "synthetic") {
      ms.kind = ModalitySource::Kind::synthetic;
    } else if (kind == "embeddings") {
      ms.kind = ModalitySource::Kind::embeddings;
      require(entry.contains("path"), ErrorKind::config, "modality '" + name + "' with source 'embeddings' needs 'path'");
      ms.path = resolve_path(get<std::string>(entry, "path"), base_dir);
      j["modalities"][name]["path"] = ms.path.string();
    } else if (kind == "render") {
      ms.kind = ModalitySource::Kind::render;
      const auto& r = entry.at("render");
      ms.render.canvas = get<int>(r, "canvas");
      ms.render.glyph_px = get<int>(r, "glyph_px");
      ms.render.margin = get<int>(r, "margin");
      ms.render.wrap = get<int>(r, "wrap");
      ms.render.validate();
      ms.resolution = get<int>(entry, "resolution");
      ms.encode_dim = get<int>(entry, "encode_dim");
      ms.encode_seed = get<std::uint64_t>(entry, "seed");
      require(std::ranges::count(kSupportedResolutions, ms.render.canvas) == 1, ErrorKind::config,
              "unsupported canvas size " + std::to_string(ms.render.canvas) + " (supported: 256, 512, 1024)");
      require(std::ranges::count(kSupportedResolutions, ms.resolution) == 1, ErrorKind::config,
              "unsupported rendering resolution " + std::to_string(ms.resolution) + " (supported: 256, 512, 1024)");
      require(ms.resolution <= ms.render.canvas && ms.render.canvas % ms.resolution == 0, ErrorKind::config,
              "resolution " + std::to_string(ms.resolution) + " does not divide canvas " +
                  std::to_string(ms.render.canvas));
      require(ms.encode_dim >= 8, ErrorKind::config, "encode_dim must be >= 8");
    } else {
      fail(ErrorKind::config, "modality '" + name + "' has unknown source '" + kind +
                                  "' (expected synthetic, embeddings or render)");
    }
    const Modality m = modality_from_config(name);
    if (ms.kind == ModalitySource::Kind::synthetic) {
      require(c.synthetic, ErrorKind::config, "modality '" + name + "' is synthetic but data.source is 'files'");
      require(m != Modality::ocr_text, ErrorKind::config, "ocr_text cannot be synthetic; use source 'render'");
    }
    c.modalities[m] = ms;
  }

  c.projection_dim = get<int>(j, "projection", "dim");
  c.projection_seed = get<std::uint64_t>(j, "projection", "seed");
  require(c.projection_dim >= 2, ErrorKind::config, "projection.dim must be >= 2");

  {
    const auto& r = j.at("rvq");
    c.rvq.levels = get<int>(r, "levels");
    c.rvq.codebook_size = get<int>(r, "codebook_size");
    try {
      c.rvq.mode = rvq::parse_mode(get<std::string>(r, "mode"));
    } catch (const Error& e) {
      fail(ErrorKind::config, e.what());
    }
    c.rvq.seed = get<std::uint64_t>(r, "seed");
    c.rvq.kmeans.max_iterations = get<int>(r, "max_iterations");
    c.rvq.kmeans.tolerance = get<double>(r, "tolerance");
    const auto& q = r.at("rqvae");
    c.rvq.rqvae.hidden = get<int>(q, "hidden");
    c.rvq.rqvae.latent_dim = get<int>(q, "latent_dim");
    c.rvq.rqvae.steps = get<int>(q, "steps");
    c.rvq.rqvae.batch = get<int>(q, "batch");
    c.rvq.rqvae.learning_rate = get<double>(q, "learning_rate");
    c.rvq.rqvae.beta = get<double>(q, "beta");
    require(c.rvq.levels >= 1, ErrorKind::config, "rvq.levels must be >= 1");
    require(c.rvq.codebook_size >= 2, ErrorKind::config, "rvq.codebook_size must be >= 2");
    require(c.rvq.kmeans.max_iterations >= 1, ErrorKind::config, "rvq.max_iterations must be >= 1");
  }

  {
    const auto& f = j.at("fusion");
    try {
      c.layout = fusion::parse_layout(get<std::string>(f, "strategy"));
    } catch (const Error& e) {
      fail(ErrorKind::config, e.what());
    }
    c.unimodal = modality_from_config(get<std::string>(f, "modality"));
    c.visual = modality_from_config(get<std::string>(f, "visual"));
    c.textual = modality_from_config(get<std::string>(f, "textual"));
    c.image_first = get<bool>(f, "image_first");
    c.alpha = get<double>(f, "alpha");
    require(c.alpha > 0.0 && c.alpha < 1.0, ErrorKind::config, "fusion.alpha must lie in (0, 1)");
    if (c.layout == fusion::Layout::unimodal) {
      require(c.modalities.contains(c.unimodal), ErrorKind::config,
              "fusion.modality '" + embedstore::to_string(c.unimodal) + "' has no source under 'modalities'");
    } else {
      const auto name = fusion::to_string(c.layout);
      require(c.modalities.contains(c.visual) && c.modalities.contains(c.textual), ErrorKind::config,
              "fusion=" + name + " requires two modalities ('" + embedstore::to_string(c.visual) + "' and '" +
                  embedstore::to_string(c.textual) + "') with sources under 'modalities'");
      require(c.visual != c.textual, ErrorKind::config,
              "fusion=" + name + " requires two different modalities");
    }
  }

  {
    const auto& m = j.at("model");
    c.model.encoder_layers = get<int>(m, "encoder_layers");
    c.model.decoder_layers = get<int>(m, "decoder_layers");
    c.model.width = get<int>(m, "width");
    c.model.heads = get<int>(m, "heads");
    c.model.ff_width = get<int>(m, "ff_width");
    c.model.max_positions = get<int>(m, "max_positions");
    c.model.dropout = get<double>(m, "dropout");
    c.model.vocab_size = 7;
    c.model.validate();
  }
  auto read_train = [&](const char* section, seq2seq::TrainConfig& t) {
    const auto& s = j.at(section);
    t.learning_rate = get<double>(s, "learning_rate");
    t.batch_size = get<int>(s, "batch_size");
    t.steps = get<int>(s, "steps");
    t.clip_norm = get<double>(s, "clip_norm");
    if (s.contains("epochs")) t.epochs = get<int>(s, "epochs");
    t.validate();
  };
  read_train("train", c.train);
  read_train("alignment", c.alignment_train);
  c.alignment = get<bool>(j, "alignment", "enabled");
  require(!c.alignment || c.layout == fusion::Layout::lateC, ErrorKind::config,
          "the alignment stage requires fusion=lateC");
  c.alignment_train.epochs = 0;
  require(!c.alignment || c.alignment_train.steps > 0, ErrorKind::config, "alignment.steps must be > 0");

  c.history = get<int>(j, "history");
  require(c.history >= 1, ErrorKind::config, "history must be >= 1");
  c.decode.beam = get<int>(j, "decode", "beam");
  c.decode.max_length = get<int>(j, "decode", "max_length");
  c.filter_history = get<bool>(j, "decode", "filter_history");
  require(c.decode.beam >= 1, ErrorKind::config, "decode.beam must be >= 1");

  // Sequence-length checks against the model's position table.
  const auto item_len = static_cast<int>(fusion::layout_length(c.layout, c.rvq.levels));
  require(c.decode.max_length >= item_len, ErrorKind::config,
          "decode.max_length " + std::to_string(c.decode.max_length) + " is shorter than an item sequence (" +
              std::to_string(item_len) + " tokens)");
  require(c.model.max_positions >= c.history * item_len, ErrorKind::config,
          "model.max_positions " + std::to_string(c.model.max_positions) + " cannot hold history " +
              std::to_string(c.history) + " x " + std::to_string(item_len) + " tokens");
  require(c.model.max_positions >= item_len + 1, ErrorKind::config, "model.max_positions is shorter than one item");

  c.cutoffs = get<std::vector<int>>(j, "eval", "cutoffs");
  c.seeds = get<std::vector<std::uint64_t>>(j, "eval", "seeds");
  require(!c.cutoffs.empty(), ErrorKind::config, "eval.cutoffs must not be empty");
  for (int k : c.cutoffs) require(k > 0, ErrorKind::config, "eval.cutoffs must be positive");
  require(!c.seeds.empty(), ErrorKind::config, "eval.seeds must not be empty");

  c.out = get<std::string>(j, "out");
  require(!c.out.empty(), ErrorKind::config, "out must name a directory");
  c.resolved = std::move(j);
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  require(fs::exists(path), ErrorKind::config, "config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path), nullptr, true, true);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::config, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse(j, path.parent_path());
}

std::string ExperimentConfig::digest() const {
  json j = resolved;
  j.erase("out");
  return sha256_hex(j.dump());
}

std::string ExperimentConfig::variant() const {
  auto name = fusion::to_string(layout);
  if (layout == fusion::Layout::unimodal) return name + ":" + embedstore::to_string(unimodal);
  if (alignment) name += "+align";
  return name + ":" + embedstore::to_string(visual) + "+" + embedstore::to_string(textual);
}

std::vector<Modality> ExperimentConfig::used_modalities() const {
  if (layout == fusion::Layout::unimodal) return {unimodal};
  return {visual, textual};
}

ExperimentConfig ExperimentConfig::with(const json& patch) const {
  json j = resolved;
  j.merge_patch(patch);
  return parse(j);
}

}  // namespace semid::pipeline
