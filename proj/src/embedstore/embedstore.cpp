#include "semid/embedstore.hpp"

#include "semid/error.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace semid::embedstore {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "data.bin encoding assumes a little-endian host");

std::string to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::image: return "image";
    case Modality::ocr_text: return "ocr_text";
  }
  return "text";
}

Modality parse_modality(std::string_view s) {
  if (s == "text") return Modality::text;
  if (s == "image") return Modality::image;
  if (s == "ocr_text") return Modality::ocr_text;
  fail(ErrorKind::data, "unknown modality tag '" + std::string(s) + "'");
}

void EmbeddingMatrix::validate() const {
  require(dim() > 0, ErrorKind::data, "embedding dim must be positive");
  require(static_cast<Eigen::Index>(item_ids.size()) == count(), ErrorKind::data,
          "item_ids size " + std::to_string(item_ids.size()) + " != row count " +
              std::to_string(count()));
  std::unordered_set<std::string> seen;
  for (const auto& id : item_ids)
    require(seen.insert(id).second, ErrorKind::data, "duplicate item id '" + id + "'");
  require(rows.allFinite(), ErrorKind::data, "embedding matrix contains non-finite values");
}

std::unordered_map<std::string, Eigen::Index> EmbeddingMatrix::index() const {
  std::unordered_map<std::string, Eigen::Index> out;
  out.reserve(item_ids.size());
  for (std::size_t i = 0; i < item_ids.size(); ++i) out.emplace(item_ids[i], static_cast<Eigen::Index>(i));
  return out;
}

std::string encode_tensor(std::span<const double> values, DType dtype) {
  std::string out;
  if (dtype == DType::f32) {
    out.resize(values.size() * sizeof(float));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float f = static_cast<float>(values[i]);
      std::memcpy(out.data() + i * sizeof(float), &f, sizeof f);
    }
  } else {
    out.resize(values.size() * sizeof(double));
    std::memcpy(out.data(), values.data(), out.size());
  }
  return out;
}

std::vector<double> decode_tensor(std::string_view bytes, DType dtype, std::size_t expected_count) {
  const std::size_t width = dtype == DType::f32 ? sizeof(float) : sizeof(double);
  require(bytes.size() == expected_count * width, ErrorKind::data,
          "integrity error: data holds " + std::to_string(bytes.size() / width) + " values, manifest declares " +
              std::to_string(expected_count));
  std::vector<double> out(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    if (dtype == DType::f32) {
      float f;
      std::memcpy(&f, bytes.data() + i * width, width);
      out[i] = f;
    } else {
      std::memcpy(&out[i], bytes.data() + i * width, width);
    }
    require(std::isfinite(out[i]), ErrorKind::data, "non-finite value at flat index " + std::to_string(i));
  }
  return out;
}

fs::path write_matrix(const EmbeddingMatrix& m, const fs::path& dir) {
  m.validate();
  fs::create_directories(dir);
  json manifest = m.extra.is_object() ? m.extra : json::object();
  manifest["version"] = 1;
  manifest["modality"] = to_string(m.modality);
  manifest["encoder"] = m.encoder;
  manifest["dim"] = m.dim();
  manifest["count"] = m.count();
  manifest["dtype"] = "f32";
  manifest["byte_order"] = "little";
  manifest["item_ids"] = m.item_ids;
  write_file(dir / "data.bin",
             encode_tensor(std::span<const double>(m.rows.data(), static_cast<std::size_t>(m.rows.size())),
                           DType::f32));
  const fs::path manifest_path = dir / "manifest.json";
  write_file(manifest_path, manifest.dump(2) + "\n");
  return manifest_path;
}

EmbeddingMatrix read_matrix(const fs::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    fail(ErrorKind::data, "bad manifest in " + dir.string() + ": " + e.what());
  }
  EmbeddingMatrix m;
  try {
    require(manifest.at("version").get<int>() == 1, ErrorKind::data, "unsupported manifest version");
    require(manifest.at("dtype").get<std::string>() == "f32", ErrorKind::data, "embedding dtype must be f32");
    require(manifest.at("byte_order").get<std::string>() == "little", ErrorKind::data,
            "embedding byte_order must be little");
    m.modality = parse_modality(manifest.at("modality").get<std::string>());
    m.encoder = manifest.at("encoder").get<std::string>();
    m.item_ids = manifest.at("item_ids").get<std::vector<std::string>>();
    const auto dim = manifest.at("dim").get<std::int64_t>();
    const auto count = manifest.at("count").get<std::int64_t>();
    require(dim > 0 && count >= 0, ErrorKind::data, "manifest dim/count out of range");
    require(static_cast<std::int64_t>(m.item_ids.size()) == count, ErrorKind::data,
            "integrity error: manifest count does not match item_ids");
    const auto values =
        decode_tensor(read_file(dir / "data.bin"), DType::f32, static_cast<std::size_t>(count * dim));
    m.rows = Eigen::Map<const Matrix>(values.data(), count, dim);
  } catch (const json::exception& e) {
    fail(ErrorKind::data, "bad manifest in " + dir.string() + ": " + e.what());
  }
  for (const char* key : {"version", "modality", "encoder", "dim", "count", "dtype", "byte_order", "item_ids"})
    manifest.erase(key);
  m.extra = std::move(manifest);
  m.validate();
  return m;
}

Projection Projection::make_identity(Eigen::Index d) {
  Projection p;
  p.weights = Matrix::Identity(d, d);
  p.identity = true;
  return p;
}

Projection Projection::orthonormal(Eigen::Index d_in, Eigen::Index d, std::uint64_t seed) {
  expects(d_in > 0 && d > 0, "projection dims must be positive");
  Rng rng(seed);
  const Eigen::Index tall = std::max(d, d_in), wide = std::min(d, d_in);
  Eigen::MatrixXd g(tall, wide);
  for (Eigen::Index i = 0; i < tall; ++i)
    for (Eigen::Index j = 0; j < wide; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(tall, wide);
  // Fix column signs so the draw does not depend on Householder conventions.
  Eigen::MatrixXd r = qr.matrixQR().topRows(wide).triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < wide; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  Projection p;
  if (d <= d_in)
    p.weights = q.transpose();  // d x d_in, orthonormal rows
  else
    p.weights = q;  // d x d_in, orthonormal columns
  return p;
}

Vector project_normalize(const Eigen::Ref<const Vector>& e, const Projection& p) {
  expects(e.size() == p.in_dim(), "input dim " + std::to_string(e.size()) + " != projection input dim " +
                                      std::to_string(p.in_dim()));
  Vector y = p.identity ? Vector(e) : Vector(p.weights * e);
  const double n = y.norm();
  require(n > 0.0 && std::isfinite(n), ErrorKind::data, "degenerate input: projected vector is zero");
  return y / n;
}

EmbeddingMatrix project_all(const EmbeddingMatrix& m, const Projection& p) {
  EmbeddingMatrix out;
  out.modality = m.modality;
  out.encoder = m.encoder;
  out.item_ids = m.item_ids;
  out.extra = m.extra;
  out.rows.resize(m.count(), p.out_dim());
  for (Eigen::Index i = 0; i < m.count(); ++i) {
    try {
      out.rows.row(i) = project_normalize(m.rows.row(i).transpose(), p).transpose();
    } catch (const Error& e) {
      fail(e.kind(), std::string(e.what()) + " (item '" + m.item_ids[static_cast<std::size_t>(i)] + "')");
    }
  }
  return out;
}

Projection default_projection(Modality m, Eigen::Index d_in, Eigen::Index d, std::uint64_t seed) {
  if (d_in == d) return Projection::make_identity(d);
  return Projection::orthonormal(d_in, d, derive_seed(seed, "projection/" + to_string(m)));
}

std::string synthetic_item_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "i%04d", index);
  return buf;
}

SyntheticEmbeddings synthesize_embeddings(const SyntheticSpec& spec, const std::vector<int>* labels) {
  require(spec.n_items >= 1 && spec.n_clusters >= 1 && spec.n_clusters <= spec.n_items, ErrorKind::config,
          "synthetic spec needs 1 <= n_clusters <= n_items");
  require(spec.dim >= 2, ErrorKind::config, "synthetic dim must be >= 2");
  require(spec.cross_modal_correlation >= 0.0 && spec.cross_modal_correlation <= 1.0, ErrorKind::config,
          "cross_modal_correlation must lie in [0, 1]");
  require(spec.cluster_spread >= 0.0, ErrorKind::config, "cluster_spread must be non-negative");
  if (labels) {
    require(static_cast<int>(labels->size()) == spec.n_items, ErrorKind::config, "label count != n_items");
    for (int l : *labels)
      require(l >= 0 && l < spec.n_clusters, ErrorKind::config, "label out of range");
  }

  Rng rng(spec.seed);
  const auto n = static_cast<Eigen::Index>(spec.n_items);
  const auto d = static_cast<Eigen::Index>(spec.dim);
  const double center_scale = 1.0 / std::sqrt(static_cast<double>(d));

  // Each modality gets its own cluster centres so the two spaces are not trivially aligned.
  auto draw_centres = [&] {
    Matrix c(spec.n_clusters, d);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = rng.normal() * center_scale;
    return c;
  };
  const Matrix centres_a = draw_centres();
  const Matrix centres_b = draw_centres();

  // Within-cluster noise: decaying spectrum along a random orthonormal basis
  // per modality, scaled so the expected squared radius is spread^2.
  Vector axis_std(d);
  for (Eigen::Index j = 0; j < d; ++j) axis_std(j) = std::pow(static_cast<double>(j + 1), -spec.spectrum_decay);
  axis_std *= spec.cluster_spread / axis_std.norm();
  const Matrix basis_a = Projection::orthonormal(d, d, rng.next_u64()).weights;
  const Matrix basis_b = Projection::orthonormal(d, d, rng.next_u64()).weights;

  SyntheticEmbeddings out;
  out.first_labels.resize(static_cast<std::size_t>(n));
  out.second_labels.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out.first_labels[k] = labels ? (*labels)[k] : static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_clusters)));
    const bool agree = rng.uniform() < spec.cross_modal_correlation;
    out.second_labels[k] =
        agree ? out.first_labels[k] : static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_clusters)));
  }

  auto fill = [&](EmbeddingMatrix& m, Modality mod, const Matrix& centres, const Matrix& basis,
                  const std::vector<int>& lab) {
    m.modality = mod;
    m.encoder = "synthetic";
    m.rows.resize(n, d);
    m.item_ids.reserve(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      m.item_ids.push_back(synthetic_item_id(static_cast<int>(i)));
      Vector noise(d);
      for (Eigen::Index j = 0; j < d; ++j) noise(j) = rng.normal() * axis_std(j);
      m.rows.row(i) = centres.row(lab[static_cast<std::size_t>(i)]) + (basis.transpose() * noise).transpose();
    }
    m.extra = {{"synthetic_seed", spec.seed}, {"n_clusters", spec.n_clusters}};
  };
  fill(out.first, Modality::text, centres_a, basis_a, out.first_labels);
  fill(out.second, Modality::image, centres_b, basis_b, out.second_labels);
  return out;
}

}  // namespace semid::embedstore
