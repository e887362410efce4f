#include "semid/corpus.hpp"

#include "semid/embedstore.hpp"
#include "semid/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace semid::corpus {

std::size_t InteractionLog::record_count() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.items.size();
  return n;
}

Catalog load_catalog(const fs::path& path) {
  try {
    const auto j = nlohmann::json::parse(read_file(path));
    require(j.is_array(), ErrorKind::data, "catalog must be a JSON list of item ids");
    Catalog out;
    for (const auto& v : j) out.insert(v.get<std::string>());
    return out;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, "bad catalog " + path.string() + ": " + e.what());
  }
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct RawRecord {
  std::string item;
  std::int64_t timestamp;
  std::size_t line;
};

}  // namespace

InteractionLog parse_interactions(std::istream& in, const Catalog& catalog, const std::string& source) {
  std::map<std::string, std::vector<RawRecord>> by_user;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(line_no);
    const auto fields = split_tabs(line);
    require(fields.size() == 3, ErrorKind::data,
            "parse error at " + where + ": expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    require(!fields[0].empty() && !fields[1].empty(), ErrorKind::data, "parse error at " + where + ": empty id");
    std::int64_t ts = 0;
    const auto tsf = fields[2];
    const auto [ptr, ec] = std::from_chars(tsf.data(), tsf.data() + tsf.size(), ts);
    require(ec == std::errc() && ptr == tsf.data() + tsf.size(), ErrorKind::data,
            "parse error at " + where + ": bad timestamp '" + std::string(tsf) + "'");
    std::string item(fields[1]);
    require(catalog.contains(item), ErrorKind::data,
            "referential-integrity error at " + where + ": unknown item '" + item + "'");
    by_user[std::string(fields[0])].push_back({std::move(item), ts, line_no});
  }

  InteractionLog log;
  for (auto& [user, recs] : by_user) {
    if (recs.size() < kMinInteractions) continue;
    std::stable_sort(recs.begin(), recs.end(),
                     [](const RawRecord& a, const RawRecord& b) { return a.timestamp < b.timestamp; });
    UserSequence seq;
    seq.user_id = user;
    for (auto& r : recs) {
      seq.items.push_back(std::move(r.item));
      seq.timestamps.push_back(r.timestamp);
    }
    log.users.push_back(std::move(seq));
  }
  return log;
}

InteractionLog load_interactions(const fs::path& path, const Catalog& catalog) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open interactions file " + path.string());
  return parse_interactions(in, catalog, path.filename().string());
}

SplitSpec build_splits(const InteractionLog& log) {
  SplitSpec split;
  split.users.reserve(log.users.size());
  for (const auto& u : log.users) {
    expects(u.items.size() >= kMinInteractions,
            "user '" + u.user_id + "' has fewer than 3 interactions; filter before splitting");
    UserSplit s;
    s.user_id = u.user_id;
    s.train.assign(u.items.begin(), u.items.end() - 2);
    s.valid = u.items[u.items.size() - 2];
    s.test = u.items.back();
    split.users.push_back(std::move(s));
  }
  return split;
}

namespace {

std::vector<std::string> last_n(const std::vector<std::string>& v, std::size_t end, std::size_t n) {
  const std::size_t begin = end > n ? end - n : 0;
  return {v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end)};
}

}  // namespace

InstanceSet make_training_instances(const SplitSpec& split, int max_history) {
  require(max_history >= 1, ErrorKind::config, "max history length must be >= 1");
  const auto h = static_cast<std::size_t>(max_history);
  InstanceSet out;
  for (const auto& u : split.users) {
    for (std::size_t k = 1; k < u.train.size(); ++k)
      out.train.push_back({u.user_id, last_n(u.train, k, h), u.train[k]});
    out.valid.push_back({u.user_id, last_n(u.train, u.train.size(), h), u.valid});
    auto full = u.train;
    full.push_back(u.valid);
    out.test.push_back({u.user_id, last_n(full, full.size(), h), u.test});
  }
  return out;
}

namespace {

constexpr const char* kCategories[] = {
    "Wireless Mouse", "Lab Pipette",   "Guitar Strings", "Acrylic Paint", "Watch Strap", "USB Microscope",
    "Drum Sticks",    "Sketch Pencil", "Leather Wallet", "Beaker Set",    "Synth Cable", "Canvas Panel",
};
constexpr const char* kUnits[] = {"mm", "ml", "g", "DPI", "Hz", "mAh", "cm", "oz", "V", "W", "pcs", "in"};
constexpr const char* kColors[] = {"Black", "White", "Silver", "Red", "Blue", "Green", "Gold", "Clear"};

std::string make_description(int label, Rng& rng) {
  const int nc = static_cast<int>(std::size(kCategories));
  const int nu = static_cast<int>(std::size(kUnits));
  std::ostringstream os;
  os << kCategories[label % nc];
  if (label >= nc) os << " Mk" << (label / nc + 1);
  // Cluster-specific attribute units with item-specific values.
  for (int a = 0; a < 3; ++a) {
    const int unit = (label * 3 + a) % nu;
    os << ", " << (1 + rng.below(999)) << kUnits[unit];
  }
  os << ", Model " << static_cast<char>('A' + label % 26) << '-' << rng.below(10000);
  os << ", " << kColors[rng.below(std::size(kColors))];
  return os.str();
}

}  // namespace

SyntheticCorpus synthesize_corpus(const SyntheticCorpusSpec& spec) {
  require(spec.n_clusters >= 1 && spec.n_items >= spec.n_clusters, ErrorKind::config,
          "synthetic corpus needs n_items >= n_clusters >= 1");
  require(spec.n_users >= 1, ErrorKind::config, "synthetic corpus needs at least one user");
  require(spec.min_length >= static_cast<int>(kMinInteractions) && spec.max_length >= spec.min_length,
          ErrorKind::config, "synthetic sequence lengths must satisfy 3 <= min <= max");
  require(spec.advance_prob >= 0 && spec.stay_prob >= 0 && spec.advance_prob + spec.stay_prob <= 1.0,
          ErrorKind::config, "advance_prob + stay_prob must lie in [0, 1]");

  Rng rng(spec.seed);
  SyntheticCorpus out;
  // Balanced cluster assignment, then shuffled so ids carry no label signal.
  for (int i = 0; i < spec.n_items; ++i) out.item_labels.push_back(i % spec.n_clusters);
  rng.shuffle(out.item_labels);
  std::vector<std::vector<int>> members(static_cast<std::size_t>(spec.n_clusters));
  for (int i = 0; i < spec.n_items; ++i) {
    out.item_ids.push_back(embedstore::synthetic_item_id(i));
    members[static_cast<std::size_t>(out.item_labels[static_cast<std::size_t>(i)])].push_back(i);
  }
  for (int i = 0; i < spec.n_items; ++i)
    out.descriptions.push_back(make_description(out.item_labels[static_cast<std::size_t>(i)], rng));

  // Zipf weights over each cluster's member list.
  std::vector<std::vector<double>> cdf(members.size());
  for (std::size_t c = 0; c < members.size(); ++c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < members[c].size(); ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), spec.popularity_skew);
      cdf[c].push_back(acc);
    }
    for (auto& v : cdf[c]) v /= acc;
  }
  auto pick_item = [&](int cluster) {
    const auto& cd = cdf[static_cast<std::size_t>(cluster)];
    const double u = rng.uniform();
    const auto r = static_cast<std::size_t>(std::upper_bound(cd.begin(), cd.end(), u) - cd.begin());
    return members[static_cast<std::size_t>(cluster)][std::min(r, cd.size() - 1)];
  };

  std::int64_t clock = 1'600'000'000;
  for (int u = 0; u < spec.n_users; ++u) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "u%04d", u);
    UserSequence seq;
    seq.user_id = buf;
    const int len =
        spec.min_length + static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.max_length - spec.min_length + 1)));
    int cluster = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_clusters)));
    for (int t = 0; t < len; ++t) {
      if (t > 0) {
        const double r = rng.uniform();
        if (r < spec.advance_prob)
          cluster = (cluster + 1) % spec.n_clusters;
        else if (r >= spec.advance_prob + spec.stay_prob)
          cluster = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_clusters)));
      }
      seq.items.push_back(out.item_ids[static_cast<std::size_t>(pick_item(cluster))]);
      clock += 1 + static_cast<std::int64_t>(rng.below(3600));
      seq.timestamps.push_back(clock);
    }
    out.log.users.push_back(std::move(seq));
  }
  return out;
}

std::string to_tsv(const InteractionLog& log) {
  std::string s;
  for (const auto& u : log.users)
    for (std::size_t i = 0; i < u.items.size(); ++i)
      s += u.user_id + '\t' + u.items[i] + '\t' + std::to_string(u.timestamps[i]) + '\n';
  return s;
}

}  // namespace semid::corpus
