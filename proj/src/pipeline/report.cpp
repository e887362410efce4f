#include "semid/pipeline.hpp"

#include "semid/error.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

namespace semid::pipeline {

using nlohmann::json;

namespace {

enum class Format { json, csv, table };

Format parse_format(std::string_view f) {
  if (f == "json") return Format::json;
  if (f == "csv") return Format::csv;
  if (f == "table") return Format::table;
  fail(ErrorKind::config, "unknown report format '" + std::string(f) + "' (expected json, csv or table)");
}

std::vector<std::string> metric_names(const std::vector<int>& cutoffs) {
  std::vector<std::string> names;
  for (int k : cutoffs) names.push_back("Recall@" + std::to_string(k));
  for (int k : cutoffs) names.push_back("NDCG@" + std::to_string(k));
  return names;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return s;
}

/// Column-aligned text table; the first column is left-aligned.
std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  auto cells = [](const std::string& s) {
    // "±" is two bytes but one column.
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], cells(r[i]));
  }
  std::ostringstream os;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    const auto& r = rows[ri];
    std::string line;
    for (std::size_t i = 0; i < r.size(); ++i) {
      const auto pad = std::string(width[i] - cells(r[i]), ' ');
      if (i) line += "  ";
      line += i == 0 ? r[i] + pad : pad + r[i];
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << '\n';
    if (ri == 0) {
      std::size_t total = 0;
      for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i ? 2 : 0);
      os << std::string(total, '-') << '\n';
    }
  }
  return os.str();
}

}  // namespace

std::string emit_report(const metrics::EvalReport& report, std::string_view format) {
  const Format f = parse_format(format);
  expects(!report.seeds.empty(), "cannot emit a report without seeds");
  const auto names = metric_names(report.cutoffs);
  switch (f) {
    case Format::json:
      return report.to_json().dump(2) + "\n";
    case Format::csv: {
      std::ostringstream os;
      os << "variant,seed";
      for (const auto& n : names) os << ',' << lower(n);
      os << '\n';
      for (const auto& s : report.seeds) {
        os << report.variant << ',' << s.seed;
        for (int k : report.cutoffs) os << ',' << format_fixed(s.recall.at(k), 6);
        for (int k : report.cutoffs) os << ',' << format_fixed(s.ndcg.at(k), 6);
        os << '\n';
      }
      for (const char* stat : {"mean", "std"}) {
        const bool mean = std::string(stat) == "mean";
        os << report.variant << ',' << stat;
        for (int k : report.cutoffs) os << ',' << format_fixed(mean ? report.recall(k).mean : report.recall(k).std, 6);
        for (int k : report.cutoffs) os << ',' << format_fixed(mean ? report.ndcg(k).mean : report.ndcg(k).std, 6);
        os << '\n';
      }
      return os.str();
    }
    case Format::table: {
      std::vector<std::vector<std::string>> rows;
      std::vector<std::string> header{"Variant"};
      header.insert(header.end(), names.begin(), names.end());
      rows.push_back(header);
      std::vector<std::string> row{report.variant};
      auto cell = [](metrics::Summary s) { return format_fixed(s.mean, 4) + " ± " + format_fixed(s.std, 4); };
      for (int k : report.cutoffs) row.push_back(cell(report.recall(k)));
      for (int k : report.cutoffs) row.push_back(cell(report.ndcg(k)));
      rows.push_back(row);
      std::ostringstream os;
      os << render_table(rows);
      os << "seeds: " << report.seeds.size() << ", users: " << report.users.size() << '\n';
      return os.str();
    }
  }
  return {};
}

std::map<std::string, double> relative_change(const HarnessRow& high, const HarnessRow& low,
                                              const std::vector<int>& cutoffs) {
  std::map<std::string, double> out;
  auto rel = [](double lo, double hi) { return hi == 0.0 ? 0.0 : 100.0 * (lo - hi) / hi; };
  for (int k : cutoffs) {
    out["recall@" + std::to_string(k)] = rel(low.report.recall(k).mean, high.report.recall(k).mean);
    out["ndcg@" + std::to_string(k)] = rel(low.report.ndcg(k).mean, high.report.ndcg(k).mean);
  }
  return out;
}

HarnessResult run_resolution_harness(const ExperimentConfig& config, const std::vector<int>& resolutions) {
  require(!resolutions.empty(), ErrorKind::config, "resolution harness needs at least one resolution");
  const auto used = config.used_modalities();
  require(std::ranges::count(used, Modality::ocr_text) == 1, ErrorKind::config,
          "resolution harness needs the fusion strategy to use the ocr_text modality");
  const auto& src = config.modalities.at(Modality::ocr_text);
  require(src.kind == ModalitySource::Kind::render, ErrorKind::config,
          "resolution harness needs ocr_text sourced from the renderer");
  std::set<int> unique;
  for (int r : resolutions) {
    require(std::ranges::count(kSupportedResolutions, r) == 1, ErrorKind::config,
            "unsupported resolution " + std::to_string(r) + " (supported: 256, 512, 1024)");
    require(r <= src.render.canvas && src.render.canvas % r == 0, ErrorKind::config,
            "resolution " + std::to_string(r) + " does not divide canvas " + std::to_string(src.render.canvas));
    require(unique.insert(r).second, ErrorKind::config, "resolution " + std::to_string(r) + " listed twice");
  }

  HarnessResult result;
  result.variant = config.variant();
  result.cutoffs = config.cutoffs;
  std::sort(result.cutoffs.begin(), result.cutoffs.end());
  result.cutoffs.erase(std::unique(result.cutoffs.begin(), result.cutoffs.end()), result.cutoffs.end());
  for (auto it = unique.rbegin(); it != unique.rend(); ++it) {
    const int r = *it;
    const auto run_cfg = config.with({{"modalities", {{"ocr_text", {{"resolution", r}}}}},
                                      {"out", (fs::path(config.out) / ("res" + std::to_string(r))).string()}});
    result.rows.push_back({r, run_experiment(run_cfg)});
  }
  return result;
}

std::string emit_harness(const HarnessResult& result, std::string_view format) {
  const Format f = parse_format(format);
  expects(!result.rows.empty(), "harness result has no rows");
  const auto names = metric_names(result.cutoffs);
  auto row_values = [&](const HarnessRow& r) {
    std::vector<double> v;
    for (int k : result.cutoffs) v.push_back(r.report.recall(k).mean);
    for (int k : result.cutoffs) v.push_back(r.report.ndcg(k).mean);
    return v;
  };
  auto change_values = [&](const HarnessRow& low) {
    const auto rc = relative_change(result.rows.front(), low, result.cutoffs);
    std::vector<double> v;
    for (const auto& n : names) v.push_back(rc.at(lower(n)));
    return v;
  };

  switch (f) {
    case Format::json: {
      json rows = json::array();
      for (const auto& r : result.rows) {
        json metrics_j = json::object();
        const auto v = row_values(r);
        for (std::size_t i = 0; i < names.size(); ++i) metrics_j[lower(names[i])] = v[i];
        rows.push_back({{"resolution", r.resolution}, {"metrics", metrics_j}, {"config_digest", r.report.config_digest}});
      }
      json changes = json::array();
      for (std::size_t i = 1; i < result.rows.size(); ++i) {
        json c = {{"high", result.rows.front().resolution}, {"low", result.rows[i].resolution}};
        for (const auto& [k, v] : relative_change(result.rows.front(), result.rows[i], result.cutoffs)) c["change"][k] = v;
        changes.push_back(c);
      }
      return json{{"variant", result.variant}, {"cutoffs", result.cutoffs}, {"rows", rows}, {"relative_change", changes}}
                 .dump(2) +
             "\n";
    }
    case Format::csv: {
      std::ostringstream os;
      os << "variant,row";
      for (const auto& n : names) os << ',' << lower(n);
      os << '\n';
      for (const auto& r : result.rows) {
        os << result.variant << ',' << r.resolution;
        for (double v : row_values(r)) os << ',' << format_fixed(v, 6);
        os << '\n';
      }
      for (std::size_t i = 1; i < result.rows.size(); ++i) {
        os << result.variant << ",Rel. Change (%)";
        if (result.rows.size() > 2) os << ' ' << result.rows[i].resolution << " vs " << result.rows.front().resolution;
        for (double v : change_values(result.rows[i])) os << ',' << format_fixed(v, 2);
        os << '\n';
      }
      return os.str();
    }
    case Format::table: {
      std::vector<std::vector<std::string>> rows;
      std::vector<std::string> header{"Setting", "Resolution"};
      header.insert(header.end(), names.begin(), names.end());
      rows.push_back(header);
      for (std::size_t i = 0; i < result.rows.size(); ++i) {
        std::vector<std::string> row{i == 0 ? result.variant : "", std::to_string(result.rows[i].resolution)};
        for (double v : row_values(result.rows[i])) row.push_back(format_fixed(v, 4));
        rows.push_back(row);
      }
      for (std::size_t i = 1; i < result.rows.size(); ++i) {
        std::string label = "Rel. Change (%)";
        if (result.rows.size() > 2)
          label += " " + std::to_string(result.rows[i].resolution) + " vs " + std::to_string(result.rows.front().resolution);
        std::vector<std::string> row{"", label};
        for (double v : change_values(result.rows[i])) row.push_back(format_fixed(v, 2));
        rows.push_back(row);
      }
      return render_table(rows);
    }
  }
  return {};
}

}  // namespace semid::pipeline
