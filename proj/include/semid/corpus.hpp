#pragma once

#include "semid/common.hpp"

#include <cstdint>
#include <istream>
#include <set>
#include <string>
#include <vector>

namespace semid::corpus {

struct UserSequence {
  std::string user_id;
  std::vector<std::string> items;       // ascending by timestamp
  std::vector<std::int64_t> timestamps;
};

/// Users sorted by id; per-user records sorted by timestamp (stable on ties).
struct InteractionLog {
  std::vector<UserSequence> users;

  std::size_t record_count() const;
};

inline constexpr std::size_t kMinInteractions = 3;

using Catalog = std::set<std::string>;

/// Catalog file: JSON list of item id strings.
Catalog load_catalog(const fs::path& path);

/// TSV `user<TAB>item<TAB>timestamp`. Users with fewer than three
/// interactions are dropped. Throws data errors naming the offending line.
InteractionLog parse_interactions(std::istream& in, const Catalog& catalog, const std::string& source = "<stream>");
InteractionLog load_interactions(const fs::path& path, const Catalog& catalog);

struct UserSplit {
  std::string user_id;
  std::vector<std::string> train;  // all but the last two
  std::string valid;               // second most recent
  std::string test;                // most recent
};

struct SplitSpec {
  std::vector<UserSplit> users;
};

SplitSpec build_splits(const InteractionLog& log);

struct TrainingInstance {
  std::string user_id;
  std::vector<std::string> history;  // 1..H items, oldest first
  std::string target;
};

struct InstanceSet {
  std::vector<TrainingInstance> train;
  std::vector<TrainingInstance> valid;
  std::vector<TrainingInstance> test;
};

/// Sliding-window next-item instances over each train prefix. The validation
/// instance conditions on the train prefix, the test instance on the train
/// prefix plus the validation item, so every target directly follows its
/// history. All histories keep only their last `max_history` items.
InstanceSet make_training_instances(const SplitSpec& split, int max_history);

struct SyntheticCorpusSpec {
  int n_items = 200;
  int n_users = 300;
  int n_clusters = 8;
  int min_length = 6;
  int max_length = 14;
  double advance_prob = 0.75;  // next cluster = current + 1
  double stay_prob = 0.15;     // next cluster = current; remainder uniform
  double popularity_skew = 1.0;  // Zipf exponent for item choice inside a cluster
  std::uint64_t seed = 0;
};

/// Items "i0000".. with cluster labels, users "u0000".. whose sequences walk
/// the clusters as a Markov chain; timestamps are increasing integers.
struct SyntheticCorpus {
  InteractionLog log;
  std::vector<std::string> item_ids;
  std::vector<int> item_labels;
  std::vector<std::string> descriptions;  // attribute-style product text per item
};

SyntheticCorpus synthesize_corpus(const SyntheticCorpusSpec& spec);

/// Serializes the log back to TSV in user/record order.
std::string to_tsv(const InteractionLog& log);

}  // namespace semid::corpus
