#include "semid/seq2seq.hpp"

#include "semid/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace semid::seq2seq {

TrainReport train(Model& model, std::span<const Example> examples, const TrainConfig& tc) {
  tc.validate();
  require(!examples.empty(), ErrorKind::data, "no training examples");
  const auto n = examples.size();
  const auto batch = std::min<std::size_t>(static_cast<std::size_t>(tc.batch_size), n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total = tc.steps > 0 ? static_cast<std::size_t>(tc.steps)
                                         : per_epoch * static_cast<std::size_t>(tc.epochs);

  AdamConfig ac;
  ac.learning_rate = tc.learning_rate;
  ac.clip_norm = tc.clip_norm;
  Adam adam(model.parameter_count(), ac);
  Rng order_rng(derive_seed(tc.seed, "seq2seq/order"));
  Rng drop_rng(derive_seed(tc.seed, "seq2seq/dropout"));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;
  std::vector<Example> mb;
  std::vector<double> grad;
  TrainReport report;
  report.loss_curve.reserve(total);
  for (std::size_t step = 0; step < total; ++step) {
    mb.clear();
    while (mb.size() < batch) {
      if (cursor == n) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      mb.push_back(examples[order[cursor++]]);
    }
    const double loss = model.loss_and_grads(mb, &grad, &drop_rng);
    if (!std::isfinite(loss))
      fail(ErrorKind::divergence, "seq2seq loss became non-finite at step " + std::to_string(step));
    adam.step(model.parameters(), grad);
    report.loss_curve.push_back(loss);
  }
  return report;
}

std::string loss_curve_csv(const std::vector<double>& curve) {
  std::ostringstream os;
  os << "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) os << i << ',' << format_fixed(curve[i], 6) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------

ItemTrie ItemTrie::build(const std::vector<std::pair<std::string, std::vector<int>>>& catalog) {
  ItemTrie t;
  t.nodes_.emplace_back();
  for (const auto& [id, tokens] : catalog) {
    require(!tokens.empty(), ErrorKind::data, "item '" + id + "' has an empty token sequence");
    int cur = 0;
    for (int tok : tokens) {
      require(t.nodes_[static_cast<std::size_t>(cur)].item < 0, ErrorKind::data,
              "item '" + id + "' extends the token sequence of another item");
      auto& children = t.nodes_[static_cast<std::size_t>(cur)].children;
      const auto it = children.find(tok);
      if (it != children.end()) {
        cur = it->second;
      } else {
        const int next = static_cast<int>(t.nodes_.size());
        children.emplace(tok, next);
        t.nodes_.emplace_back();
        cur = next;
      }
    }
    auto& leaf = t.nodes_[static_cast<std::size_t>(cur)];
    require(leaf.item < 0, ErrorKind::data,
            "item '" + id + "' duplicates the token sequence of '" +
                (leaf.item >= 0 ? t.items_[static_cast<std::size_t>(leaf.item)] : std::string()) + "'");
    require(leaf.children.empty(), ErrorKind::data, "item '" + id + "' is a prefix of another item");
    leaf.item = static_cast<int>(t.items_.size());
    t.items_.push_back(id);
    t.max_depth_ = std::max(t.max_depth_, tokens.size());
  }
  return t;
}

bool ItemTrie::contains(std::span<const int> tokens) const {
  if (nodes_.empty()) return false;
  int cur = 0;
  for (int tok : tokens) {
    const auto& ch = nodes_[static_cast<std::size_t>(cur)].children;
    const auto it = ch.find(tok);
    if (it == ch.end()) return false;
    cur = it->second;
  }
  return nodes_[static_cast<std::size_t>(cur)].item >= 0;
}

namespace {

struct Beam {
  int node = 0;
  std::vector<int> tokens;
  double log_prob = 0.0;
};

/// Marks nodes whose subtree holds at least one item that is not excluded.
std::vector<char> live_nodes(const ItemTrie& trie, const std::set<std::string>* exclude) {
  std::vector<char> live;
  std::vector<int> stack{0};
  std::vector<int> order;
  while (!stack.empty()) {
    const int n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& [tok, child] : trie.node(n).children) stack.push_back(child);
  }
  live.assign(order.size(), 0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = trie.node(*it);
    if (node.item >= 0) {
      const auto& id = trie.item_ids()[static_cast<std::size_t>(node.item)];
      live[static_cast<std::size_t>(*it)] = !(exclude && exclude->count(id));
    }
    for (const auto& [tok, child] : node.children)
      if (live[static_cast<std::size_t>(child)]) live[static_cast<std::size_t>(*it)] = 1;
  }
  return live;
}

}  // namespace

std::vector<Hypothesis> beam_decode(const Model& model, std::span<const int> context, const BeamConfig& config,
                                    const ItemTrie& trie, const std::set<std::string>* exclude) {
  expects(!trie.empty(), "beam search over an empty item trie");
  require(config.beam >= 1, ErrorKind::config, "beam width must be >= 1");
  expects(static_cast<std::size_t>(config.max_length) >= trie.max_depth(),
          "max decode length " + std::to_string(config.max_length) + " is shorter than the deepest item (" +
              std::to_string(trie.max_depth()) + ")");

  const auto live = live_nodes(trie, exclude);
  const auto beam = static_cast<std::size_t>(config.beam);
  const Matrix memory = model.encode(context);

  std::vector<Hypothesis> finished;
  std::vector<Beam> beams{Beam{}};
  if (!live[0]) return finished;
  for (int depth = 0; depth < config.max_length && !beams.empty(); ++depth) {
    std::vector<Beam> pool;
    for (const auto& b : beams) {
      const Vector lp = model.next_log_probs(memory, b.tokens);
      for (const auto& [tok, child] : trie.node(b.node).children) {
        if (!live[static_cast<std::size_t>(child)]) continue;
        Beam nb{child, b.tokens, b.log_prob + lp(tok)};
        nb.tokens.push_back(tok);
        pool.push_back(std::move(nb));
      }
    }
    auto key = [&](const Beam& b) {
      const auto& n = trie.node(b.node);
      return n.item >= 0 ? trie.item_ids()[static_cast<std::size_t>(n.item)] : std::string();
    };
    std::sort(pool.begin(), pool.end(), [&](const Beam& a, const Beam& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (key(a) != key(b)) return key(a) < key(b);
      return a.tokens < b.tokens;
    });
    if (pool.size() > beam) pool.resize(beam);
    beams.clear();
    for (auto& b : pool) {
      const auto& n = trie.node(b.node);
      if (n.item >= 0)
        finished.push_back({trie.item_ids()[static_cast<std::size_t>(n.item)], b.log_prob, std::move(b.tokens)});
      else
        beams.push_back(std::move(b));
    }
  }
  std::sort(finished.begin(), finished.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.item_id < b.item_id;
  });
  if (finished.size() > beam) finished.resize(beam);
  return finished;
}

}  // namespace semid::seq2seq
