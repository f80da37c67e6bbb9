#include "treediff/search/search.hpp"

#include <algorithm>
#include <sstream>

namespace treediff::search {

std::string to_string(Selection s) { return s == Selection::UCB1 ? "ucb1" : "puct"; }

Selection selection_from_string(const std::string& s) {
  if (s == "ucb1" || s == "ucb") return Selection::UCB1;
  if (s == "puct") return Selection::PUCT;
  throw ConfigError("unknown selection rule: " + s);
}

void SearchConfig::validate() const {
  if (D_max < 1 || K < 1 || N_r < 1 || M < 1) {
    throw ConfigError("search config: D_max, K, N_r and M must be >= 1");
  }
  if (sigma_k < 0.0) throw ConfigError("search config: sigma_k must be >= 0");
  if (c_ucb < 0.0) throw ConfigError("search config: c_ucb must be >= 0");
  guidance.validate();
}

std::size_t TreeNode::subtree_size() const {
  std::size_t s = 1;
  for (const auto& c : children) s += c->subtree_size();
  return s;
}

std::size_t sample_step_length(std::size_t t, std::size_t D_rem, double sigma_k,
                               std::mt19937_64& rng) {
  if (t < 1) throw ContractViolation("sample_step_length: t must be >= 1");
  if (D_rem < 1) throw ContractViolation("sample_step_length: D_rem must be >= 1");
  const double base = static_cast<double>(t) / static_cast<double>(D_rem);
  double draw = base;
  if (sigma_k > 0.0) draw = std::normal_distribution<double>(base, sigma_k * base)(rng);
  const double r = std::round(draw);
  if (r < 1.0) return 1;
  if (r > static_cast<double>(t)) return t;
  return static_cast<std::size_t>(r);
}

double ucb1_score(const TreeNode& child, std::uint64_t parent_n, double c) {
  const double pn = static_cast<double>(std::max<std::uint64_t>(parent_n, 1));
  return child.Q + c * std::sqrt(std::log(pn) / static_cast<double>(child.N));
}

double puct_score(const TreeNode& child, std::uint64_t parent_n, std::size_t siblings, double c) {
  const double prior = 1.0 / static_cast<double>(siblings);
  return child.Q + c * prior * std::sqrt(static_cast<double>(parent_n)) /
                       (1.0 + static_cast<double>(child.N));
}

std::vector<TreeNode*> select(TreeNode& root, const SearchConfig& cfg) {
  std::vector<TreeNode*> path{&root};
  TreeNode* cur = &root;
  while (!cur->children.empty() && cur->t() > 0) {
    TreeNode* next = nullptr;
    for (const auto& c : cur->children) {
      if (c->N == 0) {
        next = c.get();
        break;
      }
    }
    if (next == nullptr) {
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& c : cur->children) {
        const double s = cfg.selection == Selection::UCB1
                             ? ucb1_score(*c, cur->N, cfg.c_ucb)
                             : puct_score(*c, cur->N, cur->children.size(), cfg.c_ucb);
        if (next == nullptr || s > best) {
          best = s;
          next = c.get();
        }
      }
    }
    path.push_back(next);
    cur = next;
  }
  return path;
}

ExpansionRecord expand(TreeNode& leaf, const SearchConfig& cfg, const SearchModels& models,
                       std::size_t D_rem, std::mt19937_64& rng, std::uint64_t& next_id,
                       CallCounters& counters) {
  if (leaf.t() == 0) throw ContractViolation("expand: terminal node (t = 0)");
  if (!leaf.children.empty()) throw ContractViolation("expand: node already has children");
  ExpansionRecord rec;
  rec.leaf_id = leaf.id;
  rec.leaf_t = leaf.t();
  for (std::size_t i = 0; i < cfg.K; ++i) {
    const std::size_t k = sample_step_length(leaf.t(), D_rem, cfg.sigma_k, rng);
    auto child = std::make_unique<TreeNode>();
    child->stream = i == 0 ? leaf.stream : leaf.stream.fork(i);
    auto step = dual::dual_space_macro_step(leaf.latent, k, cfg.guidance, models.dual,
                                            child->stream, &counters);
    child->latent = std::move(step.state);
    child->decoded = std::move(step.decoded);
    child->structure = std::move(step.structure);
    child->k_from_parent = k;
    child->id = next_id++;
    const double v = verifier::predict_value(*models.verifier, child->latent, child->decoded);
    ++counters.verifier_calls;
    if (!std::isfinite(v)) throw EvaluationError("expand: verifier returned a non-finite value");
    child->Q = v;
    child->N = 1;
    rec.ks.push_back(k);
    rec.scores.push_back(v);
    leaf.children.push_back(std::move(child));
  }
  return rec;
}

void backpropagate(const std::vector<TreeNode*>& path, double value) {
  for (TreeNode* n : path) {
    n->N += 1;
    n->Q += (value - n->Q) / static_cast<double>(n->N);
  }
}

namespace {

// Strict "a ranks before b" under the commit order.
bool ranks_before(const TreeNode& a, const TreeNode& b) {
  if (a.Q != b.Q) return a.Q > b.Q;
  if (a.N != b.N) return a.N > b.N;
  return a.id < b.id;
}

}  // namespace

std::size_t best_child(const TreeNode& root) {
  if (root.children.empty()) throw ContractViolation("commit: root has no children");
  std::size_t best = 0;
  for (std::size_t i = 1; i < root.children.size(); ++i) {
    if (ranks_before(*root.children[i], *root.children[best])) best = i;
  }
  return best;
}

CommitResult commit(std::unique_ptr<TreeNode> root, std::size_t M) {
  if (!root || root->children.empty()) throw ContractViolation("commit: root has no children");
  auto kids = std::move(root->children);
  std::stable_sort(kids.begin(), kids.end(),
                   [](const auto& a, const auto& b) { return ranks_before(*a, *b); });
  CommitResult out;
  out.root = std::move(kids.front());
  for (std::size_t i = 1; i < kids.size() && i < M; ++i) out.retained.push_back(std::move(kids[i]));
  return out;
}

nlohmann::json to_json(const RoundRecord& r) {
  nlohmann::json exps = nlohmann::json::array();
  for (const auto& e : r.expansions) {
    exps.push_back({{"leaf", e.leaf_id}, {"leaf_t", e.leaf_t}, {"k", e.ks}, {"scores", e.scores}});
  }
  return {{"round", r.round},
          {"root_t", r.root_t},
          {"depth_budget", r.depth_budget},
          {"paths", r.paths},
          {"expansions", exps},
          {"committed", {{"id", r.committed_id}, {"k", r.committed_k}, {"q", r.committed_q}}},
          {"counters", treediff::to_json(r.counters)},
          {"full_rollouts", r.full_rollouts},
          {"live_nodes", r.live_nodes}};
}

std::string SearchTrace::to_jsonl() const {
  std::ostringstream os;
  for (const auto& r : rounds) os << to_json(r).dump() << '\n';
  return os.str();
}

SearchResult run_search(const SearchConfig& cfg, const SearchModels& models, std::uint64_t seed) {
  cfg.validate();
  const auto& den = *models.dual.denoiser;
  const std::size_t T = den.schedule.T;
  const std::size_t ts = cfg.t_s == 0 ? T : std::min(cfg.t_s, T);
  std::mt19937_64 rng(diffusion::mix64(seed ^ 0x7465737473656564ULL));
  std::uint64_t next_id = 0;

  auto root = std::make_unique<TreeNode>();
  root->stream = NoiseStream(seed);
  root->latent = {root->stream.at(T + 1, den.dz), ts};
  root->id = next_id++;

  SearchResult result;
  std::vector<std::unique_ptr<TreeNode>> retained;
  std::size_t D = cfg.D_max;
  CallCounters counters;
  for (std::size_t round = 0; root->t() > 0; ++round) {
    RoundRecord rec;
    rec.round = round;
    rec.root_t = root->t();
    rec.depth_budget = D;
    for (std::size_t it = 0; it < cfg.N_r; ++it) {
      auto path = select(*root, cfg);
      std::vector<std::uint64_t> ids;
      for (auto* n : path) ids.push_back(n->id);
      rec.paths.push_back(std::move(ids));
      TreeNode& leaf = *path.back();
      if (leaf.t() == 0) {
        backpropagate(path, leaf.Q);
        continue;
      }
      auto e = expand(leaf, cfg, models, D, rng, next_id, counters);
      for (double v : e.scores) backpropagate(path, v);
      rec.expansions.push_back(std::move(e));
    }
    auto c = commit(std::move(root), cfg.M);
    root = std::move(c.root);
    retained = std::move(c.retained);
    D = std::max<std::size_t>(D - 1, 1);
    rec.committed_id = root->id;
    rec.committed_k = root->k_from_parent;
    rec.committed_q = root->Q;
    rec.counters = counters;
    rec.live_nodes = root->subtree_size();
    for (const auto& r : retained) rec.live_nodes += r->subtree_size();
    result.trace.rounds.push_back(std::move(rec));
  }
  result.trace.counters = counters;
  result.final_state = root->latent;
  result.graph = models.dual.vae->decode(root->latent);
  result.structure = root->structure;
  return result;
}

}  // namespace treediff::search
