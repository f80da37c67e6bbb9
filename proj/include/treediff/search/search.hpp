#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "treediff/counters.hpp"
#include "treediff/dual/dual.hpp"
#include "treediff/verifier/verifier.hpp"

namespace treediff::search {

using diffusion::LatentState;
using diffusion::NoiseStream;
using graph::Graph;

enum class Selection { UCB1, PUCT };

std::string to_string(Selection s);
Selection selection_from_string(const std::string& s);

struct SearchConfig {
  std::size_t D_max = 10;
  std::size_t K = 4;
  std::size_t N_r = 4;
  std::size_t M = 1;
  double c_ucb = std::sqrt(2.0);
  double sigma_k = 0.1;
  Selection selection = Selection::UCB1;
  /// Start step; 0 means T.
  std::size_t t_s = 0;
  dual::GuidanceConfig guidance;

  void validate() const;
};

struct TreeNode {
  LatentState latent;
  Graph structure;  // refined, always valid
  Graph decoded;    // Dec(z_t, t), what the verifier sees
  std::size_t k_from_parent = 0;
  double Q = 0.0;
  std::uint64_t N = 0;
  NoiseStream stream;
  std::uint64_t id = 0;  // creation order
  std::vector<std::unique_ptr<TreeNode>> children;

  std::size_t t() const { return latent.t; }
  std::size_t subtree_size() const;
};

/// Everything expand() needs besides the node.
struct SearchModels {
  dual::Models dual;
  const verifier::VerifierModel* verifier = nullptr;
};

/// k_base = t / D_rem; k = round(N(k_base, (sigma_k k_base)^2)) clipped to [1, t].
std::size_t sample_step_length(std::size_t t, std::size_t D_rem, double sigma_k,
                               std::mt19937_64& rng);

double ucb1_score(const TreeNode& child, std::uint64_t parent_n, double c);
double puct_score(const TreeNode& child, std::uint64_t parent_n, std::size_t siblings, double c);

/// Root-to-leaf descent. Unvisited children first (creation order), then the
/// highest score with ties broken by creation order. Stops at a childless node or t == 0.
std::vector<TreeNode*> select(TreeNode& root, const SearchConfig& cfg);

struct ExpansionRecord {
  std::uint64_t leaf_id = 0;
  std::size_t leaf_t = 0;
  std::vector<std::size_t> ks;
  std::vector<double> scores;
};

/// Adds up to K children to `leaf` (child 0 inherits the leaf's noise stream,
/// child i > 0 forks it), each scored by the verifier with Q = score, N = 1.
/// Throws ContractViolation on a terminal or already expanded leaf.
ExpansionRecord expand(TreeNode& leaf, const SearchConfig& cfg, const SearchModels& models,
                       std::size_t D_rem, std::mt19937_64& rng, std::uint64_t& next_id,
                       CallCounters& counters);

/// N += 1, Q += (value - Q) / N for every node on the path.
void backpropagate(const std::vector<TreeNode*>& path, double value);

/// Index of the child with the highest Q (ties: higher N, then creation order).
std::size_t best_child(const TreeNode& root);

struct CommitResult {
  std::unique_ptr<TreeNode> root;
  std::vector<std::unique_ptr<TreeNode>> retained;  // next-best siblings, at most M - 1
};

/// Detaches the best child as the new root. Throws ContractViolation if childless.
CommitResult commit(std::unique_ptr<TreeNode> root, std::size_t M);

struct RoundRecord {
  std::size_t round = 0;
  std::size_t root_t = 0;
  std::size_t depth_budget = 0;
  std::vector<std::vector<std::uint64_t>> paths;
  std::vector<ExpansionRecord> expansions;
  std::uint64_t committed_id = 0;
  std::size_t committed_k = 0;
  double committed_q = 0.0;
  CallCounters counters;  // cumulative at the end of the round
  std::uint64_t full_rollouts = 0;
  std::size_t live_nodes = 0;
};

struct SearchTrace {
  std::vector<RoundRecord> rounds;
  CallCounters counters;
  std::uint64_t full_rollouts = 0;

  /// One JSON object per round.
  std::string to_jsonl() const;
};

nlohmann::json to_json(const RoundRecord& r);

struct SearchResult {
  Graph graph;       // Dec(z_0, 0)
  Graph structure;   // refined structure of the final node
  LatentState final_state;
  SearchTrace trace;
};

/// Full search from z_T = stream(seed).at(T + 1): rounds of N_r iterations,
/// each followed by a commit, until t == 0.
SearchResult run_search(const SearchConfig& cfg, const SearchModels& models, std::uint64_t seed);

}  // namespace treediff::search
