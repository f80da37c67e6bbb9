#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "treediff/nn/tensor.hpp"

namespace treediff::graph {

inline constexpr int kNodeCategories = 4;
inline constexpr int kEdgeCategories = 3;  // 0 absent, 1 single, 2 double
inline constexpr std::size_t kMinNodes = 4;
inline constexpr std::size_t kMaxNodes = 12;

/// Small labelled undirected graph with a symmetric categorical edge matrix.
class Graph {
 public:
  Graph() = default;
  explicit Graph(std::size_t n, std::vector<int> node_labels = {});

  std::size_t n() const { return n_; }
  const std::vector<int>& node_labels() const { return labels_; }
  int label(std::size_t i) const { return labels_[i]; }
  void set_label(std::size_t i, int c);

  int edge(std::size_t i, std::size_t j) const { return edges_[i * n_ + j]; }
  /// Sets both (i,j) and (j,i). Throws ContractViolation for i == j or a bad label.
  void set_edge(std::size_t i, std::size_t j, int label);

  /// Sum of incident edge labels (a double bond counts 2).
  int weighted_degree(std::size_t i) const;
  std::vector<int> weighted_degrees() const;
  std::size_t edge_count() const;

  /// Throws ContractViolation unless the matrix is symmetric with zero diagonal
  /// and every label is in range.
  void check_well_formed() const;

  friend bool operator==(const Graph&, const Graph&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<int> labels_;
  std::vector<int> edges_;
};

struct ValidityRule {
  std::array<int, kNodeCategories> caps{1, 2, 3, 4};

  int cap(int category) const { return caps[static_cast<std::size_t>(category)]; }
  void validate() const;
};

struct ValidityReport {
  bool valid = true;
  std::vector<std::size_t> violations;  // nodes whose weighted degree exceeds the cap
};

ValidityReport check_validity(const Graph& g, const ValidityRule& rule = {});
bool is_valid(const Graph& g, const ValidityRule& rule = {});

std::size_t triangle_count(const Graph& g);
/// Triangles / C(n,3); 0 when n < 3.
double triangle_density(const Graph& g);
/// Fraction of nodes whose weighted degree equals the cap of their category.
double saturation_fraction(const Graph& g, const ValidityRule& rule = {});

/// R(G) = w_v * valid + w_t * triangle_density + w_s * saturation.
struct RewardSpec {
  double validity = 1.0;
  double triangle = 0.5;
  double saturation = 0.5;

  void validate() const;
  double total_weight() const { return validity + triangle + saturation; }
};

double reward(const Graph& g, const RewardSpec& spec = {}, const ValidityRule& rule = {});

/// Structure first: a path backbone with occasional double bonds, then
/// skip-one chords while degrees stay low. Each node then gets the smallest
/// category whose cap holds its degree, bumped up one with probability 1/2.
/// Every output satisfies `rule`; sizes are uniform over 4..12.
std::vector<Graph> sample_dataset(std::size_t count, const ValidityRule& rule,
                                  std::mt19937_64& rng);

/// One-hot relaxation: x is n x 4, e is (n*n) x 3 with row i*n+j for the pair (i,j).
struct DenseGraphTensor {
  std::size_t n = 0;
  nn::Tensor x;
  nn::Tensor e;
};

DenseGraphTensor encode_dense(const Graph& g);
/// Per-slot argmax with lowest-index tie-break; edge logits of (i,j) and (j,i)
/// are averaged before the argmax and the diagonal is forced to 0.
Graph decode_dense(const DenseGraphTensor& t);

/// Fixed-width feature layout used by the latent codec:
/// [size one-hot (9) | node one-hot 12x4 | upper-triangle pair one-hot 66x3].
inline constexpr std::size_t kSizeSlots = kMaxNodes - kMinNodes + 1;
inline constexpr std::size_t kPairSlots = kMaxNodes * (kMaxNodes - 1) / 2;
inline constexpr std::size_t kNodeOffset = kSizeSlots;
inline constexpr std::size_t kPairOffset = kNodeOffset + kMaxNodes * kNodeCategories;
inline constexpr std::size_t kFlatDim = kPairOffset + kPairSlots * kEdgeCategories;

/// Index of the pair (i,j), i<j, in row-major upper-triangle order of a 12-node graph.
std::size_t pair_slot(std::size_t i, std::size_t j);

std::vector<double> to_flat(const Graph& g);
/// Inverse of to_flat on relaxed values: argmax size, then decode_dense on the
/// active block. Slots beyond n are ignored.
Graph from_flat(std::span<const double> v);

/// Degree histogram (bins 0..8, last bin open) ⊕ label histogram ⊕ triangle density.
std::vector<double> mmd_features(const Graph& g);
/// Biased squared MMD with a Gaussian kernel of the given bandwidth.
double mmd_distance(const std::vector<Graph>& a, const std::vector<Graph>& b,
                    double bandwidth = 1.0);

nlohmann::json to_json(const Graph& g);
Graph graph_from_json(const nlohmann::json& j);

}  // namespace treediff::graph
