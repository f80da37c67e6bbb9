#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "treediff/nn/params.hpp"
#include "treediff/nn/tensor.hpp"

namespace treediff::nn {

/// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

/// Stacked batch of small graphs for the message-passing ops.
///
/// Nodes of graph g occupy rows [node_offset[g], node_offset[g+1]); unordered
/// node pairs (i<j, row-major) occupy rows [pair_offset[g], pair_offset[g+1]).
/// `pair_label` holds the categorical edge label of every pair.
struct GraphBatch {
  std::vector<std::size_t> node_offset{0};
  std::vector<std::size_t> pair_offset{0};
  std::vector<int> pair_label;

  std::size_t graphs() const { return node_offset.size() - 1; }
  std::size_t nodes() const { return node_offset.back(); }
  std::size_t pairs() const { return pair_offset.back(); }
  std::size_t graph_size(std::size_t g) const { return node_offset[g + 1] - node_offset[g]; }

  /// Appends a graph with `n` nodes; `labels` lists the n*(n-1)/2 pair labels.
  void append(std::size_t n, std::span<const int> labels);
};

/// Reverse-mode recording of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. Parameter leaves are cached
/// per ParamStore slot; `backward` adds their gradients into the store.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(ParamStore* params = nullptr) : params_(params), reads_(params) {}
  /// Forward-only tape; backward() on it throws ContractViolation.
  explicit Tape(const ParamStore& params) : params_(nullptr), reads_(&params) {}

  Var constant(Tensor value);
  Var param(std::size_t index);
  Var param(std::string_view name);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  Tensor& grad_of(std::size_t id) { return nodes_[id].grad; }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }

  /// Records a new node. `inputs` are the ids whose gradients `fn` writes.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);

  /// Back-propagates from a 1x1 loss. Throws ContractViolation otherwise.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  ParamStore* params() const { return params_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::ptrdiff_t param_index = -1;
  };

  ParamStore* params_;
  const ParamStore* reads_;
  std::vector<Node> nodes_;
  std::unordered_map<std::size_t, std::size_t> param_nodes_;
};

// Differentiable operations. All shapes are checked; mismatches throw ConfigError.
Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
/// Multiplies row r by factors[r].
Var scale_rows(Tape& t, Var a, std::vector<double> factors);
Var add_row(Tape& t, Var a, Var row);
Var tanh(Tape& t, Var a);
Var exp(Tape& t, Var a);
Var square(Tape& t, Var a);
Var sum(Tape& t, Var a);
Var concat_cols(Tape& t, Var a, Var b);
Var slice_cols(Tape& t, Var a, std::size_t start, std::size_t count);
/// Row-wise dot product of two same-shape matrices; result is rows x 1.
Var row_dot(Tape& t, Var a, Var b);

/// out[i] = sum of H[j] over neighbours j of i joined by an edge with `label`.
Var propagate(Tape& t, Var h, const GraphBatch& batch, int label);
/// One row per node pair: H[i] + H[j].
Var pair_sum(Tape& t, Var h, const GraphBatch& batch);
/// Sums node rows per graph; result is graphs x cols.
Var segment_sum(Tape& t, Var h, const GraphBatch& batch);
/// Repeats each graph row once per node of that graph.
Var broadcast_segments(Tape& t, Var per_graph, const GraphBatch& batch);
/// Softmax of `scores` (nodes x 1) within each graph, then attention-weighted sum of H.
Var attention_pool(Tape& t, Var scores, Var h, const GraphBatch& batch);

/// Mean over rows of the squared row norm of (pred - target).
Var mse_rows(Tape& t, Var pred, Var target);
/// Mean over rows of KL(N(mu, exp(logvar)) || N(0, I)).
Var gaussian_kl_rows(Tape& t, Var mu, Var logvar);
/// Same, for the diffused posterior N(sqrt(a) mu, a exp(logvar) + 1 - a) with a
/// per-row retention factor a in (0, 1]; a == 1 recovers gaussian_kl_rows.
Var diffused_kl_rows(Tape& t, Var mu, Var logvar, std::vector<double> retention);

}  // namespace treediff::nn
