#pragma once

#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "treediff/nn/params.hpp"
#include "treediff/nn/tape.hpp"

namespace treediff::nn {

enum class Activation { Tanh, Identity };

/// Affine layer y = act(x W + b); W and b live in a ParamStore.
struct Dense {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  Activation act = Activation::Identity;
};

Dense make_dense(ParamStore& ps, const std::string& name, std::size_t fan_in, std::size_t fan_out,
                 Activation act, std::mt19937_64& rng);

/// Recorded forward pass.
Var forward(Tape& t, const Dense& layer, Var x);
/// Tape-free forward pass; throws ConfigError when x.cols() != fan_in.
Tensor forward_dense(const ParamStore& ps, const Dense& layer, const Tensor& x);

/// Stack of dense layers: tanh on hidden layers, identity on the output.
struct Mlp {
  std::vector<Dense> layers;

  std::size_t fan_in() const { return layers.front().fan_in; }
  std::size_t fan_out() const { return layers.back().fan_out; }
};

Mlp make_mlp(ParamStore& ps, const std::string& name, const std::vector<std::size_t>& widths,
             std::mt19937_64& rng);
Var forward(Tape& t, const Mlp& mlp, Var x);
Tensor forward_mlp(const ParamStore& ps, const Mlp& mlp, const Tensor& x);

/// One round of sum-aggregation message passing over single and double edges:
/// H' = tanh(H W_self + A_1 H W_1 + A_2 H W_2 + b).
struct GraphConv {
  std::size_t w_self = 0;
  std::size_t w_single = 0;
  std::size_t w_double = 0;
  std::size_t bias = 0;
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
};

GraphConv make_graph_conv(ParamStore& ps, const std::string& name, std::size_t fan_in,
                          std::size_t fan_out, std::mt19937_64& rng);
Var forward(Tape& t, const GraphConv& layer, Var h, const GraphBatch& batch);

/// Central-difference gradient check.
///
/// `loss` records a scalar loss on the given tape. Every coordinate is checked
/// when the store holds at most `max_coords` scalars; otherwise a seeded random
/// subset is used. Returns max |a - c| / (|a| + |c| + 1e-12). Throws
/// EvaluationError on a non-finite loss and ConfigError if h is outside (1e-6, 1e-3).
double finite_diff_check(const std::function<Var(Tape&)>& loss, ParamStore& ps, double h,
                         std::size_t max_coords = 256, std::uint64_t seed = 0);

}  // namespace treediff::nn
