#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "treediff/nn/tensor.hpp"

namespace treediff::nn {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
};

/// Named parameter tensors with gradient slots and Adam moment state.
///
/// Every parameter owns a same-shape gradient accumulator and moment pair;
/// `add` is the only way to create slots so the shapes can never drift.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor init);

  std::size_t index(std::string_view name) const;
  bool contains(std::string_view name) const;

  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  Parameter& at(std::string_view name) { return params_[index(name)]; }
  const Parameter& at(std::string_view name) const { return params_[index(name)]; }

  std::size_t size() const { return params_.size(); }
  /// Total number of scalar parameters.
  std::size_t count() const;

  void zero_grad();
  std::uint64_t adam_steps() const { return adam_steps_; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  friend void adam_step(ParamStore&, double, double, double, double);

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::uint64_t adam_steps_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update over every parameter; clears gradients afterwards.
void adam_step(ParamStore& params, double lr, double beta1, double beta2, double eps);
inline void adam_step(ParamStore& params, const AdamConfig& cfg = {}) {
  adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
}

/// Glorot-uniform initialiser for a fan_in x fan_out weight matrix.
Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

}  // namespace treediff::nn
