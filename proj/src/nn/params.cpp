#include "treediff/nn/params.hpp"

#include <cmath>

namespace treediff::nn {

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::size_t ParamStore::add(std::string name, Tensor init) {
  if (by_name_.contains(name)) throw ConfigError("duplicate parameter name: " + name);
  const std::size_t id = params_.size();
  Parameter p;
  p.grad = Tensor(init.rows(), init.cols());
  p.first_moment = Tensor(init.rows(), init.cols());
  p.second_moment = Tensor(init.rows(), init.cols());
  p.value = std::move(init);
  p.name = name;
  params_.push_back(std::move(p));
  by_name_.emplace(std::move(name), id);
  return id;
}

std::size_t ParamStore::index(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) throw ConfigError("unknown parameter: " + std::string(name));
  return it->second;
}

bool ParamStore::contains(std::string_view name) const {
  return by_name_.contains(std::string(name));
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

void adam_step(ParamStore& params, double lr, double beta1, double beta2, double eps) {
  params.adam_steps_ += 1;
  const double step = static_cast<double>(params.adam_steps_);
  const double c1 = 1.0 - std::pow(beta1, step);
  const double c2 = 1.0 - std::pow(beta2, step);
  for (auto& p : params.params_) {
    auto w = p.value.values();
    auto g = p.grad.values();
    auto m = p.first_moment.values();
    auto v = p.second_moment.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
      g[i] = 0.0;
    }
  }
}

Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor w(fan_in, fan_out);
  for (auto& x : w.values()) x = dist(rng);
  return w;
}

}  // namespace treediff::nn
