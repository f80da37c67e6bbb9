#include "treediff/nn/layers.hpp"

#include <Eigen/Core>
#include <cmath>

namespace treediff::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Var activate(Tape& t, Var x, Activation act) {
  return act == Activation::Tanh ? tanh(t, x) : x;
}

}  // namespace

Dense make_dense(ParamStore& ps, const std::string& name, std::size_t fan_in, std::size_t fan_out,
                 Activation act, std::mt19937_64& rng) {
  Dense d;
  d.weight = ps.add(name + ".W", glorot(fan_in, fan_out, rng));
  d.bias = ps.add(name + ".b", Tensor(1, fan_out));
  d.fan_in = fan_in;
  d.fan_out = fan_out;
  d.act = act;
  return d;
}

Var forward(Tape& t, const Dense& layer, Var x) {
  if (t.value(x).cols() != layer.fan_in) {
    throw ConfigError("dense layer expects " + std::to_string(layer.fan_in) + " inputs, got " +
                      std::to_string(t.value(x).cols()));
  }
  Var y = add_row(t, matmul(t, x, t.param(layer.weight)), t.param(layer.bias));
  return activate(t, y, layer.act);
}

Tensor forward_dense(const ParamStore& ps, const Dense& layer, const Tensor& x) {
  if (x.cols() != layer.fan_in) {
    throw ConfigError("dense layer expects " + std::to_string(layer.fan_in) + " inputs, got " +
                      std::to_string(x.cols()));
  }
  const Tensor& w = ps[layer.weight].value;
  const Tensor& b = ps[layer.bias].value;
  Tensor out(x.rows(), layer.fan_out);
  Eigen::Map<RowMat> y(out.values().data(), out.rows(), out.cols());
  Eigen::Map<const RowMat> xm(x.values().data(), x.rows(), x.cols());
  Eigen::Map<const RowMat> wm(w.values().data(), w.rows(), w.cols());
  Eigen::Map<const Eigen::RowVectorXd> bm(b.values().data(), b.cols());
  y.noalias() = xm * wm;
  y.rowwise() += bm;
  if (layer.act == Activation::Tanh) {
    for (auto& v : out.values()) v = std::tanh(v);
  }
  return out;
}

Mlp make_mlp(ParamStore& ps, const std::string& name, const std::vector<std::size_t>& widths,
             std::mt19937_64& rng) {
  if (widths.size() < 2) throw ConfigError("make_mlp needs at least input and output widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const bool last = i + 2 == widths.size();
    m.layers.push_back(make_dense(ps, name + "." + std::to_string(i), widths[i], widths[i + 1],
                                  last ? Activation::Identity : Activation::Tanh, rng));
  }
  return m;
}

Var forward(Tape& t, const Mlp& mlp, Var x) {
  for (const auto& l : mlp.layers) x = forward(t, l, x);
  return x;
}

Tensor forward_mlp(const ParamStore& ps, const Mlp& mlp, const Tensor& x) {
  Tensor h = forward_dense(ps, mlp.layers.front(), x);
  for (std::size_t i = 1; i < mlp.layers.size(); ++i) h = forward_dense(ps, mlp.layers[i], h);
  return h;
}

GraphConv make_graph_conv(ParamStore& ps, const std::string& name, std::size_t fan_in,
                          std::size_t fan_out, std::mt19937_64& rng) {
  GraphConv g;
  g.w_self = ps.add(name + ".Wself", glorot(fan_in, fan_out, rng));
  g.w_single = ps.add(name + ".W1", glorot(fan_in, fan_out, rng));
  g.w_double = ps.add(name + ".W2", glorot(fan_in, fan_out, rng));
  g.bias = ps.add(name + ".b", Tensor(1, fan_out));
  g.fan_in = fan_in;
  g.fan_out = fan_out;
  return g;
}

Var forward(Tape& t, const GraphConv& layer, Var h, const GraphBatch& batch) {
  if (t.value(h).cols() != layer.fan_in) {
    throw ConfigError("graph conv expects " + std::to_string(layer.fan_in) + " features, got " +
                      std::to_string(t.value(h).cols()));
  }
  Var self = matmul(t, h, t.param(layer.w_self));
  Var m1 = matmul(t, propagate(t, h, batch, 1), t.param(layer.w_single));
  Var m2 = matmul(t, propagate(t, h, batch, 2), t.param(layer.w_double));
  return tanh(t, add_row(t, add(t, self, add(t, m1, m2)), t.param(layer.bias)));
}

double finite_diff_check(const std::function<Var(Tape&)>& loss, ParamStore& ps, double h,
                         std::size_t max_coords, std::uint64_t seed) {
  if (!(h > 1e-6 && h < 1e-3)) throw ConfigError("finite_diff_check: h must lie in (1e-6, 1e-3)");
  auto eval = [&] {
    Tape t(&ps);
    const double v = t.value(loss(t)).item();
    if (!std::isfinite(v)) throw EvaluationError("finite_diff_check: non-finite loss");
    return v;
  };

  ps.zero_grad();
  {
    Tape t(&ps);
    t.backward(loss(t));
  }
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < ps.size(); ++p) {
    for (std::size_t i = 0; i < ps[p].value.size(); ++i) coords.emplace_back(p, i);
  }
  if (coords.size() > max_coords) {
    std::mt19937_64 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }

  double worst = 0.0;
  for (auto [p, i] : coords) {
    double& w = ps[p].value[i];
    const double saved = w;
    w = saved + h;
    const double up = eval();
    w = saved - h;
    const double down = eval();
    w = saved;
    const double central = (up - down) / (2.0 * h);
    const double analytic = ps[p].grad[i];
    const double err = std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  ps.zero_grad();
  return worst;
}

}  // namespace treediff::nn
