#include "treediff/graph/graph.hpp"

#include <algorithm>
#include <cmath>

namespace treediff::graph {

Graph::Graph(std::size_t n, std::vector<int> node_labels)
    : n_(n), labels_(std::move(node_labels)), edges_(n * n, 0) {
  if (labels_.empty()) labels_.assign(n, 0);
  if (labels_.size() != n) {
    throw ContractViolation("Graph: " + std::to_string(labels_.size()) + " labels for " +
                            std::to_string(n) + " nodes");
  }
  for (int c : labels_) {
    if (c < 0 || c >= kNodeCategories) throw ContractViolation("Graph: node label out of range");
  }
}

void Graph::set_label(std::size_t i, int c) {
  if (c < 0 || c >= kNodeCategories) throw ContractViolation("Graph: node label out of range");
  labels_.at(i) = c;
}

void Graph::set_edge(std::size_t i, std::size_t j, int label) {
  if (i == j || i >= n_ || j >= n_) throw ContractViolation("Graph::set_edge: bad node pair");
  if (label < 0 || label >= kEdgeCategories) {
    throw ContractViolation("Graph::set_edge: edge label out of range");
  }
  edges_[i * n_ + j] = label;
  edges_[j * n_ + i] = label;
}

int Graph::weighted_degree(std::size_t i) const {
  int d = 0;
  for (std::size_t j = 0; j < n_; ++j) d += edges_[i * n_ + j];
  return d;
}

std::vector<int> Graph::weighted_degrees() const {
  std::vector<int> d(n_);
  for (std::size_t i = 0; i < n_; ++i) d[i] = weighted_degree(i);
  return d;
}

std::size_t Graph::edge_count() const {
  std::size_t c = 0;
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = i + 1; j < n_; ++j) c += edge(i, j) != 0;
  }
  return c;
}

void Graph::check_well_formed() const {
  if (labels_.size() != n_ || edges_.size() != n_ * n_) {
    throw ContractViolation("Graph: inconsistent storage");
  }
  for (std::size_t i = 0; i < n_; ++i) {
    if (labels_[i] < 0 || labels_[i] >= kNodeCategories) {
      throw ContractViolation("Graph: node label out of range");
    }
    if (edge(i, i) != 0) throw ContractViolation("Graph: nonzero diagonal");
    for (std::size_t j = 0; j < n_; ++j) {
      if (edge(i, j) != edge(j, i)) throw ContractViolation("Graph: asymmetric edges");
      if (edge(i, j) < 0 || edge(i, j) >= kEdgeCategories) {
        throw ContractViolation("Graph: edge label out of range");
      }
    }
  }
}

void ValidityRule::validate() const {
  for (int c : caps) {
    if (c <= 0) throw ConfigError("ValidityRule: caps must be strictly positive");
  }
}

ValidityReport check_validity(const Graph& g, const ValidityRule& rule) {
  ValidityReport r;
  for (std::size_t i = 0; i < g.n(); ++i) {
    if (g.weighted_degree(i) > rule.cap(g.label(i))) r.violations.push_back(i);
  }
  r.valid = r.violations.empty();
  return r;
}

bool is_valid(const Graph& g, const ValidityRule& rule) {
  for (std::size_t i = 0; i < g.n(); ++i) {
    if (g.weighted_degree(i) > rule.cap(g.label(i))) return false;
  }
  return true;
}

std::size_t triangle_count(const Graph& g) {
  std::size_t c = 0;
  const std::size_t n = g.n();
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      if (!g.edge(a, b)) continue;
      for (std::size_t d = b + 1; d < n; ++d) c += g.edge(a, d) && g.edge(b, d);
    }
  }
  return c;
}

double triangle_density(const Graph& g) {
  const double n = static_cast<double>(g.n());
  if (g.n() < 3) return 0.0;
  return static_cast<double>(triangle_count(g)) / (n * (n - 1) * (n - 2) / 6.0);
}

double saturation_fraction(const Graph& g, const ValidityRule& rule) {
  if (g.n() == 0) return 0.0;
  std::size_t s = 0;
  for (std::size_t i = 0; i < g.n(); ++i) s += g.weighted_degree(i) == rule.cap(g.label(i));
  return static_cast<double>(s) / static_cast<double>(g.n());
}

void RewardSpec::validate() const {
  if (validity == 0.0 && triangle == 0.0 && saturation == 0.0) {
    throw ConfigError("RewardSpec: at least one weight must be nonzero");
  }
}

double reward(const Graph& g, const RewardSpec& spec, const ValidityRule& rule) {
  double r = 0.0;
  if (spec.validity != 0.0) r += spec.validity * (is_valid(g, rule) ? 1.0 : 0.0);
  if (spec.triangle != 0.0) r += spec.triangle * triangle_density(g);
  if (spec.saturation != 0.0) r += spec.saturation * saturation_fraction(g, rule);
  return r;
}

std::vector<Graph> sample_dataset(std::size_t count, const ValidityRule& rule,
                                  std::mt19937_64& rng) {
  rule.validate();
  const int max_cap = *std::max_element(rule.caps.begin(), rule.caps.end());
  if (max_cap < 3) throw ConfigError("sample_dataset: needs a category with cap >= 3");
  std::uniform_int_distribution<std::size_t> size_dist(kMinNodes, kMaxNodes);
  std::bernoulli_distribution double_bond(0.25);
  std::bernoulli_distribution chord(0.5);
  std::bernoulli_distribution bump(0.5);

  std::vector<Graph> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t n = size_dist(rng);
    Graph g(n);
    std::vector<int> deg(n, 0);
    for (std::size_t i = 1; i < n; ++i) {
      const int b = (double_bond(rng) && deg[i - 1] <= max_cap - 3) ? 2 : 1;
      g.set_edge(i - 1, i, b);
      deg[i - 1] += b;
      deg[i] += b;
    }
    for (std::size_t i = 2; i < n; ++i) {
      if (deg[i - 2] >= max_cap || deg[i] >= max_cap - 1 || !chord(rng)) continue;
      g.set_edge(i - 2, i, 1);
      deg[i - 2] += 1;
      deg[i] += 1;
    }
    // Smallest category that holds the degree, sometimes one above it.
    for (std::size_t i = 0; i < n; ++i) {
      int c = 0;
      while (rule.cap(c) < deg[i]) ++c;
      if (c + 1 < kNodeCategories && rule.cap(c + 1) >= deg[i] && bump(rng)) ++c;
      g.set_label(i, c);
    }
    out.push_back(std::move(g));
  }
  return out;
}

DenseGraphTensor encode_dense(const Graph& g) {
  DenseGraphTensor t;
  t.n = g.n();
  t.x = nn::Tensor(g.n(), kNodeCategories);
  t.e = nn::Tensor(g.n() * g.n(), kEdgeCategories);
  for (std::size_t i = 0; i < g.n(); ++i) {
    t.x(i, static_cast<std::size_t>(g.label(i))) = 1.0;
    for (std::size_t j = 0; j < g.n(); ++j) {
      t.e(i * g.n() + j, static_cast<std::size_t>(g.edge(i, j))) = 1.0;
    }
  }
  return t;
}

namespace {

template <class Row>
int argmax(const Row& r, std::size_t count) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < count; ++c) {
    if (r(c) > r(best)) best = c;
  }
  return static_cast<int>(best);
}

}  // namespace

Graph decode_dense(const DenseGraphTensor& t) {
  const std::size_t n = t.n;
  if (t.x.rows() != n || t.x.cols() != kNodeCategories || t.e.rows() != n * n ||
      t.e.cols() != kEdgeCategories) {
    throw ContractViolation("decode_dense: block shapes do not match n=" + std::to_string(n));
  }
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = argmax([&](std::size_t c) { return t.x(i, c); }, kNodeCategories);
  }
  Graph g(n, std::move(labels));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const int b = argmax(
          [&](std::size_t c) { return 0.5 * (t.e(i * n + j, c) + t.e(j * n + i, c)); },
          kEdgeCategories);
      g.set_edge(i, j, b);
    }
  }
  return g;
}

std::size_t pair_slot(std::size_t i, std::size_t j) {
  if (i >= j || j >= kMaxNodes) throw ContractViolation("pair_slot: need i < j < 12");
  return i * (2 * kMaxNodes - i - 1) / 2 + (j - i - 1);
}

std::vector<double> to_flat(const Graph& g) {
  if (g.n() < kMinNodes || g.n() > kMaxNodes) {
    throw ContractViolation("to_flat: node count outside 4..12");
  }
  std::vector<double> v(kFlatDim, 0.0);
  v[g.n() - kMinNodes] = 1.0;
  for (std::size_t i = 0; i < g.n(); ++i) {
    v[kNodeOffset + i * kNodeCategories + static_cast<std::size_t>(g.label(i))] = 1.0;
  }
  for (std::size_t i = 0; i < kMaxNodes; ++i) {
    for (std::size_t j = i + 1; j < kMaxNodes; ++j) {
      const int b = (j < g.n()) ? g.edge(i, j) : 0;
      if (j < g.n()) {
        v[kPairOffset + pair_slot(i, j) * kEdgeCategories + static_cast<std::size_t>(b)] = 1.0;
      }
    }
  }
  return v;
}

Graph from_flat(std::span<const double> v) {
  if (v.size() != kFlatDim) {
    throw ContractViolation("from_flat: expected " + std::to_string(kFlatDim) + " values");
  }
  const std::size_t n = kMinNodes + static_cast<std::size_t>(argmax(
                                        [&](std::size_t c) { return v[c]; }, kSizeSlots));
  DenseGraphTensor t;
  t.n = n;
  t.x = nn::Tensor(n, kNodeCategories);
  t.e = nn::Tensor(n * n, kEdgeCategories);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < kNodeCategories; ++c) {
      t.x(i, c) = v[kNodeOffset + i * kNodeCategories + c];
    }
    for (std::size_t j = i + 1; j < n; ++j) {
      for (std::size_t c = 0; c < kEdgeCategories; ++c) {
        const double logit = v[kPairOffset + pair_slot(i, j) * kEdgeCategories + c];
        t.e(i * n + j, c) = logit;
        t.e(j * n + i, c) = logit;
      }
    }
  }
  return decode_dense(t);
}

std::vector<double> mmd_features(const Graph& g) {
  constexpr std::size_t kDegreeBins = 9;
  std::vector<double> f(kDegreeBins + kNodeCategories + 1, 0.0);
  const double inv_n = g.n() ? 1.0 / static_cast<double>(g.n()) : 0.0;
  for (std::size_t i = 0; i < g.n(); ++i) {
    const auto d = std::min<std::size_t>(static_cast<std::size_t>(g.weighted_degree(i)),
                                         kDegreeBins - 1);
    f[d] += inv_n;
    f[kDegreeBins + static_cast<std::size_t>(g.label(i))] += inv_n;
  }
  f.back() = triangle_density(g);
  return f;
}

double mmd_distance(const std::vector<Graph>& a, const std::vector<Graph>& b, double bandwidth) {
  if (a.empty() || b.empty()) throw ContractViolation("mmd_distance: both sets must be non-empty");
  if (!(bandwidth > 0.0)) throw ConfigError("mmd_distance: bandwidth must be positive");
  std::vector<std::vector<double>> fa, fb;
  for (const auto& g : a) fa.push_back(mmd_features(g));
  for (const auto& g : b) fb.push_back(mmd_features(g));
  const double gamma = 1.0 / (2.0 * bandwidth * bandwidth);
  auto mean_kernel = [gamma](const auto& x, const auto& y) {
    double s = 0.0;
    for (const auto& u : x) {
      for (const auto& v : y) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < u.size(); ++k) d2 += (u[k] - v[k]) * (u[k] - v[k]);
        s += std::exp(-gamma * d2);
      }
    }
    return s / static_cast<double>(x.size() * y.size());
  };
  const double kab = mean_kernel(fa, fb);
  const double kba = mean_kernel(fb, fa);
  // Symmetrize the cross term so mmd(a,b) and mmd(b,a) agree bit for bit.
  const double v = mean_kernel(fa, fa) + mean_kernel(fb, fb) - (kab + kba);
  return std::max(0.0, v);
}

nlohmann::json to_json(const Graph& g) {
  nlohmann::json edges = nlohmann::json::array();
  for (std::size_t i = 0; i < g.n(); ++i) {
    for (std::size_t j = i + 1; j < g.n(); ++j) {
      if (g.edge(i, j)) edges.push_back({i, j, g.edge(i, j)});
    }
  }
  return {{"n", g.n()}, {"node_labels", g.node_labels()}, {"edges", edges}};
}

Graph graph_from_json(const nlohmann::json& j) {
  try {
    Graph g(j.at("n").get<std::size_t>(), j.at("node_labels").get<std::vector<int>>());
    for (const auto& e : j.at("edges")) {
      const auto a = e.at(0).get<std::size_t>();
      const auto b = e.at(1).get<std::size_t>();
      if (a >= b) throw ContractViolation("graph JSON: edges must satisfy i < j");
      g.set_edge(a, b, e.at(2).get<int>());
    }
    return g;
  } catch (const nlohmann::json::exception& ex) {
    throw ContractViolation(std::string("graph JSON: ") + ex.what());
  }
}

}  // namespace treediff::graph
