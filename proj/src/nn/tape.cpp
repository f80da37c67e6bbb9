#include "treediff/nn/tape.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

namespace treediff::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_mat(Tensor& t) {
  return MapMat(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
CMapMat as_mat(const Tensor& t) {
  return CMapMat(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                 static_cast<Eigen::Index>(t.cols()));
}

std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                      shape_str(b));
  }
}

template <class F>
Var unary(Tape& t, Var a, F&& f, Tape::BackwardFn bw) {
  Tensor out = t.value(a);
  for (auto& x : out.values()) x = f(x);
  return t.push(std::move(out), {a.id}, std::move(bw));
}

}  // namespace

void GraphBatch::append(std::size_t n, std::span<const int> labels) {
  if (labels.size() != n * (n - 1) / 2) {
    throw ContractViolation("GraphBatch::append: expected " + std::to_string(n * (n - 1) / 2) +
                            " pair labels, got " + std::to_string(labels.size()));
  }
  node_offset.push_back(node_offset.back() + n);
  pair_offset.push_back(pair_offset.back() + labels.size());
  pair_label.insert(pair_label.end(), labels.begin(), labels.end());
}

Var Tape::constant(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Tape::param(std::size_t index) {
  if (reads_ == nullptr) throw ContractViolation("Tape::param without a ParamStore");
  if (auto it = param_nodes_.find(index); it != param_nodes_.end()) return Var{it->second};
  Var v = push((*reads_)[index].value, {}, nullptr);
  nodes_[v.id].param_index = static_cast<std::ptrdiff_t>(index);
  param_nodes_.emplace(index, v.id);
  return v;
}

Var Tape::param(std::string_view name) {
  if (reads_ == nullptr) throw ContractViolation("Tape::param without a ParamStore");
  return param(reads_->index(name));
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (nodes_[loss.id].value.size() != 1) {
    throw ContractViolation("Tape::backward requires a scalar loss, got shape " +
                            shape_str(nodes_[loss.id].value));
  }
  if (reads_ != nullptr && params_ == nullptr) {
    throw ContractViolation("Tape::backward on a forward-only tape");
  }
  if (!nodes_[loss.id].value.all_finite()) {
    throw EvaluationError("Tape::backward: non-finite loss");
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    nodes_[i].grad = Tensor(nodes_[i].value.rows(), nodes_[i].value.cols());
  }
  nodes_[loss.id].grad[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (nodes_[i].backward) nodes_[i].backward(*this, i);
  }
  for (std::size_t i = 0; i <= loss.id; ++i) {
    const auto pi = nodes_[i].param_index;
    if (pi < 0) continue;
    auto& slot = (*params_)[static_cast<std::size_t>(pi)].grad;
    const auto& g = nodes_[i].grad;
    for (std::size_t k = 0; k < g.size(); ++k) slot[k] += g[k];
  }
}

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& A = t.value(a);
  const Tensor& B = t.value(b);
  if (A.cols() != B.rows()) {
    throw ConfigError("matmul: inner dimensions differ " + shape_str(A) + " * " + shape_str(B));
  }
  Tensor out(A.rows(), B.cols());
  as_mat(out).noalias() = as_mat(A) * as_mat(B);
  return t.push(std::move(out), {a.id, b.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto g = as_mat(tp.grad_of(self));
    auto ga = as_mat(tp.grad_of(in[0]));
    ga.noalias() += g * as_mat(tp.value_of(in[1])).transpose();
    auto gb = as_mat(tp.grad_of(in[1]));
    gb.noalias() += as_mat(tp.value_of(in[0])).transpose() * g;
  });
}

Var add(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor out = t.value(a);
  const auto& B = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return t.push(std::move(out), {a.id, b.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& g = tp.grad_of(self);
    for (std::size_t k : {in[0], in[1]}) {
      auto& gk = tp.grad_of(k);
      for (std::size_t i = 0; i < g.size(); ++i) gk[i] += g[i];
    }
  });
}

Var sub(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a);
  const auto& B = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return t.push(std::move(out), {a.id, b.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_of(in[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    auto& gb = tp.grad_of(in[1]);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Var mul(Tape& t, Var a, Var b) {
  require_same_shape(t.value(a), t.value(b), "mul");
  Tensor out = t.value(a);
  const auto& B = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return t.push(std::move(out), {a.id, b.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& g = tp.grad_of(self);
    const auto& A = tp.value_of(in[0]);
    const auto& B = tp.value_of(in[1]);
    auto& ga = tp.grad_of(in[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[i];
    auto& gb = tp.grad_of(in[1]);
    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A[i];
  });
}

Var scale(Tape& t, Var a, double s) {
  return unary(t, a, [s](double x) { return s * x; }, [s](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var scale_rows(Tape& t, Var a, std::vector<double> factors) {
  const auto& A = t.value(a);
  if (factors.size() != A.rows()) {
    throw ConfigError("scale_rows: " + std::to_string(factors.size()) + " factors for " +
                      std::to_string(A.rows()) + " rows");
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (auto& x : out.row(i)) x *= factors[i];
  }
  return t.push(std::move(out), {a.id}, [f = std::move(factors)](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += f[i] * g(i, j);
    }
  });
}

Var add_row(Tape& t, Var a, Var row) {
  const auto& A = t.value(a);
  const auto& r = t.value(row);
  if (r.rows() != 1 || r.cols() != A.cols()) {
    throw ConfigError("add_row: row " + shape_str(r) + " does not broadcast over " +
                      shape_str(A));
  }
  Tensor out = A;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r[j];
  }
  return t.push(std::move(out), {a.id, row.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_of(in[0]);
    auto& gr = tp.grad_of(in[1]);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) {
        ga(i, j) += g(i, j);
        gr[j] += g(i, j);
      }
    }
  });
}

Var tanh(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::tanh(x); }, [](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& y = tp.value_of(self);
    auto& ga = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var exp(Tape& t, Var a) {
  return unary(t, a, [](double x) { return std::exp(x); }, [](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& y = tp.value_of(self);
    auto& ga = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var square(Tape& t, Var a) {
  return unary(t, a, [](double x) { return x * x; }, [](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    const auto& x = tp.value_of(tp.inputs_of(self)[0]);
    auto& ga = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * g[i] * x[i];
  });
}

Var sum(Tape& t, Var a) {
  double s = 0.0;
  for (double x : t.value(a).values()) s += x;
  return t.push(Tensor::scalar(s), {a.id}, [](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)[0];
    for (auto& x : tp.grad_of(tp.inputs_of(self)[0]).values()) x += g;
  });
}

Var concat_cols(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rows() != B.rows()) {
    throw ConfigError("concat_cols: row mismatch " + shape_str(A) + " vs " + shape_str(B));
  }
  Tensor out(A.rows(), A.cols() + B.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    std::copy(A.row(i).begin(), A.row(i).end(), out.row(i).begin());
    std::copy(B.row(i).begin(), B.row(i).end(), out.row(i).begin() + A.cols());
  }
  return t.push(std::move(out), {a.id, b.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_of(in[0]);
    auto& gb = tp.grad_of(in[1]);
    const std::size_t ca = ga.cols();
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < ca; ++j) ga(i, j) += g(i, j);
      for (std::size_t j = 0; j < gb.cols(); ++j) gb(i, j) += g(i, ca + j);
    }
  });
}

Var slice_cols(Tape& t, Var a, std::size_t start, std::size_t count) {
  const auto& A = t.value(a);
  if (start + count > A.cols()) {
    throw ConfigError("slice_cols: columns [" + std::to_string(start) + ", " +
                      std::to_string(start + count) + ") exceed " + shape_str(A));
  }
  Tensor out(A.rows(), count);
  for (std::size_t i = 0; i < A.rows(); ++i) {
    for (std::size_t j = 0; j < count; ++j) out(i, j) = A(i, start + j);
  }
  return t.push(std::move(out), {a.id}, [start](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& ga = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, start + j) += g(i, j);
    }
  });
}

Var row_dot(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  require_same_shape(A, B, "row_dot");
  Tensor out(A.rows(), 1);
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) s += A(i, j) * B(i, j);
    out[i] = s;
  }
  return t.push(std::move(out), {a.id, b.id}, [](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& g = tp.grad_of(self);
    const auto& A = tp.value_of(in[0]);
    const auto& B = tp.value_of(in[1]);
    auto& ga = tp.grad_of(in[0]);
    auto& gb = tp.grad_of(in[1]);
    for (std::size_t i = 0; i < A.rows(); ++i) {
      for (std::size_t j = 0; j < A.cols(); ++j) {
        ga(i, j) += g[i] * B(i, j);
        gb(i, j) += g[i] * A(i, j);
      }
    }
  });
}

namespace {

// Calls f(node_i, node_j, pair_row) for every pair of every graph.
template <class F>
void for_each_pair(const GraphBatch& batch, F&& f) {
  for (std::size_t g = 0; g < batch.graphs(); ++g) {
    const std::size_t base = batch.node_offset[g];
    const std::size_t n = batch.graph_size(g);
    std::size_t p = batch.pair_offset[g];
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j, ++p) f(base + i, base + j, p);
    }
  }
}

void require_nodes(const Tensor& h, const GraphBatch& batch, const char* op) {
  if (h.rows() != batch.nodes()) {
    throw ConfigError(std::string(op) + ": expected " + std::to_string(batch.nodes()) +
                      " node rows, got " + std::to_string(h.rows()));
  }
}

}  // namespace

Var propagate(Tape& t, Var h, const GraphBatch& batch, int label) {
  const auto& H = t.value(h);
  require_nodes(H, batch, "propagate");
  Tensor out(H.rows(), H.cols());
  for_each_pair(batch, [&](std::size_t i, std::size_t j, std::size_t p) {
    if (batch.pair_label[p] != label) return;
    for (std::size_t c = 0; c < H.cols(); ++c) {
      out(i, c) += H(j, c);
      out(j, c) += H(i, c);
    }
  });
  // The batch is captured by value; tapes outlive the caller's batch in training loops.
  return t.push(std::move(out), {h.id}, [batch, label](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& gh = tp.grad_of(tp.inputs_of(self)[0]);
    for_each_pair(batch, [&](std::size_t i, std::size_t j, std::size_t p) {
      if (batch.pair_label[p] != label) return;
      for (std::size_t c = 0; c < g.cols(); ++c) {
        gh(j, c) += g(i, c);
        gh(i, c) += g(j, c);
      }
    });
  });
}

Var pair_sum(Tape& t, Var h, const GraphBatch& batch) {
  const auto& H = t.value(h);
  require_nodes(H, batch, "pair_sum");
  Tensor out(batch.pairs(), H.cols());
  for_each_pair(batch, [&](std::size_t i, std::size_t j, std::size_t p) {
    for (std::size_t c = 0; c < H.cols(); ++c) out(p, c) = H(i, c) + H(j, c);
  });
  return t.push(std::move(out), {h.id}, [batch](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_of(self);
    auto& gh = tp.grad_of(tp.inputs_of(self)[0]);
    for_each_pair(batch, [&](std::size_t i, std::size_t j, std::size_t p) {
      for (std::size_t c = 0; c < g.cols(); ++c) {
        gh(i, c) += g(p, c);
        gh(j, c) += g(p, c);
      }
    });
  });
}

Var segment_sum(Tape& t, Var h, const GraphBatch& batch) {
  const auto& H = t.value(h);
  require_nodes(H, batch, "segment_sum");
  Tensor out(batch.graphs(), H.cols());
  for (std::size_t g = 0; g < batch.graphs(); ++g) {
    for (std::size_t i = batch.node_offset[g]; i < batch.node_offset[g + 1]; ++i) {
      for (std::size_t c = 0; c < H.cols(); ++c) out(g, c) += H(i, c);
    }
  }
  return t.push(std::move(out), {h.id}, [batch](Tape& tp, std::size_t self) {
    const auto& gs = tp.grad_of(self);
    auto& gh = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t g = 0; g < batch.graphs(); ++g) {
      for (std::size_t i = batch.node_offset[g]; i < batch.node_offset[g + 1]; ++i) {
        for (std::size_t c = 0; c < gs.cols(); ++c) gh(i, c) += gs(g, c);
      }
    }
  });
}

Var broadcast_segments(Tape& t, Var per_graph, const GraphBatch& batch) {
  const auto& P = t.value(per_graph);
  if (P.rows() != batch.graphs()) {
    throw ConfigError("broadcast_segments: expected " + std::to_string(batch.graphs()) +
                      " rows, got " + std::to_string(P.rows()));
  }
  Tensor out(batch.nodes(), P.cols());
  for (std::size_t g = 0; g < batch.graphs(); ++g) {
    for (std::size_t i = batch.node_offset[g]; i < batch.node_offset[g + 1]; ++i) {
      for (std::size_t c = 0; c < P.cols(); ++c) out(i, c) = P(g, c);
    }
  }
  return t.push(std::move(out), {per_graph.id}, [batch](Tape& tp, std::size_t self) {
    const auto& go = tp.grad_of(self);
    auto& gp = tp.grad_of(tp.inputs_of(self)[0]);
    for (std::size_t g = 0; g < batch.graphs(); ++g) {
      for (std::size_t i = batch.node_offset[g]; i < batch.node_offset[g + 1]; ++i) {
        for (std::size_t c = 0; c < go.cols(); ++c) gp(g, c) += go(i, c);
      }
    }
  });
}

Var attention_pool(Tape& t, Var scores, Var h, const GraphBatch& batch) {
  const auto& S = t.value(scores);
  const auto& H = t.value(h);
  require_nodes(H, batch, "attention_pool");
  if (S.rows() != H.rows() || S.cols() != 1) {
    throw ConfigError("attention_pool: scores must be nodes x 1, got " + shape_str(S));
  }
  // Attention weights are recomputed in the backward pass from the stored scores.
  auto weights = [](const Tensor& s, const GraphBatch& b) {
    std::vector<double> a(s.rows(), 0.0);
    for (std::size_t g = 0; g < b.graphs(); ++g) {
      const std::size_t lo = b.node_offset[g];
      const std::size_t hi = b.node_offset[g + 1];
      if (lo == hi) continue;
      double mx = s[lo];
      for (std::size_t i = lo; i < hi; ++i) mx = std::max(mx, s[i]);
      double z = 0.0;
      for (std::size_t i = lo; i < hi; ++i) {
        a[i] = std::exp(s[i] - mx);
        z += a[i];
      }
      for (std::size_t i = lo; i < hi; ++i) a[i] /= z;
    }
    return a;
  };
  const auto a = weights(S, batch);
  Tensor out(batch.graphs(), H.cols());
  for (std::size_t g = 0; g < batch.graphs(); ++g) {
    for (std::size_t i = batch.node_offset[g]; i < batch.node_offset[g + 1]; ++i) {
      for (std::size_t c = 0; c < H.cols(); ++c) out(g, c) += a[i] * H(i, c);
    }
  }
  return t.push(std::move(out), {scores.id, h.id}, [batch, weights](Tape& tp, std::size_t self) {
    const auto& in = tp.inputs_of(self);
    const auto& go = tp.grad_of(self);
    const auto& H = tp.value_of(in[1]);
    const auto a = weights(tp.value_of(in[0]), batch);
    auto& gs = tp.grad_of(in[0]);
    auto& gh = tp.grad_of(in[1]);
    for (std::size_t g = 0; g < batch.graphs(); ++g) {
      const std::size_t lo = batch.node_offset[g];
      const std::size_t hi = batch.node_offset[g + 1];
      double mean_dot = 0.0;
      std::vector<double> dots(hi - lo, 0.0);
      for (std::size_t i = lo; i < hi; ++i) {
        double d = 0.0;
        for (std::size_t c = 0; c < H.cols(); ++c) {
          d += go(g, c) * H(i, c);
          gh(i, c) += a[i] * go(g, c);
        }
        dots[i - lo] = d;
        mean_dot += a[i] * d;
      }
      for (std::size_t i = lo; i < hi; ++i) gs[i] += a[i] * (dots[i - lo] - mean_dot);
    }
  });
}

Var mse_rows(Tape& t, Var pred, Var target) {
  const double rows = static_cast<double>(t.value(pred).rows());
  return scale(t, sum(t, square(t, sub(t, pred, target))), 1.0 / rows);
}

Var gaussian_kl_rows(Tape& t, Var mu, Var logvar) {
  require_same_shape(t.value(mu), t.value(logvar), "gaussian_kl_rows");
  const auto& M = t.value(mu);
  const auto& L = t.value(logvar);
  double s = 0.0;
  for (std::size_t i = 0; i < M.size(); ++i) s += M[i] * M[i] + std::exp(L[i]) - 1.0 - L[i];
  const double rows = static_cast<double>(M.rows());
  return t.push(Tensor::scalar(0.5 * s / rows), {mu.id, logvar.id},
                [rows](Tape& tp, std::size_t self) {
                  const auto& in = tp.inputs_of(self);
                  const double g = tp.grad_of(self)[0] * 0.5 / rows;
                  const auto& M = tp.value_of(in[0]);
                  const auto& L = tp.value_of(in[1]);
                  auto& gm = tp.grad_of(in[0]);
                  auto& gl = tp.grad_of(in[1]);
                  for (std::size_t i = 0; i < M.size(); ++i) {
                    gm[i] += g * 2.0 * M[i];
                    gl[i] += g * (std::exp(L[i]) - 1.0);
                  }
                });
}

Var diffused_kl_rows(Tape& t, Var mu, Var logvar, std::vector<double> retention) {
  require_same_shape(t.value(mu), t.value(logvar), "diffused_kl_rows");
  const auto& M = t.value(mu);
  const auto& L = t.value(logvar);
  if (retention.size() != M.rows()) throw ConfigError("diffused_kl_rows: one factor per row");
  double s = 0.0;
  for (std::size_t i = 0; i < M.rows(); ++i) {
    const double a = retention[i];
    for (std::size_t j = 0; j < M.cols(); ++j) {
      const double v = a * std::exp(L(i, j)) + 1.0 - a;
      s += a * M(i, j) * M(i, j) + v - 1.0 - std::log(v);
    }
  }
  const double rows = static_cast<double>(M.rows());
  return t.push(Tensor::scalar(0.5 * s / rows), {mu.id, logvar.id},
                [rows, ret = std::move(retention)](Tape& tp, std::size_t self) {
                  const auto& in = tp.inputs_of(self);
                  const double g = tp.grad_of(self)[0] * 0.5 / rows;
                  const auto& M = tp.value_of(in[0]);
                  const auto& L = tp.value_of(in[1]);
                  auto& gm = tp.grad_of(in[0]);
                  auto& gl = tp.grad_of(in[1]);
                  for (std::size_t i = 0; i < M.rows(); ++i) {
                    const double a = ret[i];
                    for (std::size_t j = 0; j < M.cols(); ++j) {
                      const double e = a * std::exp(L(i, j));
                      const double v = e + 1.0 - a;
                      gm(i, j) += g * 2.0 * a * M(i, j);
                      gl(i, j) += g * (e - e / v);
                    }
                  }
                });
}

}  // namespace treediff::nn
