#include <cmath>

#include "treediff/dual/dual.hpp"

namespace treediff::dual {

DiscreteRefiner::DiscreteRefiner(std::size_t hidden, std::size_t T_, std::uint64_t seed) : T(T_) {
  std::mt19937_64 rng(seed);
  const std::size_t in = graph::kNodeCategories + diffusion::kTimeFeatures;
  input = nn::make_dense(params, "ref.in", in, hidden, nn::Activation::Tanh, rng);
  conv1 = nn::make_graph_conv(params, "ref.conv1", hidden, hidden, rng);
  conv2 = nn::make_graph_conv(params, "ref.conv2", hidden, hidden, rng);
  node_head = nn::make_dense(params, "ref.node", hidden, graph::kNodeCategories,
                             nn::Activation::Identity, rng);
  edge_head = nn::make_dense(params, "ref.edge", hidden + graph::kEdgeCategories,
                             graph::kEdgeCategories, nn::Activation::Identity, rng);
}

void DiscreteRefiner::zero() {
  for (auto& p : params) p.value.fill(0.0);
}

namespace {

std::vector<int> upper_labels(const Graph& g) {
  std::vector<int> v;
  v.reserve(g.n() * (g.n() - 1) / 2);
  for (std::size_t i = 0; i < g.n(); ++i) {
    for (std::size_t j = i + 1; j < g.n(); ++j) v.push_back(g.edge(i, j));
  }
  return v;
}

}  // namespace

RefinerOutput refiner_forward(nn::Tape& tape, const DiscreteRefiner& r,
                              const std::vector<const Graph*>& graphs,
                              const std::vector<std::size_t>& times, nn::GraphBatch& batch) {
  if (graphs.size() != times.size()) throw ConfigError("refiner_forward: one time per graph");
  batch = nn::GraphBatch{};
  for (const Graph* g : graphs) {
    const auto labels = upper_labels(*g);
    batch.append(g->n(), labels);
  }
  nn::Tensor x(batch.nodes(), graph::kNodeCategories + diffusion::kTimeFeatures);
  nn::Tensor pair_onehot(batch.pairs(), graph::kEdgeCategories);
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const Graph& g = *graphs[gi];
    const auto e = diffusion::time_embedding(times[gi], r.T);
    for (std::size_t i = 0; i < g.n(); ++i) {
      auto row = x.row(batch.node_offset[gi] + i);
      row[static_cast<std::size_t>(g.label(i))] = 1.0;
      std::copy(e.begin(), e.end(), row.begin() + graph::kNodeCategories);
    }
  }
  for (std::size_t p = 0; p < batch.pairs(); ++p) {
    pair_onehot(p, static_cast<std::size_t>(batch.pair_label[p])) = 1.0;
  }
  nn::Var h = nn::forward(tape, r.input, tape.constant(std::move(x)));
  h = nn::forward(tape, r.conv1, h, batch);
  h = nn::forward(tape, r.conv2, h, batch);
  RefinerOutput out;
  out.node_logits = nn::forward(tape, r.node_head, h);
  nn::Var pf = nn::concat_cols(tape, nn::pair_sum(tape, h, batch),
                               tape.constant(std::move(pair_onehot)));
  out.pair_logits = nn::forward(tape, r.edge_head, pf);
  return out;
}

nn::Var denoise_loss(nn::Tape& tape, const DiscreteRefiner& r,
                     const std::vector<const Graph*>& inputs,
                     const std::vector<const Graph*>& targets,
                     const std::vector<std::size_t>& times) {
  if (inputs.size() != targets.size() || inputs.empty()) {
    throw ConfigError("denoise_loss: inputs and targets must be non-empty and aligned");
  }
  nn::GraphBatch batch;
  const auto out = refiner_forward(tape, r, inputs, times, batch);
  nn::Tensor xt(batch.nodes(), graph::kNodeCategories);
  nn::Tensor et(batch.pairs(), graph::kEdgeCategories);
  for (std::size_t gi = 0; gi < inputs.size(); ++gi) {
    const Graph& tg = *targets[gi];
    if (tg.n() != inputs[gi]->n()) throw ConfigError("denoise_loss: node counts differ");
    std::size_t p = batch.pair_offset[gi];
    for (std::size_t i = 0; i < tg.n(); ++i) {
      xt(batch.node_offset[gi] + i, static_cast<std::size_t>(tg.label(i))) = 1.0;
      for (std::size_t j = i + 1; j < tg.n(); ++j, ++p) {
        et(p, static_cast<std::size_t>(tg.edge(i, j))) = 1.0;
      }
    }
  }
  nn::Var dn = nn::sum(tape, nn::square(tape, nn::sub(tape, out.node_logits, tape.constant(xt))));
  nn::Var de = nn::sum(tape, nn::square(tape, nn::sub(tape, out.pair_logits, tape.constant(et))));
  return nn::scale(tape, nn::add(tape, dn, de), 1.0 / static_cast<double>(inputs.size()));
}

Graph refiner_apply(const DiscreteRefiner& r, const Graph& g, std::size_t t) {
  nn::Tape tape(r.params);
  nn::GraphBatch batch;
  const auto out = refiner_forward(tape, r, {&g}, {t}, batch);
  const auto& nl = tape.value(out.node_logits);
  const auto& pl = tape.value(out.pair_logits);
  graph::DenseGraphTensor d;
  d.n = g.n();
  d.x = nl;
  d.e = nn::Tensor(g.n() * g.n(), graph::kEdgeCategories);
  std::size_t p = 0;
  for (std::size_t i = 0; i < g.n(); ++i) {
    for (std::size_t j = i + 1; j < g.n(); ++j, ++p) {
      for (std::size_t c = 0; c < graph::kEdgeCategories; ++c) {
        d.e(i * g.n() + j, c) = pl(p, c);
        d.e(j * g.n() + i, c) = pl(p, c);
      }
    }
  }
  return graph::decode_dense(d);
}

Graph repair_validity(Graph g, const graph::ValidityRule& rule) {
  auto excess = [&](std::size_t i) { return g.weighted_degree(i) - rule.cap(g.label(i)); };
  for (;;) {
    std::size_t worst = g.n();
    int worst_excess = 0;
    for (std::size_t i = 0; i < g.n(); ++i) {
      const int e = excess(i);
      if (e > worst_excess) {
        worst_excess = e;
        worst = i;
      }
    }
    if (worst == g.n()) return g;
    std::size_t pick = g.n();
    for (std::size_t j = 0; j < g.n(); ++j) {
      if (j == worst || g.edge(worst, j) == 0) continue;
      if (pick == g.n() || g.edge(worst, j) > g.edge(worst, pick) ||
          (g.edge(worst, j) == g.edge(worst, pick) && excess(j) > excess(pick))) {
        pick = j;
      }
    }
    g.set_edge(worst, pick, g.edge(worst, pick) - 1);
  }
}

Graph refine(const Graph& g, std::size_t t, std::size_t m, const DiscreteRefiner& r,
             const graph::ValidityRule& rule) {
  Graph cur = g;
  for (std::size_t i = 0; i < m; ++i) cur = repair_validity(refiner_apply(r, cur, t), rule);
  return cur;
}

std::vector<RefinerPair> refiner_pairs(const TrajectoryStore& trajs) {
  std::vector<RefinerPair> pairs;
  for (const auto& tr : trajs.trajectories) {
    for (std::size_t i = 0; i + 1 < tr.states.size(); ++i) {
      const auto& prev = tr.states[i];  // time t+1
      const auto& next = tr.states[i + 1];
      if (prev.graph.n() == next.graph.n()) {
        pairs.push_back({&prev.graph, &next.graph, prev.state.t});
      }
    }
  }
  return pairs;
}

std::vector<double> train_refiner(const TrajectoryStore& trajs, DiscreteRefiner& r,
                                  const RefinerTrainOptions& opt, std::mt19937_64& rng) {
  const auto pairs = refiner_pairs(trajs);
  if (pairs.empty()) throw ConfigError("train_refiner: no consecutive pairs with equal size");
  const std::size_t per_epoch = opt.samples_per_epoch ? opt.samples_per_epoch : pairs.size();
  std::uniform_int_distribution<std::size_t> pick(0, pairs.size() - 1);
  std::vector<double> history;
  for (std::size_t ep = 0; ep < opt.epochs; ++ep) {
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < per_epoch; b0 += opt.batch) {
      const std::size_t rows = std::min(opt.batch, per_epoch - b0);
      std::vector<const Graph*> in, tg;
      std::vector<std::size_t> times;
      for (std::size_t k = 0; k < rows; ++k) {
        const auto& p = pairs[pick(rng)];
        in.push_back(p.input);
        tg.push_back(p.target);
        times.push_back(p.t);
      }
      nn::Tape tape(&r.params);
      nn::Var loss = denoise_loss(tape, r, in, tg, times);
      const double v = tape.value(loss).item();
      if (!std::isfinite(v)) {
        throw EvaluationError("train_refiner: non-finite loss at epoch " + std::to_string(ep));
      }
      tape.backward(loss);
      nn::adam_step(r.params, opt.adam);
      total += v;
      ++batches;
    }
    history.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  return history;
}

}  // namespace treediff::dual
