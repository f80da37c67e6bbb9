#include "treediff/verifier/verifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace treediff::verifier {

namespace {

// Label one-hot, weighted degree / 4, plain degree / 4.
constexpr std::size_t kNodeFeatures = graph::kNodeCategories + 2;

}  // namespace

VerifierModel::VerifierModel(std::size_t dz_, std::size_t hidden_, std::size_t T_,
                             std::uint64_t seed)
    : hidden(hidden_), dz(dz_), T(T_) {
  std::mt19937_64 rng(seed);
  latent = nn::make_mlp(params, "ver.lat", {dz + diffusion::kTimeFeatures, hidden, hidden}, rng);
  node_in = nn::make_dense(params, "ver.in", kNodeFeatures, hidden,
                           nn::Activation::Tanh, rng);
  conv1 = nn::make_graph_conv(params, "ver.conv1", hidden, hidden, rng);
  conv2 = nn::make_graph_conv(params, "ver.conv2", hidden, hidden, rng);
  bilinear = params.add("ver.attn", nn::glorot(hidden, hidden, rng));
  head_hidden = nn::make_dense(params, "ver.head1", 3 * hidden, hidden, nn::Activation::Tanh, rng);
  head_out = nn::make_dense(params, "ver.head2", hidden, 1, nn::Activation::Identity, rng);
}

std::vector<VerifierSample> build_verifier_dataset(const dual::TrajectoryStore& trajs,
                                                   const dual::TimeVAE& vae, double sigma_a,
                                                   std::size_t aug_per_state,
                                                   std::mt19937_64& rng) {
  if (sigma_a < 0.0) throw ConfigError("build_verifier_dataset: sigma_a must be >= 0");
  std::normal_distribution<double> normal;
  std::vector<VerifierSample> out;
  out.reserve(trajs.state_count() * (1 + aug_per_state));
  for (const auto& tr : trajs.trajectories) {
    for (const auto& s : tr.states) {
      out.push_back({s.state, s.graph, tr.terminal_reward});
      for (std::size_t a = 0; a < aug_per_state; ++a) {
        LatentState p = s.state;
        for (auto& x : p.z) x += sigma_a * normal(rng);
        Graph g = sigma_a == 0.0 ? s.graph : vae.decode(p);
        out.push_back({std::move(p), std::move(g), tr.terminal_reward});
      }
    }
  }
  return out;
}

nn::Var verifier_forward(nn::Tape& tape, const VerifierModel& v,
                         const std::vector<const VerifierSample*>& batch) {
  if (batch.empty()) throw ConfigError("verifier_forward: empty batch");
  nn::GraphBatch gb;
  nn::Tensor zin(batch.size(), v.dz + diffusion::kTimeFeatures);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = *batch[b];
    if (s.state.z.size() != v.dz) throw ContractViolation("verifier: latent dimension mismatch");
    std::vector<int> labels;
    for (std::size_t i = 0; i < s.graph.n(); ++i) {
      for (std::size_t j = i + 1; j < s.graph.n(); ++j) labels.push_back(s.graph.edge(i, j));
    }
    gb.append(s.graph.n(), labels);
    std::copy(s.state.z.begin(), s.state.z.end(), zin.row(b).begin());
    const auto e = diffusion::time_embedding(s.state.t, v.T);
    std::copy(e.begin(), e.end(), zin.row(b).begin() + static_cast<std::ptrdiff_t>(v.dz));
  }
  nn::Tensor x(gb.nodes(), kNodeFeatures);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& g = batch[b]->graph;
    for (std::size_t i = 0; i < g.n(); ++i) {
      const std::size_t r = gb.node_offset[b] + i;
      x(r, static_cast<std::size_t>(g.label(i))) = 1.0;
      std::size_t plain = 0;
      for (std::size_t j = 0; j < g.n(); ++j) plain += g.edge(i, j) != 0;
      x(r, graph::kNodeCategories) = g.weighted_degree(i) / 4.0;
      x(r, graph::kNodeCategories + 1) = static_cast<double>(plain) / 4.0;
    }
  }
  nn::Var q = nn::forward(tape, v.latent, tape.constant(std::move(zin)));
  nn::Var h = nn::forward(tape, v.node_in, tape.constant(std::move(x)));
  h = nn::forward(tape, v.conv1, h, gb);
  h = nn::forward(tape, v.conv2, h, gb);
  nn::Var qw = nn::matmul(tape, q, tape.param(v.bilinear));
  nn::Var scores = nn::scale(tape, nn::row_dot(tape, nn::broadcast_segments(tape, qw, gb), h),
                             1.0 / std::sqrt(static_cast<double>(v.hidden)));
  nn::Var attended = nn::attention_pool(tape, scores, h, gb);
  nn::Var summed = nn::scale(tape, nn::segment_sum(tape, h, gb),
                             1.0 / static_cast<double>(graph::kMaxNodes));
  nn::Var fused = nn::concat_cols(tape, nn::concat_cols(tape, q, attended), summed);
  return nn::forward(tape, v.head_out, nn::forward(tape, v.head_hidden, fused));
}

nn::Var verifier_loss(nn::Tape& tape, const VerifierModel& v,
                      const std::vector<const VerifierSample*>& batch) {
  nn::Tensor target(batch.size(), 1);
  for (std::size_t b = 0; b < batch.size(); ++b) target[b] = batch[b]->target;
  return nn::mse_rows(tape, verifier_forward(tape, v, batch), tape.constant(std::move(target)));
}

std::vector<double> train_verifier(const std::vector<VerifierSample>& samples, VerifierModel& v,
                                   const VerifierTrainOptions& opt, std::mt19937_64& rng) {
  if (samples.empty()) throw ConfigError("train_verifier: empty sample set");
  const std::size_t per_epoch = opt.samples_per_epoch ? opt.samples_per_epoch : samples.size();
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  std::vector<double> history;
  for (std::size_t ep = 0; ep < opt.epochs; ++ep) {
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < per_epoch; b0 += opt.batch) {
      const std::size_t rows = std::min(opt.batch, per_epoch - b0);
      std::vector<const VerifierSample*> batch(rows);
      for (auto& p : batch) p = &samples[pick(rng)];
      nn::Tape tape(&v.params);
      nn::Var loss = verifier_loss(tape, v, batch);
      const double val = tape.value(loss).item();
      if (!std::isfinite(val)) {
        throw EvaluationError("train_verifier: non-finite loss at epoch " + std::to_string(ep));
      }
      tape.backward(loss);
      nn::adam_step(v.params, opt.adam);
      total += val;
      ++batches;
    }
    history.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  return history;
}

std::vector<double> predict_values(const VerifierModel& v,
                                   const std::vector<const VerifierSample*>& batch) {
  nn::Tape tape(v.params);
  const auto& out = tape.value(verifier_forward(tape, v, batch));
  return out.storage();
}

double predict_value(const VerifierModel& v, const LatentState& z, const Graph& g) {
  const VerifierSample s{z, g, 0.0};
  return predict_values(v, {&s}).front();
}

namespace {

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ConfigError("spearman: need aligned samples");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace treediff::verifier
