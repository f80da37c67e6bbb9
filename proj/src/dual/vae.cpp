#include <cmath>
#include <numeric>

#include "treediff/dual/dual.hpp"

namespace treediff::dual {

namespace {

nn::Tensor time_block(const std::vector<std::size_t>& times, std::size_t T) {
  nn::Tensor e(times.size(), diffusion::kTimeFeatures);
  for (std::size_t r = 0; r < times.size(); ++r) {
    const auto v = diffusion::time_embedding(times[r], T);
    std::copy(v.begin(), v.end(), e.row(r).begin());
  }
  return e;
}

nn::Tensor with_time(std::span<const double> x, std::size_t t, std::size_t T) {
  nn::Tensor in(1, x.size() + diffusion::kTimeFeatures);
  std::copy(x.begin(), x.end(), in.values().begin());
  const auto e = diffusion::time_embedding(t, T);
  std::copy(e.begin(), e.end(), in.values().begin() + static_cast<std::ptrdiff_t>(x.size()));
  return in;
}

}  // namespace

TimeVAE::TimeVAE(std::size_t dz_, std::size_t hidden, NoiseSchedule sched, double lkl,
                 std::uint64_t seed)
    : dz(dz_), lambda_kl(lkl), schedule(std::move(sched)) {
  if (lambda_kl < 0.0) throw ConfigError("TimeVAE: lambda_kl must be >= 0");
  std::mt19937_64 rng(seed);
  const std::size_t tf = diffusion::kTimeFeatures;
  encoder = nn::make_mlp(params, "enc", {graph::kFlatDim + tf, hidden, hidden, 2 * dz}, rng);
  decoder = nn::make_mlp(params, "dec", {dz + tf, hidden, hidden, graph::kFlatDim}, rng);
}

std::vector<double> TimeVAE::encode_flat(std::span<const double> x, std::size_t t) const {
  if (x.size() != graph::kFlatDim) throw ContractViolation("TimeVAE::encode: bad input width");
  if (t > schedule.T) throw ContractViolation("TimeVAE::encode: t outside 0..T");
  const nn::Tensor h = nn::forward_mlp(params, encoder, with_time(x, t, schedule.T));
  const double a = std::sqrt(schedule.alpha_bar[t]);
  std::vector<double> z(dz);
  for (std::size_t i = 0; i < dz; ++i) z[i] = a * h[i];
  return z;
}

LatentState TimeVAE::encode(const Graph& g, std::size_t t) const {
  return {encode_flat(graph::to_flat(g), t), t};
}

std::vector<double> TimeVAE::decode_logits(std::span<const double> z, std::size_t t) const {
  if (z.size() != dz) throw ContractViolation("TimeVAE::decode: bad latent width");
  if (t > schedule.T) throw ContractViolation("TimeVAE::decode: t outside 0..T");
  return nn::forward_mlp(params, decoder, with_time(z, t, schedule.T)).storage();
}

Graph TimeVAE::decode(const LatentState& s) const {
  return graph::from_flat(decode_logits(s.z, s.t));
}

nn::Var vae_loss(nn::Tape& tape, const TimeVAE& vae, const nn::Tensor& input,
                 const nn::Tensor& target, const std::vector<std::size_t>& times,
                 const nn::Tensor& eps_prior, const nn::Tensor& eps_diff) {
  const std::size_t rows = input.rows();
  if (times.size() != rows || target.rows() != rows || eps_prior.rows() != rows ||
      eps_diff.rows() != rows || eps_prior.cols() != vae.dz || !eps_prior.same_shape(eps_diff)) {
    throw ConfigError("vae_loss: batch shapes disagree");
  }
  std::vector<double> keep(rows), sig(rows), spread(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    keep[r] = vae.schedule.alpha_bar[times[r]];
    sig[r] = std::sqrt(keep[r]);
    spread[r] = std::sqrt(1.0 - keep[r]);
  }
  nn::Var temb = tape.constant(time_block(times, vae.schedule.T));
  nn::Var h = nn::forward(tape, vae.encoder, nn::concat_cols(tape, tape.constant(input), temb));
  nn::Var mu = nn::slice_cols(tape, h, 0, vae.dz);
  nn::Var logvar = nn::slice_cols(tape, h, vae.dz, vae.dz);
  nn::Var sd = nn::exp(tape, nn::scale(tape, logvar, 0.5));
  nn::Var clean = nn::add(tape, mu, nn::mul(tape, sd, tape.constant(eps_prior)));
  nn::Var z = nn::add(tape, nn::scale_rows(tape, clean, sig),
                      nn::scale_rows(tape, tape.constant(eps_diff), spread));
  nn::Var recon = nn::forward(tape, vae.decoder, nn::concat_cols(tape, z, temb));
  nn::Var loss = nn::mse_rows(tape, recon, tape.constant(target));
  if (vae.lambda_kl > 0.0) {
    loss = nn::add(tape, loss,
                   nn::scale(tape, nn::diffused_kl_rows(tape, mu, logvar, keep), vae.lambda_kl));
  }
  return loss;
}

namespace {

struct VaeRow {
  std::vector<double> input;
  std::vector<double> target;
  std::size_t t;
};

// Shared minibatch loop; `draw` produces one training row.
template <class Draw>
std::vector<double> vae_epochs(TimeVAE& vae, const VaeTrainOptions& opt, std::size_t rows_per_epoch,
                               std::mt19937_64& rng, Draw&& draw, const char* stage) {
  std::vector<double> history;
  std::normal_distribution<double> normal;
  for (std::size_t ep = 0; ep < opt.epochs; ++ep) {
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < rows_per_epoch; b0 += opt.batch) {
      const std::size_t rows = std::min(opt.batch, rows_per_epoch - b0);
      nn::Tensor input(rows, graph::kFlatDim), target(rows, graph::kFlatDim);
      nn::Tensor ep1(rows, vae.dz), ep2(rows, vae.dz);
      std::vector<std::size_t> times(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        VaeRow row = draw(b0 + r);
        std::copy(row.input.begin(), row.input.end(), input.row(r).begin());
        std::copy(row.target.begin(), row.target.end(), target.row(r).begin());
        times[r] = row.t;
        for (auto& x : ep1.row(r)) x = normal(rng);
        for (auto& x : ep2.row(r)) x = normal(rng);
      }
      nn::Tape tape(&vae.params);
      nn::Var loss = vae_loss(tape, vae, input, target, times, ep1, ep2);
      const double v = tape.value(loss).item();
      if (!std::isfinite(v)) {
        throw EvaluationError(std::string(stage) + ": non-finite loss at epoch " +
                              std::to_string(ep));
      }
      tape.backward(loss);
      nn::adam_step(vae.params, opt.adam);
      total += v;
      ++batches;
    }
    history.push_back(total / static_cast<double>(std::max<std::size_t>(batches, 1)));
  }
  return history;
}

}  // namespace

std::vector<double> train_vae_bootstrap(const std::vector<Graph>& data, TimeVAE& vae,
                                        const VaeTrainOptions& opt, std::mt19937_64& rng) {
  if (data.empty()) throw ConfigError("train_vae_bootstrap: empty dataset");
  std::vector<std::vector<double>> flat;
  flat.reserve(data.size());
  for (const auto& g : data) flat.push_back(graph::to_flat(g));
  const std::size_t per_epoch = opt.samples_per_epoch ? opt.samples_per_epoch : data.size();
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<std::size_t> tdist(1, vae.schedule.T);
  std::bernoulli_distribution clean(opt.clean_fraction);
  std::normal_distribution<double> normal;
  std::size_t cursor = order.size();
  auto draw = [&](std::size_t) {
    if (cursor == order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const auto& x0 = flat[order[cursor++]];
    VaeRow row{x0, x0, clean(rng) ? 0 : tdist(rng)};
    if (row.t > 0) {
      const double a = std::sqrt(vae.schedule.alpha_bar[row.t]);
      const double b = std::sqrt(1.0 - vae.schedule.alpha_bar[row.t]);
      for (auto& x : row.input) x = a * x + b * normal(rng);
    }
    return row;
  };
  return vae_epochs(vae, opt, per_epoch, rng, draw, "vae bootstrap");
}

std::vector<double> train_vae(const TrajectoryStore& trajs, TimeVAE& vae,
                              const VaeTrainOptions& opt, std::mt19937_64& rng,
                              const std::vector<Graph>* replay) {
  if (trajs.trajectories.empty()) throw ConfigError("train_vae: empty trajectory store");
  if (opt.replay_fraction > 0.0 && (!replay || replay->empty())) {
    throw ConfigError("train_vae: replay_fraction > 0 needs replay graphs");
  }
  std::vector<const TrajectoryState*> states;
  for (const auto& tr : trajs.trajectories) {
    for (const auto& s : tr.states) states.push_back(&s);
  }
  const std::size_t per_epoch = opt.samples_per_epoch ? opt.samples_per_epoch : states.size();
  std::uniform_int_distribution<std::size_t> pick(0, states.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_replay(0, replay && !replay->empty() ? replay->size() - 1 : 0);
  std::bernoulli_distribution use_replay(opt.replay_fraction);
  std::uniform_int_distribution<std::size_t> tdist(1, vae.schedule.T);
  std::bernoulli_distribution clean(opt.clean_fraction);
  std::normal_distribution<double> normal;
  auto draw = [&](std::size_t) {
    if (opt.replay_fraction > 0.0 && use_replay(rng)) {
      const auto x0 = graph::to_flat((*replay)[pick_replay(rng)]);
      VaeRow row{x0, x0, clean(rng) ? 0 : tdist(rng)};
      if (row.t > 0) {
        const double a = std::sqrt(vae.schedule.alpha_bar[row.t]);
        const double b = std::sqrt(1.0 - vae.schedule.alpha_bar[row.t]);
        for (auto& x : row.input) x = a * x + b * normal(rng);
      }
      return row;
    }
    const auto* s = states[pick(rng)];
    auto x = graph::to_flat(s->graph);
    return VaeRow{x, x, s->state.t};
  };
  return vae_epochs(vae, opt, per_epoch, rng, draw, "vae distillation");
}

}  // namespace treediff::dual
