#include "treediff/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace treediff::diffusion {

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown schedule kind: " + s);
}

NoiseSchedule schedule_from_betas(ScheduleKind kind, std::vector<double> betas) {
  if (betas.size() < 2) throw ConfigError("noise schedule needs T >= 2");
  NoiseSchedule s;
  s.T = betas.size();
  s.kind = kind;
  s.beta.assign(s.T + 1, 0.0);
  s.alpha_bar.assign(s.T + 1, 1.0);
  s.beta_tilde.assign(s.T + 1, 0.0);
  for (std::size_t t = 1; t <= s.T; ++t) {
    const double b = betas[t - 1];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("noise schedule: beta outside (0, 1)");
    if (t > 1 && b < s.beta[t - 1]) throw ConfigError("noise schedule: betas must be nondecreasing");
    s.beta[t] = b;
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - b);
  }
  for (std::size_t t = 2; t <= s.T; ++t) {
    s.beta_tilde[t] = s.beta[t] * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
  }
  return s;
}

NoiseSchedule make_schedule(std::size_t T, ScheduleKind kind) {
  if (T < 2) throw ConfigError("noise schedule needs T >= 2, got " + std::to_string(T));
  std::vector<double> betas(T);
  if (kind == ScheduleKind::Linear) {
    const double scale = 1000.0 / static_cast<double>(T);
    const double lo = 1e-4 * scale;
    const double hi = std::min(0.02 * scale, 0.999);
    for (std::size_t i = 0; i < T; ++i) {
      betas[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(T - 1);
    }
  } else {
    constexpr double s = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2);
      return c * c;
    };
    // Smallest cap on the final betas that still leaves alpha_bar_T < 1e-3;
    // large final betas amplify denoiser error by 1 / sqrt(1 - beta).
    for (double cap : {0.2, 0.3, 0.5, 0.8, 0.999}) {
      double keep = 1.0;
      for (std::size_t t = 1; t <= T; ++t) {
        const double b = 1.0 - f(static_cast<double>(t)) / f(static_cast<double>(t - 1));
        betas[t - 1] = std::clamp(b, 1e-8, cap);
        if (t > 1) betas[t - 1] = std::max(betas[t - 1], betas[t - 2]);
        keep *= 1.0 - betas[t - 1];
      }
      if (keep < 1e-3) break;
    }
  }
  return schedule_from_betas(kind, std::move(betas));
}

nlohmann::json to_json(const NoiseSchedule& s) {
  return {{"T", s.T},
          {"kind", to_string(s.kind)},
          {"beta", std::vector<double>(s.beta.begin() + 1, s.beta.end())}};
}

NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  auto betas = j.at("beta").get<std::vector<double>>();
  if (betas.size() != j.at("T").get<std::size_t>()) {
    throw ConfigError("schedule JSON: beta list length differs from T");
  }
  return schedule_from_betas(schedule_kind_from_string(j.at("kind").get<std::string>()),
                             std::move(betas));
}

std::array<double, 3> time_embedding(std::size_t t, std::size_t T) {
  const double u = static_cast<double>(t) / static_cast<double>(T);
  return {u, std::sin(2.0 * std::numbers::pi * u), std::cos(2.0 * std::numbers::pi * u)};
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::vector<double> NoiseStream::at(std::size_t t, std::size_t dim) const {
  std::mt19937_64 rng(mix64(id_ ^ mix64(static_cast<std::uint64_t>(t) + 0x5bd1e995ULL)));
  std::normal_distribution<double> normal;
  std::vector<double> v(dim);
  for (auto& x : v) x = normal(rng);
  return v;
}

NoiseStream NoiseStream::fork(std::uint64_t index) const {
  return NoiseStream(mix64(id_ * 0x100000001b3ULL + mix64(index + 1)));
}

DenoiserModel::DenoiserModel(std::size_t dz_, std::size_t hidden, NoiseSchedule sched,
                             std::uint64_t seed)
    : dz(dz_), schedule(std::move(sched)) {
  std::mt19937_64 rng(seed);
  net = nn::make_mlp(params, "eps", {dz + kTimeFeatures, hidden, hidden, dz}, rng);
}

namespace {

nn::Tensor with_time(std::span<const double> z, std::size_t t, std::size_t T) {
  nn::Tensor x(1, z.size() + kTimeFeatures);
  std::copy(z.begin(), z.end(), x.values().begin());
  const auto e = time_embedding(t, T);
  std::copy(e.begin(), e.end(), x.values().begin() + static_cast<std::ptrdiff_t>(z.size()));
  return x;
}

void require_dim(std::span<const double> v, std::size_t d, const char* what) {
  if (v.size() != d) {
    throw ContractViolation(std::string(what) + ": expected dimension " + std::to_string(d) +
                            ", got " + std::to_string(v.size()));
  }
}

}  // namespace

std::vector<double> DenoiserModel::predict_eps(std::span<const double> z, std::size_t t) const {
  require_dim(z, dz, "predict_eps");
  const nn::Tensor out = nn::forward_mlp(params, net, with_time(z, t, schedule.T));
  return out.storage();
}

LatentState forward_noise(std::span<const double> z0, std::size_t t, const NoiseSchedule& s,
                          std::span<const double> eps) {
  if (t < 1 || t > s.T) throw ContractViolation("forward_noise: t outside 1..T");
  require_dim(eps, z0.size(), "forward_noise");
  const double a = std::sqrt(s.alpha_bar[t]);
  const double b = std::sqrt(1.0 - s.alpha_bar[t]);
  LatentState out{std::vector<double>(z0.size()), t};
  for (std::size_t i = 0; i < z0.size(); ++i) out.z[i] = a * z0[i] + b * eps[i];
  return out;
}

LatentState forward_noise(std::span<const double> z0, std::size_t t, const NoiseSchedule& s,
                          std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::vector<double> eps(z0.size());
  for (auto& e : eps) e = normal(rng);
  return forward_noise(z0, t, s, eps);
}

nn::Var diffusion_loss(nn::Tape& tape, const DenoiserModel& m, const nn::Tensor& zt,
                       const std::vector<std::size_t>& times, const nn::Tensor& eps) {
  if (zt.rows() != times.size() || !zt.same_shape(eps) || zt.cols() != m.dz) {
    throw ConfigError("diffusion_loss: batch shapes disagree");
  }
  nn::Tensor temb(zt.rows(), kTimeFeatures);
  for (std::size_t r = 0; r < zt.rows(); ++r) {
    const auto e = time_embedding(times[r], m.schedule.T);
    std::copy(e.begin(), e.end(), temb.row(r).begin());
  }
  nn::Var x = nn::concat_cols(tape, tape.constant(zt), tape.constant(std::move(temb)));
  nn::Var pred = nn::forward(tape, m.net, x);
  return nn::mse_rows(tape, pred, tape.constant(eps));
}

std::vector<double> train_denoiser(const std::vector<std::vector<double>>& latents,
                                   DenoiserModel& m, const TrainOptions& opt,
                                   std::mt19937_64& rng) {
  if (latents.empty()) throw ConfigError("train_denoiser: empty latent dataset");
  std::vector<double> history;
  std::vector<std::size_t> order(latents.size());
  std::iota(order.begin(), order.end(), 0);
  std::uniform_int_distribution<std::size_t> tdist(1, m.schedule.T);
  std::normal_distribution<double> normal;
  for (std::size_t ep = 0; ep < opt.epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch) {
      const std::size_t rows = std::min(opt.batch, order.size() - b0);
      nn::Tensor zt(rows, m.dz), eps(rows, m.dz);
      std::vector<std::size_t> times(rows);
      for (std::size_t r = 0; r < rows; ++r) {
        times[r] = tdist(rng);
        for (auto& e : eps.row(r)) e = normal(rng);
        const auto s = forward_noise(latents[order[b0 + r]], times[r], m.schedule, eps.row(r));
        std::copy(s.z.begin(), s.z.end(), zt.row(r).begin());
      }
      nn::Tape tape(&m.params);
      nn::Var loss = diffusion_loss(tape, m, zt, times, eps);
      const double v = tape.value(loss).item();
      if (!std::isfinite(v)) {
        throw EvaluationError("train_denoiser: non-finite loss at epoch " + std::to_string(ep));
      }
      tape.backward(loss);
      nn::adam_step(m.params, opt.adam);
      total += v;
      ++batches;
    }
    history.push_back(total / static_cast<double>(batches));
  }
  return history;
}

std::vector<double> posterior_mean(const LatentState& s, const DenoiserModel& m) {
  if (s.t < 1 || s.t > m.schedule.T) throw ContractViolation("reverse step from t outside 1..T");
  const auto eps = m.predict_eps(s.z, s.t);
  const auto& sc = m.schedule;
  const double coef = sc.beta[s.t] / std::sqrt(1.0 - sc.alpha_bar[s.t]);
  const double inv = 1.0 / std::sqrt(1.0 - sc.beta[s.t]);
  std::vector<double> mu(s.z.size());
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] = (s.z[i] - coef * eps[i]) * inv;
  return mu;
}

LatentState reverse_step(const LatentState& s, const DenoiserModel& m, std::span<const double> xi) {
  auto mu = posterior_mean(s, m);
  require_dim(xi, m.dz, "reverse_step noise");
  const double sd = std::sqrt(m.schedule.beta_tilde[s.t]);
  if (s.t > 1) {
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += sd * xi[i];
  }
  return {std::move(mu), s.t - 1};
}

LatentState macro_step(const LatentState& s, std::size_t k, const DenoiserModel& m,
                       std::span<const std::vector<double>> noises) {
  if (k < 1 || k > s.t) throw ContractViolation("macro_step: k must lie in 1..t");
  if (noises.size() != k) throw ContractViolation("macro_step: need exactly k noise vectors");
  LatentState cur = s;
  for (std::size_t i = 0; i < k; ++i) cur = reverse_step(cur, m, noises[i]);
  return cur;
}

LatentState macro_step(const LatentState& s, std::size_t k, const DenoiserModel& m,
                       const NoiseStream& stream) {
  if (k < 1 || k > s.t) throw ContractViolation("macro_step: k must lie in 1..t");
  LatentState cur = s;
  for (std::size_t i = 0; i < k; ++i) cur = reverse_step(cur, m, stream.at(cur.t, m.dz));
  return cur;
}

LatentState initial_state(const DenoiserModel& m, const NoiseStream& stream) {
  return {stream.at(m.schedule.T + 1, m.dz), m.schedule.T};
}

}  // namespace treediff::diffusion
