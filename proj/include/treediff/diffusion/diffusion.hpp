#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "treediff/nn/layers.hpp"
#include "treediff/nn/params.hpp"

namespace treediff::diffusion {

enum class ScheduleKind { Linear, Cosine };

std::string to_string(ScheduleKind k);
ScheduleKind schedule_kind_from_string(const std::string& s);

/// Variance schedule over t = 1..T. Arrays are indexed by t (slot 0 unused for
/// beta; alpha_bar[0] == 1).
struct NoiseSchedule {
  std::size_t T = 0;
  ScheduleKind kind = ScheduleKind::Linear;
  std::vector<double> beta;        // beta[t]
  std::vector<double> alpha_bar;   // prod_{s<=t} (1 - beta[s])
  std::vector<double> beta_tilde;  // posterior variance, beta_tilde[1] == 0
};

/// Linear: betas from 1e-4 to 0.02 rescaled by 1000/T, so that short chains
/// still end near pure noise. Cosine: the squared-cosine alpha_bar with offset
/// 0.008; the final betas are capped at the smallest of 0.2, 0.3, 0.5, 0.8, 0.999
/// that keeps alpha_bar_T below 1e-3. Throws ConfigError for T < 2.
NoiseSchedule make_schedule(std::size_t T, ScheduleKind kind = ScheduleKind::Linear);
/// Rebuilds derived quantities from an explicit beta list (beta.size() == T).
NoiseSchedule schedule_from_betas(ScheduleKind kind, std::vector<double> betas);

nlohmann::json to_json(const NoiseSchedule& s);
NoiseSchedule schedule_from_json(const nlohmann::json& j);

struct LatentState {
  std::vector<double> z;
  std::size_t t = 0;

  friend bool operator==(const LatentState&, const LatentState&) = default;
};

/// (t/T, sin 2*pi*t/T, cos 2*pi*t/T)
std::array<double, 3> time_embedding(std::size_t t, std::size_t T);
inline constexpr std::size_t kTimeFeatures = 3;

/// Counter-based Gaussian noise: the vector for (stream, t) depends only on
/// the pair, so sibling trajectories can share or fork noise deterministically.
class NoiseStream {
 public:
  explicit NoiseStream(std::uint64_t id = 0) : id_(id) {}
  std::uint64_t id() const { return id_; }
  std::vector<double> at(std::size_t t, std::size_t dim) const;
  /// Derived stream for child `index` of this stream.
  NoiseStream fork(std::uint64_t index) const;

 private:
  std::uint64_t id_;
};

std::uint64_t mix64(std::uint64_t x);

/// Noise-prediction network eps_theta(z_t, t): an MLP on z ⊕ time embedding.
struct DenoiserModel {
  nn::ParamStore params;
  nn::Mlp net;
  std::size_t dz = 0;
  NoiseSchedule schedule;

  DenoiserModel() = default;
  DenoiserModel(std::size_t dz, std::size_t hidden, NoiseSchedule schedule, std::uint64_t seed);

  std::vector<double> predict_eps(std::span<const double> z, std::size_t t) const;
};

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps. Throws ContractViolation unless 1 <= t <= T.
LatentState forward_noise(std::span<const double> z0, std::size_t t, const NoiseSchedule& s,
                          std::span<const double> eps);
LatentState forward_noise(std::span<const double> z0, std::size_t t, const NoiseSchedule& s,
                          std::mt19937_64& rng);

/// Mean over the batch of ||eps_theta(z_t, t) - eps||^2 (rows of zt, times, eps align).
nn::Var diffusion_loss(nn::Tape& tape, const DenoiserModel& m, const nn::Tensor& zt,
                       const std::vector<std::size_t>& times, const nn::Tensor& eps);

struct TrainOptions {
  std::size_t epochs = 0;
  std::size_t batch = 64;
  nn::AdamConfig adam;
};

/// Trains on clean latents (one per row). Returns the mean loss of every epoch.
/// Throws EvaluationError on a non-finite loss.
std::vector<double> train_denoiser(const std::vector<std::vector<double>>& latents,
                                   DenoiserModel& m, const TrainOptions& opt,
                                   std::mt19937_64& rng);

/// Posterior mean mu_theta(z_t, t).
std::vector<double> posterior_mean(const LatentState& s, const DenoiserModel& m);

/// z_{t-1} = mu_theta(z_t, t) + sqrt(beta_tilde_t) xi.
LatentState reverse_step(const LatentState& s, const DenoiserModel& m, std::span<const double> xi);

/// k sequential reverse steps; noises[i] is used at time s.t - i.
LatentState macro_step(const LatentState& s, std::size_t k, const DenoiserModel& m,
                       std::span<const std::vector<double>> noises);
/// Convenience overload drawing the noises from a stream.
LatentState macro_step(const LatentState& s, std::size_t k, const DenoiserModel& m,
                       const NoiseStream& stream);

/// z_T drawn from the stream at index T + 1 (reserved for initial states).
LatentState initial_state(const DenoiserModel& m, const NoiseStream& stream);

}  // namespace treediff::diffusion
