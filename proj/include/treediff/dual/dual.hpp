#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "treediff/counters.hpp"
#include "treediff/diffusion/diffusion.hpp"
#include "treediff/graph/graph.hpp"
#include "treediff/nn/layers.hpp"

namespace treediff::dual {

using diffusion::DenoiserModel;
using diffusion::LatentState;
using diffusion::NoiseSchedule;
using diffusion::NoiseStream;
using graph::Graph;

/// Time-conditioned VAE between flat graph tensors and R^dz.
///
/// The encoder network yields (mu, logvar) for the clean latent; the posterior
/// at time t is the diffused Gaussian N(sqrt(a_t) mu, a_t exp(logvar) + 1 - a_t)
/// with a_t = alpha_bar_t, so encodings live on the same scale as z_t.
struct TimeVAE {
  nn::ParamStore params;
  nn::Mlp encoder;
  nn::Mlp decoder;
  std::size_t dz = 0;
  double lambda_kl = 0.0;
  NoiseSchedule schedule;

  TimeVAE() = default;
  TimeVAE(std::size_t dz, std::size_t hidden, NoiseSchedule schedule, double lambda_kl,
          std::uint64_t seed);

  /// Posterior mean sqrt(a_t) mu(x, t).
  std::vector<double> encode_flat(std::span<const double> x, std::size_t t) const;
  LatentState encode(const Graph& g, std::size_t t) const;
  std::vector<double> decode_logits(std::span<const double> z, std::size_t t) const;
  Graph decode(const LatentState& s) const;
};

/// Reconstruction (sum of squares per row, averaged) plus lambda_kl times the
/// diffused KL. Row r of `input` is encoded at times[r]; eps_prior and eps_diff
/// are the reparameterisation draws for the clean latent and the diffusion noise.
nn::Var vae_loss(nn::Tape& tape, const TimeVAE& vae, const nn::Tensor& input,
                 const nn::Tensor& target, const std::vector<std::size_t>& times,
                 const nn::Tensor& eps_prior, const nn::Tensor& eps_diff);

struct VaeTrainOptions {
  std::size_t epochs = 0;
  std::size_t batch = 32;
  /// Probability of training on t = 0 instead of a uniform time.
  double clean_fraction = 0.5;
  /// Rows drawn per epoch (0 means the whole set once).
  std::size_t samples_per_epoch = 0;
  /// Distillation only: share of rows drawn from clean replay graphs with the bootstrap recipe.
  double replay_fraction = 0.0;
  nn::AdamConfig adam;
};

/// Bootstrap stage: clean graphs, input forward-noised in tensor space at a random
/// t, target the clean tensor. Returns per-epoch mean losses.
std::vector<double> train_vae_bootstrap(const std::vector<Graph>& data, TimeVAE& vae,
                                        const VaeTrainOptions& opt, std::mt19937_64& rng);

/// Message-passing model p_psi(G, t) producing node and pair logits.
struct DiscreteRefiner {
  nn::ParamStore params;
  nn::Dense input;
  nn::GraphConv conv1;
  nn::GraphConv conv2;
  nn::Dense node_head;
  nn::Dense edge_head;
  std::size_t T = 0;

  DiscreteRefiner() = default;
  DiscreteRefiner(std::size_t hidden, std::size_t T, std::uint64_t seed);
  /// Sets every parameter to zero (uniform logits).
  void zero();
};

struct RefinerOutput {
  nn::Var node_logits;  // nodes x 4
  nn::Var pair_logits;  // pairs x 3, pairs in GraphBatch order
};

RefinerOutput refiner_forward(nn::Tape& tape, const DiscreteRefiner& r,
                              const std::vector<const Graph*>& graphs,
                              const std::vector<std::size_t>& times, nn::GraphBatch& batch);

/// Squared error of the logits against the one-hot targets, summed per graph
/// and averaged over graphs. inputs[i] and targets[i] must have equal n.
nn::Var denoise_loss(nn::Tape& tape, const DiscreteRefiner& r,
                     const std::vector<const Graph*>& inputs,
                     const std::vector<const Graph*>& targets,
                     const std::vector<std::size_t>& times);

/// One application of p_psi followed by the symmetrise + argmax decode.
Graph refiner_apply(const DiscreteRefiner& r, const Graph& g, std::size_t t);

/// Greedy downgrade until valid: highest excess node first (ties by index),
/// highest-label incident edge first (ties: neighbour with larger excess, then index).
Graph repair_validity(Graph g, const graph::ValidityRule& rule);

/// m applications of p_psi, each followed by validity repair. m = 0 is identity.
Graph refine(const Graph& g, std::size_t t, std::size_t m, const DiscreteRefiner& r,
             const graph::ValidityRule& rule = {});

struct GuidanceConfig {
  double sigma_g = 1.0;
  double h = 1.0;
  double n_fraction = 0.5;
  double m_fraction = 0.1;
  /// When false the anchor is never computed and g is the zero vector.
  bool enabled = true;
  /// Recompute g after every guided step instead of once per macro step.
  bool recompute_each_step = false;

  void validate() const;
};

/// (anchor - current) / sigma_g^2
std::vector<double> guidance_vector(std::span<const double> anchor, std::span<const double> current,
                                    double sigma_g);

/// z_{t-1} = mu_theta(z_t, t) + h beta_tilde_t g + sqrt(beta_tilde_t) xi
LatentState guided_reverse_step(const LatentState& s, std::span<const double> g, double h,
                                const DenoiserModel& m, std::span<const double> xi);

struct Models {
  const DenoiserModel* denoiser = nullptr;
  const TimeVAE* vae = nullptr;
  const DiscreteRefiner* refiner = nullptr;
  graph::ValidityRule rule;
};

struct MacroResult {
  LatentState state;
  Graph decoded;    // Dec(z_{t-k}, t-k)
  Graph structure;  // decoded, refined with m steps: always valid
  std::vector<double> guidance;  // g used for the guided steps (zero when off)
  std::size_t n = 0;
  std::size_t m = 0;
};

std::size_t unguided_steps(std::size_t k, const GuidanceConfig& cfg);
std::size_t refine_steps(std::size_t k, const GuidanceConfig& cfg);

/// Dual-space macro step: n unguided steps, decode, refine, re-encode at t - n
/// for the anchor, then k - n guided steps. Noise for time t' is stream.at(t').
/// The refinement steps do not consume diffusion time.
MacroResult dual_space_macro_step(const LatentState& s, std::size_t k, const GuidanceConfig& cfg,
                                  const Models& models, const NoiseStream& stream,
                                  CallCounters* counters = nullptr);

struct TrajectoryState {
  LatentState state;
  Graph graph;
};

struct Trajectory {
  std::size_t id = 0;
  std::vector<TrajectoryState> states;  // t = T, T-1, ..., 0
  double terminal_reward = 0.0;
};

struct TrajectoryStore {
  std::size_t T = 0;
  std::vector<Trajectory> trajectories;

  std::size_t state_count() const;
  /// Throws ContractViolation unless every trajectory holds T+1 states in order.
  void check() const;
  /// One JSON object per state: {traj_id, t, z, graph, terminal_reward}.
  void save_jsonl(const std::string& path) const;
  static TrajectoryStore load_jsonl(const std::string& path);
};

/// `count` unguided rollouts from z_T (streams forked from `seed`), every state decoded.
TrajectoryStore distill_trajectories(const DenoiserModel& m, const TimeVAE& vae, std::size_t count,
                                     std::uint64_t seed, const graph::RewardSpec& spec = {},
                                     const graph::ValidityRule& rule = {});

/// Like distill_trajectories but keeps only `states_per_traj` distinct times per
/// rollout (uniform without replacement, stored in decreasing t). The result is
/// a sparse store: check() does not hold for it.
TrajectoryStore distill_state_samples(const DenoiserModel& m, const TimeVAE& vae, std::size_t count,
                                      std::size_t states_per_traj, std::uint64_t seed,
                                      const graph::RewardSpec& spec = {},
                                      const graph::ValidityRule& rule = {});

/// Distillation stage: reconstruct trajectory structures G_t through Enc/Dec at time t.
std::vector<double> train_vae(const TrajectoryStore& trajs, TimeVAE& vae,
                              const VaeTrainOptions& opt, std::mt19937_64& rng,
                              const std::vector<Graph>* replay = nullptr);

struct RefinerTrainOptions {
  std::size_t epochs = 0;
  std::size_t batch = 32;
  std::size_t samples_per_epoch = 0;
  nn::AdamConfig adam;
};

/// Consecutive pairs (G_{t+1}, t+1) -> G_t with equal node counts.
struct RefinerPair {
  const Graph* input;
  const Graph* target;
  std::size_t t;
};
std::vector<RefinerPair> refiner_pairs(const TrajectoryStore& trajs);

std::vector<double> train_refiner(const TrajectoryStore& trajs, DiscreteRefiner& r,
                                  const RefinerTrainOptions& opt, std::mt19937_64& rng);

}  // namespace treediff::dual
