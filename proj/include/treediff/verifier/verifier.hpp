#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "treediff/dual/dual.hpp"
#include "treediff/nn/layers.hpp"

namespace treediff::verifier {

using diffusion::LatentState;
using graph::Graph;

/// Dual-branch value model V_phi(z, G, t).
///
/// Latent branch: MLP on z ⊕ time embedding giving a query q. Graph branch: two
/// rounds of message passing over label one-hots giving node embeddings H.
/// Fusion: softmax(q W H^T / sqrt(d)) attention readout plus a sum readout,
/// then a small head on [q, attended, summed].
struct VerifierModel {
  nn::ParamStore params;
  nn::Mlp latent;
  nn::Dense node_in;
  nn::GraphConv conv1;
  nn::GraphConv conv2;
  std::size_t bilinear = 0;
  nn::Dense head_hidden;
  nn::Dense head_out;
  std::size_t hidden = 0;
  std::size_t dz = 0;
  std::size_t T = 0;

  VerifierModel() = default;
  VerifierModel(std::size_t dz, std::size_t hidden, std::size_t T, std::uint64_t seed);
};

struct VerifierSample {
  LatentState state;
  Graph graph;
  double target = 0.0;
};

/// Per state: the stored pair plus `aug_per_state` copies with z + N(0, sigma_a^2 I),
/// each decoded with the VAE. Every sample keeps its trajectory's terminal reward.
std::vector<VerifierSample> build_verifier_dataset(const dual::TrajectoryStore& trajs,
                                                   const dual::TimeVAE& vae, double sigma_a,
                                                   std::size_t aug_per_state,
                                                   std::mt19937_64& rng);

/// Predictions for a batch (graphs x 1).
nn::Var verifier_forward(nn::Tape& tape, const VerifierModel& v,
                         const std::vector<const VerifierSample*>& batch);
/// Mean squared error against the sample targets.
nn::Var verifier_loss(nn::Tape& tape, const VerifierModel& v,
                      const std::vector<const VerifierSample*>& batch);

struct VerifierTrainOptions {
  std::size_t epochs = 0;
  std::size_t batch = 64;
  std::size_t samples_per_epoch = 0;
  nn::AdamConfig adam;
};

std::vector<double> train_verifier(const std::vector<VerifierSample>& samples, VerifierModel& v,
                                   const VerifierTrainOptions& opt, std::mt19937_64& rng);

double predict_value(const VerifierModel& v, const LatentState& z, const Graph& g);
std::vector<double> predict_values(const VerifierModel& v,
                                   const std::vector<const VerifierSample*>& batch);

double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace treediff::verifier
