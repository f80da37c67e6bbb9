#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "treediff/search/search.hpp"

namespace treediff::harness {

namespace fs = std::filesystem;

struct ModelConfig {
  std::size_t dz = 32;
  std::size_t codec_hidden = 128;
  std::size_t denoiser_hidden = 64;
  std::size_t refiner_hidden = 32;
  std::size_t verifier_hidden = 32;
  double lambda_kl = 0.01;
};

struct TrainConfig {
  std::size_t train_graphs = 2000;
  std::size_t heldout_graphs = 500;
  std::size_t vae_epochs = 800;
  std::size_t denoiser_epochs = 1000;
  std::size_t trajectories = 500;
  std::size_t heldout_trajectories = 100;
  std::size_t vae_distill_epochs = 20;
  std::size_t vae_distill_samples = 4000;
  double vae_distill_lr = 3e-4;
  double vae_replay_fraction = 0.5;
  std::size_t refiner_epochs = 20;
  std::size_t refiner_samples = 4000;
  std::size_t verifier_rollouts = 20000;
  std::size_t verifier_states = 5;  // kept per rollout
  std::size_t verifier_epochs = 100;
  std::size_t verifier_samples = 8000;
  double sigma_a = 0.1;
  std::size_t aug_per_state = 2;
};

/// Weights for charging non-latent calls into the audited NFE (0 = reported only).
struct NfeCharges {
  double refiner = 0.0;
  double codec = 0.0;
  double verifier = 0.0;
};

/// latent_steps + the weighted refiner, codec and verifier calls.
double charged_nfe(const CallCounters& c, const NfeCharges& w);

struct BenchConfig {
  std::vector<std::size_t> budgets{1, 2, 4, 8};
  std::size_t seeds = 50;
  std::vector<std::string> methods{"standard", "bon", "beam", "treediff"};
  std::vector<double> ablation_sigmas{0.1, 0.5, 1.0, 10.0};
  std::size_t ablation_samples = 500;
  double mmd_bandwidth = 1.0;
  NfeCharges charges;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t T = 200;
  diffusion::ScheduleKind schedule = diffusion::ScheduleKind::Cosine;
  ModelConfig model;
  TrainConfig train;
  search::SearchConfig search;
  graph::RewardSpec reward;
  graph::ValidityRule rule;
  BenchConfig bench;
  std::string out_dir = "runs/default";

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const fs::path& path);

/// Versioned parameter checkpoint: {format, version, kind, meta, params: {name: {shape, values}}}.
void save_checkpoint(const fs::path& path, const std::string& kind, const nn::ParamStore& ps,
                     const nlohmann::json& meta = nlohmann::json::object());
/// Loads values into an already-shaped store; names and shapes must match.
nlohmann::json load_checkpoint(const fs::path& path, const std::string& kind, nn::ParamStore& ps);

/// Trained components plus the data the benchmarks compare against.
struct Pipeline {
  ExperimentConfig cfg;
  diffusion::DenoiserModel denoiser;
  dual::TimeVAE vae;
  dual::DiscreteRefiner refiner;
  verifier::VerifierModel verifier;
  std::vector<graph::Graph> heldout;

  dual::Models dual_models() const;
  search::SearchModels search_models() const;
};

struct StageLog {
  std::string stage;
  bool ran = false;
  double seconds = 0.0;
  std::vector<double> losses;
};

/// Runs (or resumes) the staged training in cfg.out_dir:
/// vae_bootstrap -> denoiser -> trajectories -> vae + refiner -> verifier.
/// A stage whose checkpoint exists is loaded instead of retrained. Loss
/// curves go to loss_<stage>.csv. Stage failures are rethrown with the stage name.
Pipeline pipeline_train(const ExperimentConfig& cfg, std::vector<StageLog>* log = nullptr);

/// Loads every checkpoint; throws ConfigError naming the first missing one.
Pipeline load_pipeline(const ExperimentConfig& cfg);

struct Sample {
  std::uint64_t seed = 0;
  graph::Graph graph;
  double reward = 0.0;
  bool valid = false;
  CallCounters counters;
};

struct RunRecord {
  std::string method;
  std::size_t budget = 1;  // multiple of T
  std::uint64_t budget_nfe = 0;
  double audited_nfe = 0.0;  // mean latent steps per sample
  std::uint64_t seed = 0;
  std::vector<Sample> samples;
  double mean_reward = 0.0;
  double stderr_reward = 0.0;
  double validity_rate = 0.0;
  double mmd = 0.0;
  double wall_seconds = 0.0;
};

/// Per-sample seeds derived from the master seed.
std::uint64_t sample_seed(std::uint64_t master, std::size_t index);

Sample sample_standard_one(const Pipeline& p, std::uint64_t seed);
Sample sample_best_of_n_one(const Pipeline& p, std::size_t n_cand, std::uint64_t seed);
/// `branch` continuations per beam (defaults to width); stride must divide T.
Sample sample_beam_one(const Pipeline& p, std::size_t width, std::size_t branch,
                       std::size_t stride, std::uint64_t seed);
Sample sample_treediff_one(const Pipeline& p, const search::SearchConfig& cfg, std::uint64_t seed,
                           search::SearchTrace* trace = nullptr);

/// Budget multiplier b -> K = b children per round and N_r = 1, which spends b*T latent steps.
search::SearchConfig treediff_budget_config(const search::SearchConfig& base, std::size_t b);
/// Beam layout for budget b: width * branch == b with width the largest divisor <= sqrt(b).
std::pair<std::size_t, std::size_t> beam_budget_layout(std::size_t b);

RunRecord run_method(const Pipeline& p, const std::string& method, std::size_t budget,
                     std::size_t count, std::uint64_t master_seed);
void summarize(RunRecord& r, const std::vector<graph::Graph>& reference, double bandwidth,
               const NfeCharges& charges = {});

/// Methods x budgets, each over cfg.bench.seeds samples.
std::vector<RunRecord> run_scaling_benchmark(const Pipeline& p);

/// sigma_g sweep and a guidance-off row, each over ablation_samples TreeDiff runs.
std::vector<RunRecord> run_ablations(const Pipeline& p);

inline const char* kCsvHeader =
    "method,budget_nfe,audited_nfe,seed,mean_reward,stderr,validity_rate,mmd";
std::string csv_row(const RunRecord& r);
void write_csv(const fs::path& path, const std::vector<RunRecord>& rows);
/// One line per sample: method,budget_nfe,sample,seed,reward,valid,latent_steps.
void write_samples_csv(const fs::path& path, const std::vector<RunRecord>& rows);

struct GradcheckRow {
  std::string loss;
  std::size_t parameters = 0;
  double max_rel_error = 0.0;
};
/// Central-difference checks of the four training losses on tiny instances.
std::vector<GradcheckRow> gradcheck_all(std::uint64_t seed, double h = 1e-5);

}  // namespace treediff::harness
