#include <chrono>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "treediff/harness/harness.hpp"

namespace treediff::harness {

using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) {
  return diffusion::mix64(seed * 0x9E3779B97F4A7C15ULL + stage + 1);
}

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << text;
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_losses(const fs::path& path, const std::vector<double>& losses) {
  std::ostringstream os;
  os << "epoch,loss\n" << std::setprecision(10);
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << losses[i] << '\n';
  write_atomic(path, os.str());
}

struct Names {
  fs::path dir;
  fs::path vae_bootstrap() const { return dir / "vae_bootstrap.json"; }
  fs::path denoiser() const { return dir / "denoiser.json"; }
  fs::path trajectories() const { return dir / "trajectories.jsonl"; }
  fs::path vae() const { return dir / "vae.json"; }
  fs::path refiner() const { return dir / "refiner.json"; }
  fs::path verifier() const { return dir / "verifier.json"; }
  fs::path schedule() const { return dir / "schedule.json"; }
  fs::path config() const { return dir / "config.json"; }
};

struct Shells {
  diffusion::NoiseSchedule schedule;
  diffusion::DenoiserModel denoiser;
  dual::TimeVAE vae;
  dual::DiscreteRefiner refiner;
  verifier::VerifierModel verifier;
};

Shells make_shells(const ExperimentConfig& cfg) {
  Shells s;
  s.schedule = diffusion::make_schedule(cfg.T, cfg.schedule);
  const auto& m = cfg.model;
  s.denoiser = diffusion::DenoiserModel(m.dz, m.denoiser_hidden, s.schedule, stage_seed(cfg.seed, 11));
  s.vae = dual::TimeVAE(m.dz, m.codec_hidden, s.schedule, m.lambda_kl, stage_seed(cfg.seed, 10));
  s.refiner = dual::DiscreteRefiner(m.refiner_hidden, cfg.T, stage_seed(cfg.seed, 13));
  s.verifier = verifier::VerifierModel(m.dz, m.verifier_hidden, cfg.T, stage_seed(cfg.seed, 14));
  return s;
}

std::vector<graph::Graph> heldout_graphs(const ExperimentConfig& cfg) {
  std::mt19937_64 rng(stage_seed(cfg.seed, 2));
  return graph::sample_dataset(cfg.train.heldout_graphs, cfg.rule, rng);
}

/// Splits `epochs` into 60% at the base rate, then 20% at 0.3x and 20% at 0.1x.
template <class Train>
std::vector<double> with_lr_decay(std::size_t epochs, double lr, Train&& train) {
  const std::size_t a = epochs * 6 / 10;
  const std::size_t b = epochs * 8 / 10;
  std::vector<double> all;
  for (auto [n, scale] : {std::pair{a, 1.0}, std::pair{b - a, 0.3}, std::pair{epochs - b, 0.1}}) {
    if (n == 0) continue;
    const auto part = train(n, lr * scale);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

}  // namespace

void save_checkpoint(const fs::path& path, const std::string& kind, const nn::ParamStore& ps,
                     const json& meta) {
  json params = json::object();
  for (const auto& p : ps) {
    params[p.name] = {{"shape", {p.value.rows(), p.value.cols()}}, {"values", p.value.storage()}};
  }
  const json j = {{"format", "treediff-checkpoint"},
                  {"version", kCheckpointVersion},
                  {"kind", kind},
                  {"meta", meta},
                  {"params", params}};
  write_atomic(path, j.dump());
}

json load_checkpoint(const fs::path& path, const std::string& kind, nn::ParamStore& ps) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing checkpoint " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("checkpoint " + path.string() + ": " + e.what());
  }
  if (j.value("format", "") != "treediff-checkpoint") {
    throw ConfigError("checkpoint " + path.string() + ": not a checkpoint file");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw ConfigError("checkpoint " + path.string() + ": unsupported version");
  }
  if (j.value("kind", "") != kind) {
    throw ConfigError("checkpoint " + path.string() + ": expected kind " + kind);
  }
  const json& params = j.at("params");
  if (params.size() != ps.size()) throw ConfigError("checkpoint " + path.string() + ": parameter count mismatch");
  for (auto& p : ps) {
    if (!params.contains(p.name)) throw ConfigError("checkpoint " + path.string() + ": missing " + p.name);
    const json& e = params.at(p.name);
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols()) {
      throw ConfigError("checkpoint " + path.string() + ": shape mismatch for " + p.name);
    }
    const auto values = e.at("values").get<std::vector<double>>();
    if (values.size() != p.value.storage().size()) {
      throw ConfigError("checkpoint " + path.string() + ": value count mismatch for " + p.name);
    }
    std::copy(values.begin(), values.end(), p.value.values().begin());
  }
  return j.at("meta");
}

dual::Models Pipeline::dual_models() const {
  return {&denoiser, &vae, &refiner, cfg.rule};
}

search::SearchModels Pipeline::search_models() const { return {dual_models(), &verifier}; }

Pipeline pipeline_train(const ExperimentConfig& cfg, std::vector<StageLog>* log) {
  cfg.validate();
  const Names names{cfg.out_dir};
  fs::create_directories(names.dir);
  write_atomic(names.config(), to_json(cfg).dump(2) + "\n");

  Shells sh = make_shells(cfg);
  write_atomic(names.schedule(), diffusion::to_json(sh.schedule).dump() + "\n");

  std::mt19937_64 data_rng(stage_seed(cfg.seed, 1));
  const auto train_set = graph::sample_dataset(cfg.train.train_graphs, cfg.rule, data_rng);

  // Once a stage reruns, everything downstream is stale.
  bool dirty = false;
  auto stage = [&](const std::string& name, const fs::path& out, auto&& load, auto&& run) {
    StageLog entry{name, false, 0.0, {}};
    if (!dirty && fs::exists(out)) {
      load();
    } else {
      dirty = true;
      entry.ran = true;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        entry.losses = run();
      } catch (const std::exception& e) {
        throw EvaluationError("stage " + name + " failed: " + e.what());
      }
      entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (!entry.losses.empty()) write_losses(names.dir / ("loss_" + name + ".csv"), entry.losses);
    }
    if (log) log->push_back(std::move(entry));
  };

  const json meta = {{"config", to_json(cfg)}};

  dual::TimeVAE boot = sh.vae;
  stage(
      "vae_bootstrap", names.vae_bootstrap(),
      [&] { load_checkpoint(names.vae_bootstrap(), "vae", boot.params); },
      [&] {
        std::mt19937_64 rng(stage_seed(cfg.seed, 20));
        auto losses = with_lr_decay(cfg.train.vae_epochs, 1e-3, [&](std::size_t n, double lr) {
          dual::VaeTrainOptions opt;
          opt.epochs = n;
          opt.adam.lr = lr;
          return dual::train_vae_bootstrap(train_set, boot, opt, rng);
        });
        save_checkpoint(names.vae_bootstrap(), "vae", boot.params, meta);
        return losses;
      });

  diffusion::DenoiserModel den = sh.denoiser;
  stage(
      "denoiser", names.denoiser(),
      [&] { load_checkpoint(names.denoiser(), "denoiser", den.params); },
      [&] {
        std::vector<std::vector<double>> latents;
        latents.reserve(train_set.size());
        for (const auto& g : train_set) latents.push_back(boot.encode(g, 0).z);
        std::mt19937_64 rng(stage_seed(cfg.seed, 21));
        auto losses = with_lr_decay(cfg.train.denoiser_epochs, 1e-3, [&](std::size_t n, double lr) {
          diffusion::TrainOptions opt;
          opt.epochs = n;
          opt.adam.lr = lr;
          return diffusion::train_denoiser(latents, den, opt, rng);
        });
        save_checkpoint(names.denoiser(), "denoiser", den.params, meta);
        return losses;
      });

  dual::TrajectoryStore store;
  stage(
      "trajectories", names.trajectories(),
      [&] { store = dual::TrajectoryStore::load_jsonl(names.trajectories().string()); },
      [&] {
        store = dual::distill_trajectories(den, boot, cfg.train.trajectories, stage_seed(cfg.seed, 22),
                                           cfg.reward, cfg.rule);
        store.save_jsonl(names.trajectories().string());
        return std::vector<double>{};
      });

  dual::TimeVAE vae = boot;
  stage(
      "vae", names.vae(), [&] { load_checkpoint(names.vae(), "vae", vae.params); },
      [&] {
        std::mt19937_64 rng(stage_seed(cfg.seed, 23));
        dual::VaeTrainOptions opt;
        opt.epochs = cfg.train.vae_distill_epochs;
        opt.samples_per_epoch = cfg.train.vae_distill_samples;
        opt.adam.lr = cfg.train.vae_distill_lr;
        opt.replay_fraction = cfg.train.vae_replay_fraction;
        auto losses = dual::train_vae(store, vae, opt, rng, &train_set);
        save_checkpoint(names.vae(), "vae", vae.params, meta);
        return losses;
      });

  dual::DiscreteRefiner refiner = sh.refiner;
  stage(
      "refiner", names.refiner(), [&] { load_checkpoint(names.refiner(), "refiner", refiner.params); },
      [&] {
        std::mt19937_64 rng(stage_seed(cfg.seed, 24));
        dual::RefinerTrainOptions opt;
        opt.epochs = cfg.train.refiner_epochs;
        opt.samples_per_epoch = cfg.train.refiner_samples;
        auto losses = dual::train_refiner(store, refiner, opt, rng);
        save_checkpoint(names.refiner(), "refiner", refiner.params, meta);
        return losses;
      });

  verifier::VerifierModel ver = sh.verifier;
  stage(
      "verifier", names.verifier(), [&] { load_checkpoint(names.verifier(), "verifier", ver.params); },
      [&] {
        std::mt19937_64 rng(stage_seed(cfg.seed, 25));
        const auto states = dual::distill_state_samples(den, vae, cfg.train.verifier_rollouts,
                                                        cfg.train.verifier_states, stage_seed(cfg.seed, 26),
                                                        cfg.reward, cfg.rule);
        const auto samples =
            verifier::build_verifier_dataset(states, vae, cfg.train.sigma_a, cfg.train.aug_per_state, rng);
        auto losses = with_lr_decay(cfg.train.verifier_epochs, 1e-3, [&](std::size_t n, double lr) {
          verifier::VerifierTrainOptions opt;
          opt.epochs = n;
          opt.samples_per_epoch = cfg.train.verifier_samples;
          opt.adam.lr = lr;
          return verifier::train_verifier(samples, ver, opt, rng);
        });
        save_checkpoint(names.verifier(), "verifier", ver.params, meta);
        return losses;
      });

  return Pipeline{cfg, std::move(den), std::move(vae), std::move(refiner), std::move(ver),
                  heldout_graphs(cfg)};
}

Pipeline load_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  const Names names{cfg.out_dir};
  Shells sh = make_shells(cfg);
  load_checkpoint(names.denoiser(), "denoiser", sh.denoiser.params);
  load_checkpoint(names.vae(), "vae", sh.vae.params);
  load_checkpoint(names.refiner(), "refiner", sh.refiner.params);
  load_checkpoint(names.verifier(), "verifier", sh.verifier.params);
  return Pipeline{cfg, std::move(sh.denoiser), std::move(sh.vae), std::move(sh.refiner),
                  std::move(sh.verifier), heldout_graphs(cfg)};
}

}  // namespace treediff::harness
