#include <fstream>
#include <set>

#include "treediff/harness/harness.hpp"

namespace treediff::harness {

using nlohmann::json;

namespace {

/// Reads optional keys from one JSON object and rejects the ones nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: " + where_ + " must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for " + where_ + "." + key + ": " + e.what());
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("config: unknown key " + where_ + "." + item.key());
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace

void ExperimentConfig::validate() const {
  if (T < 2) throw ConfigError("config: T must be >= 2");
  if (model.dz < 1 || model.codec_hidden < 1 || model.denoiser_hidden < 1 ||
      model.refiner_hidden < 1 || model.verifier_hidden < 1) {
    throw ConfigError("config: model widths must be >= 1");
  }
  if (model.lambda_kl < 0.0) throw ConfigError("config: lambda_kl must be >= 0");
  if (train.train_graphs < 1 || train.heldout_graphs < 1 || train.trajectories < 1) {
    throw ConfigError("config: dataset and trajectory counts must be >= 1");
  }
  if (train.verifier_rollouts < 1 || train.verifier_states < 1 || train.verifier_states > T + 1) {
    throw ConfigError("config: verifier_rollouts >= 1 and verifier_states in 1..T+1");
  }
  if (!(train.vae_replay_fraction >= 0.0 && train.vae_replay_fraction <= 1.0)) {
    throw ConfigError("config: vae_replay_fraction must be in [0, 1]");
  }
  if (train.sigma_a < 0.0) throw ConfigError("config: sigma_a must be >= 0");
  search.validate();
  reward.validate();
  rule.validate();
  if (bench.budgets.empty()) throw ConfigError("config: budget list is empty");
  for (auto b : bench.budgets) {
    if (b < 1) throw ConfigError("config: budgets must be >= 1");
  }
  if (bench.seeds < 1 || bench.ablation_samples < 1) throw ConfigError("config: sample counts must be >= 1");
  for (const auto& m : bench.methods) {
    if (m != "standard" && m != "bon" && m != "beam" && m != "treediff") {
      throw ConfigError("config: unknown method " + m);
    }
  }
  for (double s : bench.ablation_sigmas) {
    if (!(s > 0.0)) throw ConfigError("config: ablation sigmas must be > 0");
  }
  const auto& w = bench.charges;
  if (w.refiner < 0.0 || w.codec < 0.0 || w.verifier < 0.0) {
    throw ConfigError("config: call charges must be >= 0");
  }
  if (!(bench.mmd_bandwidth > 0.0)) throw ConfigError("config: mmd bandwidth must be > 0");
}

json to_json(const ExperimentConfig& c) {
  const auto& g = c.search.guidance;
  return {
      {"seed", c.seed},
      {"T", c.T},
      {"schedule", diffusion::to_string(c.schedule)},
      {"out_dir", c.out_dir},
      {"model",
       {{"dz", c.model.dz},
        {"codec_hidden", c.model.codec_hidden},
        {"denoiser_hidden", c.model.denoiser_hidden},
        {"refiner_hidden", c.model.refiner_hidden},
        {"verifier_hidden", c.model.verifier_hidden},
        {"lambda_kl", c.model.lambda_kl}}},
      {"train",
       {{"train_graphs", c.train.train_graphs},
        {"heldout_graphs", c.train.heldout_graphs},
        {"vae_epochs", c.train.vae_epochs},
        {"denoiser_epochs", c.train.denoiser_epochs},
        {"trajectories", c.train.trajectories},
        {"heldout_trajectories", c.train.heldout_trajectories},
        {"vae_distill_epochs", c.train.vae_distill_epochs},
        {"vae_distill_samples", c.train.vae_distill_samples},
        {"vae_distill_lr", c.train.vae_distill_lr},
        {"vae_replay_fraction", c.train.vae_replay_fraction},
        {"refiner_epochs", c.train.refiner_epochs},
        {"refiner_samples", c.train.refiner_samples},
        {"verifier_rollouts", c.train.verifier_rollouts},
        {"verifier_states", c.train.verifier_states},
        {"verifier_epochs", c.train.verifier_epochs},
        {"verifier_samples", c.train.verifier_samples},
        {"sigma_a", c.train.sigma_a},
        {"aug_per_state", c.train.aug_per_state}}},
      {"search",
       {{"D_max", c.search.D_max},
        {"K", c.search.K},
        {"N_r", c.search.N_r},
        {"M", c.search.M},
        {"c_ucb", c.search.c_ucb},
        {"sigma_k", c.search.sigma_k},
        {"selection", search::to_string(c.search.selection)},
        {"t_s", c.search.t_s},
        {"guidance",
         {{"sigma_g", g.sigma_g},
          {"h", g.h},
          {"n_fraction", g.n_fraction},
          {"m_fraction", g.m_fraction},
          {"enabled", g.enabled},
          {"recompute_each_step", g.recompute_each_step}}}}},
      {"reward",
       {{"validity", c.reward.validity},
        {"triangle", c.reward.triangle},
        {"saturation", c.reward.saturation}}},
      {"validity_caps", c.rule.caps},
      {"bench",
       {{"budgets", c.bench.budgets},
        {"seeds", c.bench.seeds},
        {"methods", c.bench.methods},
        {"ablation_sigmas", c.bench.ablation_sigmas},
        {"ablation_samples", c.bench.ablation_samples},
        {"mmd_bandwidth", c.bench.mmd_bandwidth},
        {"charges",
         {{"refiner", c.bench.charges.refiner},
          {"codec", c.bench.charges.codec},
          {"verifier", c.bench.charges.verifier}}}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Fields top(j, "config");
  top.get("seed", c.seed);
  top.get("T", c.T);
  std::string kind = diffusion::to_string(c.schedule);
  top.get("schedule", kind);
  c.schedule = diffusion::schedule_kind_from_string(kind);
  top.get("out_dir", c.out_dir);
  top.get("validity_caps", c.rule.caps);

  if (const json* m = top.sub("model")) {
    Fields f(*m, "model");
    f.get("dz", c.model.dz);
    f.get("codec_hidden", c.model.codec_hidden);
    f.get("denoiser_hidden", c.model.denoiser_hidden);
    f.get("refiner_hidden", c.model.refiner_hidden);
    f.get("verifier_hidden", c.model.verifier_hidden);
    f.get("lambda_kl", c.model.lambda_kl);
    f.finish();
  }
  if (const json* t = top.sub("train")) {
    Fields f(*t, "train");
    f.get("train_graphs", c.train.train_graphs);
    f.get("heldout_graphs", c.train.heldout_graphs);
    f.get("vae_epochs", c.train.vae_epochs);
    f.get("denoiser_epochs", c.train.denoiser_epochs);
    f.get("trajectories", c.train.trajectories);
    f.get("heldout_trajectories", c.train.heldout_trajectories);
    f.get("vae_distill_epochs", c.train.vae_distill_epochs);
    f.get("vae_distill_samples", c.train.vae_distill_samples);
    f.get("vae_distill_lr", c.train.vae_distill_lr);
    f.get("vae_replay_fraction", c.train.vae_replay_fraction);
    f.get("refiner_epochs", c.train.refiner_epochs);
    f.get("refiner_samples", c.train.refiner_samples);
    f.get("verifier_rollouts", c.train.verifier_rollouts);
    f.get("verifier_states", c.train.verifier_states);
    f.get("verifier_epochs", c.train.verifier_epochs);
    f.get("verifier_samples", c.train.verifier_samples);
    f.get("sigma_a", c.train.sigma_a);
    f.get("aug_per_state", c.train.aug_per_state);
    f.finish();
  }
  if (const json* s = top.sub("search")) {
    Fields f(*s, "search");
    f.get("D_max", c.search.D_max);
    f.get("K", c.search.K);
    f.get("N_r", c.search.N_r);
    f.get("M", c.search.M);
    f.get("c_ucb", c.search.c_ucb);
    f.get("sigma_k", c.search.sigma_k);
    std::string sel = search::to_string(c.search.selection);
    f.get("selection", sel);
    c.search.selection = search::selection_from_string(sel);
    f.get("t_s", c.search.t_s);
    if (const json* g = f.sub("guidance")) {
      Fields gf(*g, "search.guidance");
      auto& gc = c.search.guidance;
      gf.get("sigma_g", gc.sigma_g);
      gf.get("h", gc.h);
      gf.get("n_fraction", gc.n_fraction);
      gf.get("m_fraction", gc.m_fraction);
      gf.get("enabled", gc.enabled);
      gf.get("recompute_each_step", gc.recompute_each_step);
      gf.finish();
    }
    f.finish();
  }
  if (const json* r = top.sub("reward")) {
    Fields f(*r, "reward");
    f.get("validity", c.reward.validity);
    f.get("triangle", c.reward.triangle);
    f.get("saturation", c.reward.saturation);
    f.finish();
  }
  if (const json* b = top.sub("bench")) {
    Fields f(*b, "bench");
    f.get("budgets", c.bench.budgets);
    f.get("seeds", c.bench.seeds);
    f.get("methods", c.bench.methods);
    f.get("ablation_sigmas", c.bench.ablation_sigmas);
    f.get("ablation_samples", c.bench.ablation_samples);
    f.get("mmd_bandwidth", c.bench.mmd_bandwidth);
    if (const json* w = f.sub("charges")) {
      Fields wf(*w, "bench.charges");
      wf.get("refiner", c.bench.charges.refiner);
      wf.get("codec", c.bench.charges.codec);
      wf.get("verifier", c.bench.charges.verifier);
      wf.finish();
    }
    f.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace treediff::harness
