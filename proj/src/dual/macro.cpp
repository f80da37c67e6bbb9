#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

#include "treediff/dual/dual.hpp"

namespace treediff::dual {

void GuidanceConfig::validate() const {
  if (!(sigma_g > 0.0)) throw ConfigError("guidance: sigma_g must be > 0");
  if (!(n_fraction > 0.0 && n_fraction <= 1.0)) throw ConfigError("guidance: n_fraction in (0,1]");
  if (!(m_fraction > 0.0 && m_fraction <= 1.0)) throw ConfigError("guidance: m_fraction in (0,1]");
}

std::vector<double> guidance_vector(std::span<const double> anchor, std::span<const double> current,
                                    double sigma_g) {
  if (anchor.size() != current.size()) {
    throw ContractViolation("guidance_vector: latent dimensions differ");
  }
  if (!(sigma_g > 0.0)) throw ContractViolation("guidance_vector: sigma_g must be > 0");
  const double inv = 1.0 / (sigma_g * sigma_g);
  std::vector<double> g(anchor.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = (anchor[i] - current[i]) * inv;
  return g;
}

LatentState guided_reverse_step(const LatentState& s, std::span<const double> g, double h,
                                const DenoiserModel& m, std::span<const double> xi) {
  if (g.size() != m.dz || xi.size() != m.dz) {
    throw ContractViolation("guided_reverse_step: vector dimension mismatch");
  }
  auto mu = diffusion::posterior_mean(s, m);
  const double bt = m.schedule.beta_tilde[s.t];
  const double sd = std::sqrt(bt);
  for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += h * bt * g[i];
  if (s.t > 1) {
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += sd * xi[i];
  }
  return {std::move(mu), s.t - 1};
}

std::size_t unguided_steps(std::size_t k, const GuidanceConfig& cfg) {
  const auto n = static_cast<std::size_t>(std::lround(static_cast<double>(k) * cfg.n_fraction));
  return std::clamp<std::size_t>(n, 1, k);
}

std::size_t refine_steps(std::size_t k, const GuidanceConfig& cfg) {
  const auto m = static_cast<std::size_t>(std::lround(static_cast<double>(k) * cfg.m_fraction));
  return std::max<std::size_t>(m, 1);
}

MacroResult dual_space_macro_step(const LatentState& s, std::size_t k, const GuidanceConfig& cfg,
                                  const Models& models, const NoiseStream& stream,
                                  CallCounters* counters) {
  if (k < 1 || k > s.t) throw ContractViolation("dual_space_macro_step: k must lie in 1..t");
  CallCounters local;
  CallCounters& cnt = counters ? *counters : local;
  const auto& den = *models.denoiser;
  const auto& vae = *models.vae;
  MacroResult res;
  res.n = unguided_steps(k, cfg);
  res.m = refine_steps(k, cfg);

  auto anchor_guidance = [&](const LatentState& cur) {
    const Graph decoded = vae.decode(cur);
    const Graph refined = refine(decoded, cur.t, res.m, *models.refiner, models.rule);
    const LatentState anchor = vae.encode(refined, cur.t);
    cnt.codec_calls += 2;
    cnt.refiner_calls += res.m;
    return guidance_vector(anchor.z, cur.z, cfg.sigma_g);
  };

  LatentState cur = s;
  for (std::size_t i = 0; i < res.n; ++i) {
    cur = diffusion::reverse_step(cur, den, stream.at(cur.t, den.dz));
    ++cnt.latent_steps;
  }
  res.guidance.assign(den.dz, 0.0);
  if (cfg.enabled) res.guidance = anchor_guidance(cur);
  for (std::size_t i = res.n; i < k; ++i) {
    if (cfg.enabled && cfg.recompute_each_step && i > res.n) res.guidance = anchor_guidance(cur);
    cur = guided_reverse_step(cur, res.guidance, cfg.h, den, stream.at(cur.t, den.dz));
    ++cnt.latent_steps;
  }
  res.decoded = vae.decode(cur);
  res.structure = refine(res.decoded, cur.t, res.m, *models.refiner, models.rule);
  cnt.codec_calls += 1;
  cnt.refiner_calls += res.m;
  res.state = std::move(cur);
  return res;
}

std::size_t TrajectoryStore::state_count() const {
  std::size_t c = 0;
  for (const auto& t : trajectories) c += t.states.size();
  return c;
}

void TrajectoryStore::check() const {
  for (const auto& tr : trajectories) {
    if (tr.states.size() != T + 1) {
      throw ContractViolation("trajectory " + std::to_string(tr.id) + " does not hold T+1 states");
    }
    for (std::size_t i = 0; i < tr.states.size(); ++i) {
      if (tr.states[i].state.t != T - i) {
        throw ContractViolation("trajectory " + std::to_string(tr.id) + " is not time-ordered");
      }
    }
  }
}

void TrajectoryStore::save_jsonl(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write trajectory store: " + path);
  for (const auto& tr : trajectories) {
    for (const auto& s : tr.states) {
      nlohmann::json j = {{"traj_id", tr.id},
                          {"t", s.state.t},
                          {"z", s.state.z},
                          {"graph", graph::to_json(s.graph)},
                          {"terminal_reward", tr.terminal_reward}};
      out << j.dump() << '\n';
    }
  }
}

TrajectoryStore TrajectoryStore::load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read trajectory store: " + path);
  TrajectoryStore store;
  std::map<std::size_t, std::size_t> slot;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto id = j.at("traj_id").get<std::size_t>();
    auto [it, fresh] = slot.emplace(id, store.trajectories.size());
    if (fresh) {
      store.trajectories.push_back({});
      store.trajectories.back().id = id;
      store.trajectories.back().terminal_reward = j.at("terminal_reward").get<double>();
    }
    store.trajectories[it->second].states.push_back(
        {LatentState{j.at("z").get<std::vector<double>>(), j.at("t").get<std::size_t>()},
         graph::graph_from_json(j.at("graph"))});
  }
  if (!store.trajectories.empty()) store.T = store.trajectories.front().states.size() - 1;
  store.check();
  return store;
}

TrajectoryStore distill_trajectories(const DenoiserModel& m, const TimeVAE& vae, std::size_t count,
                                     std::uint64_t seed, const graph::RewardSpec& spec,
                                     const graph::ValidityRule& rule) {
  TrajectoryStore store;
  store.T = m.schedule.T;
  const NoiseStream root(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const NoiseStream stream = root.fork(i);
    Trajectory tr;
    tr.id = i;
    LatentState cur = diffusion::initial_state(m, stream);
    tr.states.reserve(store.T + 1);
    tr.states.push_back({cur, vae.decode(cur)});
    while (cur.t > 0) {
      cur = diffusion::reverse_step(cur, m, stream.at(cur.t, m.dz));
      tr.states.push_back({cur, vae.decode(cur)});
    }
    tr.terminal_reward = graph::reward(tr.states.back().graph, spec, rule);
    store.trajectories.push_back(std::move(tr));
  }
  return store;
}

TrajectoryStore distill_state_samples(const DenoiserModel& m, const TimeVAE& vae, std::size_t count,
                                      std::size_t states_per_traj, std::uint64_t seed,
                                      const graph::RewardSpec& spec,
                                      const graph::ValidityRule& rule) {
  const std::size_t T = m.schedule.T;
  if (states_per_traj < 1 || states_per_traj > T + 1) {
    throw ConfigError("distill_state_samples: states_per_traj must be in 1..T+1");
  }
  TrajectoryStore store;
  store.T = T;
  const NoiseStream root(seed);
  std::mt19937_64 rng(diffusion::mix64(seed ^ 0x73746174ULL));
  std::vector<std::size_t> times(T + 1);
  for (std::size_t i = 0; i < count; ++i) {
    const NoiseStream stream = root.fork(i);
    std::iota(times.begin(), times.end(), 0);
    std::shuffle(times.begin(), times.end(), rng);
    std::vector<bool> keep(T + 1, false);
    for (std::size_t j = 0; j < states_per_traj; ++j) keep[times[j]] = true;

    Trajectory tr;
    tr.id = i;
    LatentState cur = diffusion::initial_state(m, stream);
    if (keep[cur.t]) tr.states.push_back({cur, vae.decode(cur)});
    while (cur.t > 0) {
      cur = diffusion::reverse_step(cur, m, stream.at(cur.t, m.dz));
      if (keep[cur.t]) tr.states.push_back({cur, vae.decode(cur)});
    }
    tr.terminal_reward = graph::reward(vae.decode(cur), spec, rule);
    store.trajectories.push_back(std::move(tr));
  }
  return store;
}

}  // namespace treediff::dual
