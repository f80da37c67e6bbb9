#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "treediff/harness/harness.hpp"

namespace treediff::harness {

namespace {

using diffusion::LatentState;
using diffusion::NoiseStream;

Sample finish(const Pipeline& p, const LatentState& z0, std::uint64_t seed, CallCounters c) {
  Sample s;
  s.seed = seed;
  s.graph = p.vae.decode(z0);
  c.codec_calls += 1;
  s.reward = graph::reward(s.graph, p.cfg.reward, p.cfg.rule);
  s.valid = graph::is_valid(s.graph, p.cfg.rule);
  s.counters = c;
  return s;
}

LatentState rollout(const Pipeline& p, const LatentState& from, std::size_t steps,
                    const NoiseStream& stream, CallCounters& c) {
  c.latent_steps += steps;
  return diffusion::macro_step(from, steps, p.denoiser, stream);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::uint64_t sample_seed(std::uint64_t master, std::size_t index) {
  return diffusion::mix64(master ^ diffusion::mix64(0x5eed0000ULL + index));
}

Sample sample_standard_one(const Pipeline& p, std::uint64_t seed) {
  const NoiseStream stream(seed);
  CallCounters c;
  const auto zT = diffusion::initial_state(p.denoiser, stream);
  return finish(p, rollout(p, zT, zT.t, stream, c), seed, c);
}

Sample sample_best_of_n_one(const Pipeline& p, std::size_t n_cand, std::uint64_t seed) {
  if (n_cand < 1) throw ConfigError("best-of-n: N_cand must be >= 1");
  const NoiseStream root(seed);
  Sample best;
  CallCounters total;
  for (std::size_t j = 0; j < n_cand; ++j) {
    const NoiseStream stream = j == 0 ? root : root.fork(j);
    Sample s = sample_standard_one(p, stream.id());
    total += s.counters;
    if (j == 0 || s.reward > best.reward) best = std::move(s);
  }
  best.seed = seed;
  best.counters = total;
  return best;
}

Sample sample_beam_one(const Pipeline& p, std::size_t width, std::size_t branch, std::size_t stride,
                       std::uint64_t seed) {
  const std::size_t T = p.denoiser.schedule.T;
  if (width < 1 || branch < 1) throw ConfigError("beam: width and branch must be >= 1");
  if (stride < 1 || T % stride != 0) throw ConfigError("beam: stride must divide T");
  struct Beam {
    LatentState z;
    NoiseStream stream;
  };
  CallCounters c;
  const NoiseStream root(seed);
  std::vector<Beam> beams;
  for (std::size_t i = 0; i < width; ++i) {
    const NoiseStream s = i == 0 ? root : NoiseStream(diffusion::mix64(seed ^ (0xbea3ULL + i)));
    beams.push_back({diffusion::initial_state(p.denoiser, s), s});
  }
  while (beams.front().z.t > 0) {
    std::vector<Beam> cand;
    for (const auto& b : beams) {
      for (std::size_t j = 0; j < branch; ++j) {
        const NoiseStream s = j == 0 ? b.stream : b.stream.fork(j);
        cand.push_back({rollout(p, b.z, std::min(stride, b.z.t), s, c), s});
      }
    }
    if (cand.front().z.t == 0) {
      // Last segment: pick by true reward.
      std::size_t best = 0;
      double best_r = 0.0;
      for (std::size_t i = 0; i < cand.size(); ++i) {
        const auto g = p.vae.decode(cand[i].z);
        c.codec_calls += 1;
        const double r = graph::reward(g, p.cfg.reward, p.cfg.rule);
        if (i == 0 || r > best_r) {
          best = i;
          best_r = r;
        }
      }
      c.codec_calls -= 1;  // finish() decodes the winner again
      return finish(p, cand[best].z, seed, c);
    }
    std::vector<double> score(cand.size());
    for (std::size_t i = 0; i < cand.size(); ++i) {
      const auto g = p.vae.decode(cand[i].z);
      score[i] = verifier::predict_value(p.verifier, cand[i].z, g);
      c.codec_calls += 1;
      c.verifier_calls += 1;
    }
    std::vector<std::size_t> order(cand.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
    std::vector<Beam> next;
    for (std::size_t i = 0; i < width && i < order.size(); ++i) next.push_back(cand[order[i]]);
    beams = std::move(next);
  }
  return finish(p, beams.front().z, seed, c);
}

Sample sample_treediff_one(const Pipeline& p, const search::SearchConfig& cfg, std::uint64_t seed,
                           search::SearchTrace* trace) {
  auto res = search::run_search(cfg, p.search_models(), seed);
  Sample s;
  s.seed = seed;
  s.graph = res.graph;
  s.reward = graph::reward(s.graph, p.cfg.reward, p.cfg.rule);
  s.valid = graph::is_valid(s.graph, p.cfg.rule);
  s.counters = res.trace.counters;
  s.counters.codec_calls += 1;
  if (trace) *trace = std::move(res.trace);
  return s;
}

search::SearchConfig treediff_budget_config(const search::SearchConfig& base, std::size_t b) {
  if (b < 1) throw ConfigError("budget multiplier must be >= 1");
  search::SearchConfig c = base;
  // Every round spends K*k latent steps, so K = b and one iteration per round
  // sums to b*T over the whole descent.
  c.K = b;
  c.N_r = 1;
  return c;
}

std::pair<std::size_t, std::size_t> beam_budget_layout(std::size_t b) {
  if (b < 1) throw ConfigError("budget multiplier must be >= 1");
  std::size_t w = 1;
  for (std::size_t d = 1; d * d <= b; ++d) {
    if (b % d == 0) w = d;
  }
  return {w, b / w};
}

double charged_nfe(const CallCounters& c, const NfeCharges& w) {
  return static_cast<double>(c.latent_steps) + w.refiner * static_cast<double>(c.refiner_calls) +
         w.codec * static_cast<double>(c.codec_calls) +
         w.verifier * static_cast<double>(c.verifier_calls);
}

void summarize(RunRecord& r, const std::vector<graph::Graph>& reference, double bandwidth,
               const NfeCharges& charges) {
  const double n = static_cast<double>(r.samples.size());
  if (r.samples.empty()) throw ContractViolation("summarize: no samples");
  double sum = 0.0, valid = 0.0, steps = 0.0;
  std::vector<graph::Graph> graphs;
  for (const auto& s : r.samples) {
    sum += s.reward;
    valid += s.valid ? 1.0 : 0.0;
    steps += charged_nfe(s.counters, charges);
    graphs.push_back(s.graph);
  }
  r.mean_reward = sum / n;
  double ss = 0.0;
  for (const auto& s : r.samples) ss += (s.reward - r.mean_reward) * (s.reward - r.mean_reward);
  r.stderr_reward = r.samples.size() > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  r.validity_rate = valid / n;
  r.audited_nfe = steps / n;
  r.mmd = graph::mmd_distance(graphs, reference, bandwidth);
}

RunRecord run_method(const Pipeline& p, const std::string& method, std::size_t budget,
                     std::size_t count, std::uint64_t master_seed) {
  const std::size_t T = p.denoiser.schedule.T;
  RunRecord r;
  r.method = method;
  r.budget = budget;
  r.budget_nfe = static_cast<std::uint64_t>(budget * T);
  r.seed = master_seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto beam = beam_budget_layout(budget);
  const auto tree = treediff_budget_config(p.cfg.search, budget);
  const std::size_t stride = std::max<std::size_t>(1, T / 10);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = sample_seed(master_seed, i);
    if (method == "standard") {
      // One rollout per sample regardless of budget.
      r.samples.push_back(sample_standard_one(p, s));
    } else if (method == "bon") {
      r.samples.push_back(sample_best_of_n_one(p, budget, s));
    } else if (method == "beam") {
      r.samples.push_back(sample_beam_one(p, beam.first, beam.second, stride, s));
    } else if (method == "treediff") {
      r.samples.push_back(sample_treediff_one(p, tree, s));
    } else {
      throw ConfigError("unknown method " + method);
    }
  }
  if (method == "standard") r.budget_nfe = T;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  summarize(r, p.heldout, p.cfg.bench.mmd_bandwidth, p.cfg.bench.charges);
  return r;
}

std::vector<RunRecord> run_scaling_benchmark(const Pipeline& p) {
  std::vector<RunRecord> rows;
  for (const auto& m : p.cfg.bench.methods) {
    for (auto b : p.cfg.bench.budgets) rows.push_back(run_method(p, m, b, p.cfg.bench.seeds, p.cfg.seed));
  }
  return rows;
}

std::vector<RunRecord> run_ablations(const Pipeline& p) {
  std::vector<RunRecord> rows;
  auto run = [&](const std::string& name, const search::SearchConfig& sc) {
    RunRecord r;
    r.method = name;
    r.seed = p.cfg.seed;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < p.cfg.bench.ablation_samples; ++i) {
      r.samples.push_back(sample_treediff_one(p, sc, sample_seed(p.cfg.seed, i)));
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    summarize(r, p.heldout, p.cfg.bench.mmd_bandwidth, p.cfg.bench.charges);
    r.budget_nfe = static_cast<std::uint64_t>(std::llround(r.audited_nfe));
    rows.push_back(std::move(r));
  };
  for (double s : p.cfg.bench.ablation_sigmas) {
    auto sc = p.cfg.search;
    sc.guidance.enabled = true;
    sc.guidance.sigma_g = s;
    std::ostringstream name;
    name << "treediff_sigma" << s;
    run(name.str(), sc);
  }
  auto off = p.cfg.search;
  off.guidance.enabled = false;
  run("treediff_no_guidance", off);
  return rows;
}

std::string csv_row(const RunRecord& r) {
  std::ostringstream os;
  os << r.method << ',' << r.budget_nfe << ',' << fmt(r.audited_nfe) << ',' << r.seed << ','
     << fmt(r.mean_reward) << ',' << fmt(r.stderr_reward) << ',' << fmt(r.validity_rate) << ','
     << fmt(r.mmd);
  return os.str();
}

void write_csv(const fs::path& path, const std::vector<RunRecord>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << kCsvHeader << '\n';
  for (const auto& r : rows) out << csv_row(r) << '\n';
}

void write_samples_csv(const fs::path& path, const std::vector<RunRecord>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "method,budget_nfe,sample,seed,reward,valid,latent_steps\n";
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.samples.size(); ++i) {
      const auto& s = r.samples[i];
      out << r.method << ',' << r.budget_nfe << ',' << i << ',' << s.seed << ',' << fmt(s.reward) << ','
          << (s.valid ? 1 : 0) << ',' << s.counters.latent_steps << '\n';
    }
  }
}

std::vector<GradcheckRow> gradcheck_all(std::uint64_t seed, double h) {
  std::vector<GradcheckRow> rows;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const auto sched = diffusion::make_schedule(20);
  auto randn = [&](std::size_t r, std::size_t c) {
    nn::Tensor t(r, c);
    for (auto& v : t.values()) v = normal(rng);
    return t;
  };
  constexpr std::size_t kCoords = 64;

  {
    diffusion::DenoiserModel m(2, 4, sched, seed + 1);
    const nn::Tensor zt = randn(3, 2), eps = randn(3, 2);
    const std::vector<std::size_t> times{1, 7, 20};
    const double err = nn::finite_diff_check(
        [&](nn::Tape& t) { return diffusion::diffusion_loss(t, m, zt, times, eps); }, m.params, h, kCoords,
        seed);
    rows.push_back({"diffusion", m.params.count(), err});
  }
  {
    dual::TimeVAE vae(2, 2, sched, 0.1, seed + 2);
    std::mt19937_64 grng(seed + 3);
    const auto gs = graph::sample_dataset(2, {}, grng);
    nn::Tensor x(2, graph::kFlatDim);
    for (std::size_t r = 0; r < 2; ++r) {
      const auto f = graph::to_flat(gs[r]);
      std::copy(f.begin(), f.end(), x.row(r).begin());
    }
    const nn::Tensor e1 = randn(2, 2), e2 = randn(2, 2);
    const std::vector<std::size_t> times{0, 9};
    const double err = nn::finite_diff_check(
        [&](nn::Tape& t) { return dual::vae_loss(t, vae, x, x, times, e1, e2); }, vae.params, h, kCoords,
        seed);
    rows.push_back({"vae", vae.params.count(), err});
  }
  {
    dual::DiscreteRefiner r(2, 20, seed + 4);
    std::mt19937_64 grng(seed + 5);
    const auto gs = graph::sample_dataset(2, {}, grng);
    graph::Graph noisy = gs[0];
    noisy.set_edge(0, noisy.n() - 1, 2);
    const std::vector<const graph::Graph*> in{&noisy, &gs[1]}, tg{&gs[0], &gs[1]};
    const std::vector<std::size_t> times{3, 15};
    const double err = nn::finite_diff_check(
        [&](nn::Tape& t) { return dual::denoise_loss(t, r, in, tg, times); }, r.params, h, kCoords, seed);
    rows.push_back({"refiner", r.params.count(), err});
  }
  {
    verifier::VerifierModel v(2, 2, 20, seed + 6);
    std::mt19937_64 grng(seed + 7);
    const auto gs = graph::sample_dataset(3, {}, grng);
    std::vector<verifier::VerifierSample> samples;
    for (std::size_t i = 0; i < gs.size(); ++i) {
      samples.push_back({{{normal(rng), normal(rng)}, 4 * i + 1}, gs[i], 0.5 * static_cast<double>(i)});
    }
    std::vector<const verifier::VerifierSample*> batch;
    for (const auto& s : samples) batch.push_back(&s);
    const double err = nn::finite_diff_check(
        [&](nn::Tape& t) { return verifier::verifier_loss(t, v, batch); }, v.params, h, kCoords, seed);
    rows.push_back({"verifier", v.params.count(), err});
  }
  return rows;
}

}  // namespace treediff::harness
