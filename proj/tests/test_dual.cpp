#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "treediff/dual/dual.hpp"

using namespace treediff;
using namespace treediff::dual;
using graph::ValidityRule;

namespace {

constexpr std::size_t kT = 30;
constexpr std::size_t kDz = 6;

struct Fixture {
  DenoiserModel den{kDz, 16, diffusion::make_schedule(kT, diffusion::ScheduleKind::Cosine), 1};
  TimeVAE vae{kDz, 16, diffusion::make_schedule(kT, diffusion::ScheduleKind::Cosine), 0.01, 2};
  DiscreteRefiner ref{8, kT, 3};

  Models models() const { return {&den, &vae, &ref, ValidityRule{}}; }
};

Graph random_graph(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> cat(0, 3), edge(0, 2);
  Graph g(n);
  for (std::size_t i = 0; i < n; ++i) g.set_label(i, cat(rng));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) g.set_edge(i, j, edge(rng));
  }
  return g;
}

std::vector<double> gaussian(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

double sq(double x) { return x * x; }

}  // namespace

TEST_CASE("guidance vector examples") {
  const std::vector<double> a{1.0, 2.0, -3.0}, c{0.0, 2.0, -3.0};
  CHECK(guidance_vector(a, a, 1.0) == std::vector<double>(3, 0.0));
  CHECK(guidance_vector(a, c, 1.0) == std::vector<double>{1.0, 0.0, 0.0});
  const auto g1 = guidance_vector(a, c, 0.8);
  const auto g2 = guidance_vector(a, c, 0.4);
  for (int i = 0; i < 3; ++i) CHECK(g2[i] == doctest::Approx(4.0 * g1[i]));
  CHECK_THROWS_AS(guidance_vector(a, std::vector<double>{1.0}, 1.0), ContractViolation);
  CHECK_THROWS(guidance_vector(a, c, 0.0));

  // (a - c) + (b - c) equals the vector for the summed differences.
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = gaussian(5, rng), y = gaussian(5, rng), cur = gaussian(5, rng);
    std::vector<double> summed(5);
    for (int i = 0; i < 5; ++i) summed[i] = x[i] + y[i] - cur[i];
    const auto gx = guidance_vector(x, cur, 1.3), gy = guidance_vector(y, cur, 1.3);
    const auto gs = guidance_vector(summed, cur, 1.3);
    for (int i = 0; i < 5; ++i) CHECK(gx[i] + gy[i] == doctest::Approx(gs[i]).epsilon(1e-12));
  }
}

TEST_CASE("guided reverse step examples") {
  Fixture f;
  std::mt19937_64 rng(42);
  const LatentState s{gaussian(kDz, rng), 12};
  const auto xi = gaussian(kDz, rng);
  const auto plain = diffusion::reverse_step(s, f.den, xi);
  CHECK(guided_reverse_step(s, std::vector<double>(kDz, 0.0), 1.0, f.den, xi) == plain);
  CHECK(guided_reverse_step(s, gaussian(kDz, rng), 0.0, f.den, xi) == plain);
  std::vector<double> e0(kDz, 0.0);
  e0[0] = 1.0;
  const auto guided = guided_reverse_step(s, e0, 1.0, f.den, xi);
  CHECK(guided.z[0] - plain.z[0] == doctest::Approx(f.den.schedule.beta_tilde[12]).epsilon(1e-12));
  for (std::size_t i = 1; i < kDz; ++i) CHECK(guided.z[i] == plain.z[i]);
}

TEST_CASE("step splits follow the configured fractions") {
  GuidanceConfig cfg;
  CHECK(unguided_steps(20, cfg) == 10);
  CHECK(refine_steps(20, cfg) == 2);
  CHECK(unguided_steps(1, cfg) == 1);
  CHECK(refine_steps(1, cfg) == 1);
  CHECK(unguided_steps(3, cfg) <= 3);
  cfg.n_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("guidance off reduces to the plain macro step") {
  Fixture f;
  std::mt19937_64 rng(43);
  GuidanceConfig off;
  off.enabled = false;
  GuidanceConfig zero_h;
  zero_h.h = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 1 + rng() % kT;
    const std::size_t k = 1 + rng() % t;
    const LatentState s{gaussian(kDz, rng), t};
    const NoiseStream st(rng());
    const auto plain = diffusion::macro_step(s, k, f.den, st);
    CHECK(dual_space_macro_step(s, k, off, f.models(), st).state == plain);
    CHECK(dual_space_macro_step(s, k, zero_h, f.models(), st).state == plain);
  }
}

TEST_CASE("a single dual step leaves the latent as one reverse step") {
  Fixture f;
  std::mt19937_64 rng(44);
  const LatentState s{gaussian(kDz, rng), 9};
  const NoiseStream st(5);
  CallCounters c;
  const auto r = dual_space_macro_step(s, 1, GuidanceConfig{}, f.models(), st, &c);
  CHECK(r.n == 1);
  CHECK(r.state == diffusion::reverse_step(s, f.den, st.at(9, kDz)));
  CHECK(c.latent_steps == 1);
  CHECK(c.codec_calls == 3);
  CHECK(c.refiner_calls == 2);
  CHECK(graph::is_valid(r.structure));
}

TEST_CASE("macro step counters and time bookkeeping") {
  Fixture f;
  std::mt19937_64 rng(45);
  const LatentState s{gaussian(kDz, rng), kT};
  CallCounters c;
  const auto r = dual_space_macro_step(s, 20, GuidanceConfig{}, f.models(), NoiseStream(6), &c);
  CHECK(r.state.t == kT - 20);
  CHECK(c.latent_steps == 20);
  CHECK(r.n == 10);
  CHECK(r.m == 2);
  CHECK(c.refiner_calls == 4);
  CHECK(c.codec_calls == 3);
  CHECK_THROWS_AS(dual_space_macro_step(s, kT + 1, GuidanceConfig{}, f.models(), NoiseStream(6)),
                  ContractViolation);
}

TEST_CASE("anchors that reproduce the current latent give zero guidance") {
  // With an anchor equal to the current latent the guided steps are plain steps.
  Fixture f;
  std::mt19937_64 rng(46);
  const LatentState s{gaussian(kDz, rng), 15};
  const auto g = guidance_vector(s.z, s.z, 1.0);
  const auto xi = gaussian(kDz, rng);
  CHECK(guided_reverse_step(s, g, 1.0, f.den, xi) == diffusion::reverse_step(s, f.den, xi));
}

TEST_CASE("repair downgrades the worst node's heaviest edge first") {
  Graph g(4, {0, 3, 3, 3});
  g.set_edge(0, 1, 1);
  g.set_edge(0, 2, 2);
  const Graph r = repair_validity(g, ValidityRule{});
  CHECK(r.edge(0, 2) == 1);
  CHECK(r.edge(0, 1) == 0);
  CHECK(graph::is_valid(r));

  Graph ok(3, {3, 3, 3});
  ok.set_edge(0, 1, 2);
  CHECK(repair_validity(ok, ValidityRule{}) == ok);
}

TEST_CASE("refine examples") {
  Fixture f;
  std::mt19937_64 rng(47);
  const Graph g = random_graph(7, rng);
  CHECK(refine(g, 5, 0, f.ref) == g);

  DiscreteRefiner flat(8, kT, 9);
  flat.zero();
  const Graph valid = graph::sample_dataset(1, ValidityRule{}, rng)[0];
  const Graph out = refine(valid, 5, 1, flat);
  CHECK(out == Graph(valid.n()));
  CHECK(graph::is_valid(out));
}

TEST_CASE("refine output is always valid") {
  Fixture f;
  std::mt19937_64 rng(48);
  ValidityRule tight;
  tight.caps = {1, 1, 2, 3};
  for (int trial = 0; trial < 1000; ++trial) {
    const Graph g = random_graph(4 + trial % 9, rng);
    const auto& rule = trial % 2 ? tight : ValidityRule{};
    const Graph out = refine(g, 1 + trial % kT, 1 + trial % 3, f.ref, rule);
    CHECK(graph::is_valid(out, rule));
    CHECK(out.n() == g.n());
  }
}

TEST_CASE("vae codec basics") {
  Fixture f;
  std::mt19937_64 rng(49);
  const Graph g = graph::sample_dataset(1, ValidityRule{}, rng)[0];
  CHECK(f.vae.encode(g, 7) == f.vae.encode(g, 7));
  CHECK(f.vae.encode(g, 7).t == 7);
  for (int trial = 0; trial < 50; ++trial) {
    const Graph d = f.vae.decode({gaussian(kDz, rng), trial % (kT + 1)});
    CHECK_NOTHROW(d.check_well_formed());
    CHECK(d.n() >= graph::kMinNodes);
  }
  CHECK_THROWS_AS(TimeVAE(kDz, 8, f.vae.schedule, -1.0, 0), ConfigError);
}

TEST_CASE("vae loss without kl is the mean squared reconstruction") {
  TimeVAE vae(kDz, 16, diffusion::make_schedule(kT, diffusion::ScheduleKind::Cosine), 0.0, 4);
  std::mt19937_64 rng(50);
  const auto graphs = graph::sample_dataset(5, ValidityRule{}, rng);
  const std::vector<std::size_t> times{0, 3, 10, 29, 30};
  nn::Tensor input(5, graph::kFlatDim), target(5, graph::kFlatDim);
  for (std::size_t r = 0; r < 5; ++r) {
    const auto x = graph::to_flat(graphs[r]);
    std::copy(x.begin(), x.end(), input.row(r).begin());
    std::copy(x.begin(), x.end(), target.row(r).begin());
  }
  const nn::Tensor zeros(5, kDz);
  nn::Tape t(vae.params);
  const double loss = t.value(vae_loss(t, vae, input, target, times, zeros, zeros)).item();
  double expect = 0.0;
  for (std::size_t r = 0; r < 5; ++r) {
    const auto z = vae.encode_flat(input.row(r), times[r]);
    const auto y = vae.decode_logits(z, times[r]);
    for (std::size_t i = 0; i < y.size(); ++i) expect += sq(y[i] - target(r, i));
  }
  CHECK(loss == doctest::Approx(expect / 5.0).epsilon(1e-10));
}

TEST_CASE("vae and refiner losses pass the gradient oracle") {
  std::mt19937_64 rng(51);
  SUBCASE("vae") {
    TimeVAE vae(2, 2, diffusion::make_schedule(10), 0.1, 5);
    const auto graphs = graph::sample_dataset(3, ValidityRule{}, rng);
    nn::Tensor input(3, graph::kFlatDim), target(3, graph::kFlatDim), ep(3, 2), ed(3, 2);
    for (std::size_t r = 0; r < 3; ++r) {
      const auto x = graph::to_flat(graphs[r]);
      std::copy(x.begin(), x.end(), target.row(r).begin());
      for (std::size_t i = 0; i < x.size(); ++i) input(r, i) = x[i] + 0.1 * (r + 1);
    }
    for (auto& x : ep.values()) x = std::normal_distribution<double>()(rng);
    for (auto& x : ed.values()) x = std::normal_distribution<double>()(rng);
    const std::vector<std::size_t> times{0, 4, 9};
    const double err = nn::finite_diff_check(
        [&](nn::Tape& t) { return vae_loss(t, vae, input, target, times, ep, ed); }, vae.params,
        1e-5, 64, 3);
    CHECK(err < 1e-4);
  }
  SUBCASE("refiner") {
    DiscreteRefiner r(2, 10, 6);
    const Graph a = random_graph(5, rng), b = random_graph(5, rng);
    const Graph c = random_graph(4, rng), d = random_graph(4, rng);
    const double err = nn::finite_diff_check(
        [&](nn::Tape& t) { return denoise_loss(t, r, {&a, &c}, {&b, &d}, {3, 8}); }, r.params,
        1e-5, 64, 4);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("refiner training") {
  std::mt19937_64 rng(52);
  TrajectoryStore store;
  store.T = 1;
  const Graph in = random_graph(6, rng), out = graph::sample_dataset(1, ValidityRule{}, rng)[0];
  Graph target(6, std::vector<int>(6, 2));
  target.set_edge(0, 1, 1);
  for (std::size_t i = 0; i < 8; ++i) {
    Trajectory tr;
    tr.id = i;
    tr.states.push_back({{std::vector<double>(kDz), 1}, in});
    tr.states.push_back({{std::vector<double>(kDz), 0}, target});
    store.trajectories.push_back(tr);
  }
  SUBCASE("zero epochs") {
    DiscreteRefiner r(8, 1, 7);
    const auto before = r.params[0].value;
    RefinerTrainOptions opt;
    CHECK(train_refiner(store, r, opt, rng).empty());
    CHECK(r.params[0].value == before);
  }
  SUBCASE("one repeated pair is fitted") {
    DiscreteRefiner r(8, 1, 7);
    RefinerTrainOptions opt;
    opt.epochs = 150;
    opt.batch = 8;
    opt.adam.lr = 3e-3;
    const auto losses = train_refiner(store, r, opt, rng);
    REQUIRE(losses.size() == 150);
    CHECK(losses.back() < 0.1 * losses.front());
    CHECK(refiner_apply(r, in, 1).node_labels() == target.node_labels());
  }
  CHECK(refiner_pairs(store).size() == 8);
}

TEST_CASE("trajectory distillation") {
  Fixture f;
  auto one = distill_trajectories(f.den, f.vae, 1, 9);
  REQUIRE(one.trajectories.size() == 1);
  CHECK(one.state_count() == kT + 1);
  CHECK_NOTHROW(one.check());
  const auto& st = one.trajectories[0].states;
  for (std::size_t i = 1; i < st.size(); ++i) CHECK(st[i].state.t < st[i - 1].state.t);
  CHECK(one.trajectories[0].terminal_reward == graph::reward(st.back().graph));

  const auto a = distill_trajectories(f.den, f.vae, 6, 10);
  const auto b = distill_trajectories(f.den, f.vae, 6, 10);
  CHECK(a.state_count() == 6 * (kT + 1));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(a.trajectories[i].terminal_reward == b.trajectories[i].terminal_reward);
  }

  const auto sparse = distill_state_samples(f.den, f.vae, 5, 4, 11);
  CHECK(sparse.state_count() == 20);
  for (const auto& tr : sparse.trajectories) {
    for (std::size_t i = 1; i < tr.states.size(); ++i) {
      CHECK(tr.states[i].state.t < tr.states[i - 1].state.t);
    }
  }
}

TEST_CASE("trajectory store jsonl round trip") {
  Fixture f;
  const auto a = distill_trajectories(f.den, f.vae, 2, 12);
  const auto path = std::filesystem::temp_directory_path() / "treediff_store_roundtrip.jsonl";
  a.save_jsonl(path.string());
  const auto b = TrajectoryStore::load_jsonl(path.string());
  std::filesystem::remove(path);
  CHECK(b.T == a.T);
  REQUIRE(b.trajectories.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(b.trajectories[i].terminal_reward == a.trajectories[i].terminal_reward);
    REQUIRE(b.trajectories[i].states.size() == a.trajectories[i].states.size());
    for (std::size_t s = 0; s < a.trajectories[i].states.size(); ++s) {
      CHECK(b.trajectories[i].states[s].state == a.trajectories[i].states[s].state);
      CHECK(b.trajectories[i].states[s].graph == a.trajectories[i].states[s].graph);
    }
  }
}
