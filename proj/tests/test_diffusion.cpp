#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "treediff/diffusion/diffusion.hpp"

using namespace treediff;
using namespace treediff::diffusion;

namespace {

DenoiserModel small_model(std::size_t T = 40, ScheduleKind kind = ScheduleKind::Cosine) {
  return DenoiserModel(4, 16, make_schedule(T, kind), 17);
}

void zero_params(DenoiserModel& m) {
  for (auto& p : m.params) p.value.fill(0.0);
}

std::vector<double> gaussian(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

}  // namespace

TEST_CASE("schedules are monotone and end near pure noise") {
  for (auto kind : {ScheduleKind::Linear, ScheduleKind::Cosine}) {
    for (std::size_t T : {std::size_t{2}, std::size_t{10}, std::size_t{200}, std::size_t{1000}}) {
      CAPTURE(T);
      const auto s = make_schedule(T, kind);
      REQUIRE(s.beta.size() == T + 1);
      CHECK(s.alpha_bar[0] == 1.0);
      CHECK(s.beta[1] > 0.0);
      CHECK(s.beta[T] < 1.0);
      for (std::size_t t = 2; t <= T; ++t) CHECK(s.beta[t] >= s.beta[t - 1]);
      if (T >= 10) CHECK(s.alpha_bar[T] < 1e-3);
      double prod = 1.0;
      for (std::size_t t = 1; t <= T; ++t) {
        prod *= 1.0 - s.beta[t];
        CHECK(s.alpha_bar[t] == doctest::Approx(prod).epsilon(1e-12));
      }
      CHECK(s.beta_tilde[1] == 0.0);
      for (std::size_t t = 2; t <= T; ++t) {
        const double bt = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
        CHECK(s.beta_tilde[t] == doctest::Approx(bt).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(make_schedule(1), ConfigError);
}

TEST_CASE("linear schedule at T=1000 is the textbook 1e-4..0.02 ramp") {
  const auto s = make_schedule(1000, ScheduleKind::Linear);
  CHECK(s.beta[1] == doctest::Approx(1e-4));
  CHECK(s.beta[1000] == doctest::Approx(0.02));
  CHECK(s.beta[500] == doctest::Approx(1e-4 + (0.02 - 1e-4) * 499.0 / 999.0));
}

TEST_CASE("cosine schedule keeps half its signal near the midpoint at T=200") {
  const auto s = make_schedule(200, ScheduleKind::Cosine);
  // Squared-cosine oracle with offset 0.008, before any capping.
  auto f = [](double t) {
    const double x = (t / 200.0 + 0.008) / 1.008 * M_PI / 2.0;
    return std::cos(x) * std::cos(x);
  };
  CHECK(s.alpha_bar[100] == doctest::Approx(f(100) / f(0)).epsilon(1e-9));
  CHECK(s.alpha_bar[200] < 1e-3);
  CHECK(s.beta[200] <= 0.2 + 1e-12);
}

TEST_CASE("schedule json round trip and rebuild from betas") {
  const auto s = make_schedule(30, ScheduleKind::Cosine);
  const auto r = schedule_from_json(to_json(s));
  CHECK(r.T == s.T);
  CHECK(r.kind == s.kind);
  CHECK(r.beta == s.beta);
  CHECK(r.alpha_bar == s.alpha_bar);
  const auto j = to_json(s);
  CHECK(j.contains("T"));
  CHECK(j.contains("kind"));
  CHECK(j.contains("beta"));
  auto bad = j;
  bad["beta"][3] = 1.5;
  CHECK_THROWS(schedule_from_json(bad));
}

TEST_CASE("forward noise") {
  const auto s = make_schedule(50, ScheduleKind::Cosine);
  const std::vector<double> z0{1.0, -2.0, 0.5};
  const std::vector<double> zero(3, 0.0);
  const auto st = forward_noise(z0, 17, s, zero);
  CHECK(st.t == 17);
  for (int i = 0; i < 3; ++i) CHECK(st.z[i] == std::sqrt(s.alpha_bar[17]) * z0[i]);
  CHECK_THROWS_AS(forward_noise(z0, 0, s, zero), ContractViolation);
  CHECK_THROWS_AS(forward_noise(z0, 51, s, zero), ContractViolation);
}

TEST_CASE("sequential one-step noising equals the closed-form marginal") {
  const auto s = make_schedule(60, ScheduleKind::Linear);
  std::mt19937_64 rng(31);
  const auto z0 = gaussian(5, rng);
  for (std::size_t t : {std::size_t{1}, std::size_t{7}, std::size_t{33}, std::size_t{60}}) {
    std::vector<double> z = z0;
    std::vector<double> combined(5, 0.0);
    for (std::size_t u = 1; u <= t; ++u) {
      const auto e = gaussian(5, rng);
      const double a = std::sqrt(1.0 - s.beta[u]);
      for (int i = 0; i < 5; ++i) {
        z[i] = a * z[i] + std::sqrt(s.beta[u]) * e[i];
        combined[i] = a * combined[i] + std::sqrt(s.beta[u]) * e[i];
      }
    }
    for (auto& c : combined) c /= std::sqrt(1.0 - s.alpha_bar[t]);
    const auto m = forward_noise(z0, t, s, combined);
    for (int i = 0; i < 5; ++i) CHECK(m.z[i] == doctest::Approx(z[i]).epsilon(1e-5));
  }
}

TEST_CASE("noise streams are counter based") {
  NoiseStream a(42), b(42);
  CHECK(a.at(7, 6) == b.at(7, 6));
  CHECK(a.at(7, 6) != a.at(8, 6));
  CHECK(a.fork(1).at(7, 6) != a.at(7, 6));
  CHECK(a.fork(1).at(7, 6) == b.fork(1).at(7, 6));
  CHECK(a.fork(1).id() != a.fork(2).id());
}

TEST_CASE("time embedding") {
  const auto e = time_embedding(50, 200);
  CHECK(e[0] == doctest::Approx(0.25));
  CHECK(e[1] == doctest::Approx(1.0));
  CHECK(e[2] == doctest::Approx(0.0));
}

TEST_CASE("reverse step examples") {
  auto m = small_model();
  std::mt19937_64 rng(32);
  const LatentState s{gaussian(4, rng), 1};
  const auto a = reverse_step(s, m, gaussian(4, rng));
  const auto b = reverse_step(s, m, gaussian(4, rng));
  CHECK(a == b);
  CHECK(a.t == 0);

  const LatentState s9{gaussian(4, rng), 9};
  const auto xi = gaussian(4, rng);
  CHECK(reverse_step(s9, m, xi) == reverse_step(s9, m, xi));

  zero_params(m);
  const auto& sc = m.schedule;
  const auto out = reverse_step(s9, m, xi);
  for (int i = 0; i < 4; ++i) {
    const double expect =
        s9.z[i] / std::sqrt(1.0 - sc.beta[9]) + std::sqrt(sc.beta_tilde[9]) * xi[i];
    CHECK(out.z[i] == doctest::Approx(expect).epsilon(1e-14));
  }
  CHECK_THROWS_AS(reverse_step(LatentState{gaussian(4, rng), 0}, m, xi), ContractViolation);
}

TEST_CASE("macro step composes bit-exactly") {
  const auto m = small_model(40);
  std::mt19937_64 rng(33);
  std::vector<std::vector<double>> noises;
  for (int i = 0; i < 40; ++i) noises.push_back(gaussian(4, rng));
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t t = 2 + rng() % 39;
    const std::size_t a = 1 + rng() % (t - 1);
    const std::size_t b = 1 + rng() % (t - a);
    const LatentState s{gaussian(4, rng), t};
    std::span<const std::vector<double>> all(noises.data(), a + b);
    const auto whole = macro_step(s, a + b, m, all);
    const auto split = macro_step(macro_step(s, a, m, all.first(a)), b, m, all.subspan(a, b));
    CHECK(whole == split);
  }
  const LatentState s{gaussian(4, rng), 5};
  CHECK(macro_step(s, 1, m, std::span(noises.data(), 1)) == reverse_step(s, m, noises[0]));
  CHECK_THROWS_AS(macro_step(s, 6, m, NoiseStream(1)), ContractViolation);
  CHECK_THROWS_AS(macro_step(s, 0, m, NoiseStream(1)), ContractViolation);
  CHECK_THROWS_AS(macro_step(s, 3, m, std::span(noises.data(), 2)), ContractViolation);
}

TEST_CASE("stream macro step uses the noise indexed by the current time") {
  const auto m = small_model(30);
  const NoiseStream st(77);
  const auto s = initial_state(m, st);
  CHECK(s.t == 30);
  CHECK(s.z == st.at(31, 4));
  std::vector<std::vector<double>> noises;
  for (std::size_t t = 30; t > 18; --t) noises.push_back(st.at(t, 4));
  CHECK(macro_step(s, 12, m, st) == macro_step(s, 12, m, noises));
  const auto end = macro_step(s, 30, m, st);
  CHECK(end.t == 0);
  for (double x : end.z) CHECK(std::isfinite(x));
}

TEST_CASE("denoiser training") {
  SUBCASE("zero epochs leave the parameters alone") {
    auto m = small_model();
    const auto before = m.params[0].value;
    std::mt19937_64 rng(34);
    TrainOptions opt;
    opt.epochs = 0;
    CHECK(train_denoiser({{1, 2, 3, 4}}, m, opt, rng).empty());
    CHECK(m.params[0].value == before);
  }
  SUBCASE("a single point can be fitted") {
    DenoiserModel m(2, 32, make_schedule(20, ScheduleKind::Cosine), 3);
    std::mt19937_64 rng(35);
    std::vector<std::vector<double>> data(64, std::vector<double>{1.5, -0.5});
    TrainOptions opt;
    opt.epochs = 400;
    opt.batch = 64;
    opt.adam.lr = 3e-3;
    const auto losses = train_denoiser(data, m, opt, rng);
    REQUIRE(losses.size() == 400);
    const double first = std::accumulate(losses.begin(), losses.begin() + 10, 0.0);
    const double last = std::accumulate(losses.end() - 10, losses.end(), 0.0);
    CHECK(last < 0.1 * first);
  }
}

TEST_CASE("diffusion loss gradient") {
  auto m = DenoiserModel(2, 4, make_schedule(10), 5);
  std::mt19937_64 rng(36);
  nn::Tensor zt(3, 2), eps(3, 2);
  for (auto& x : zt.values()) x = std::normal_distribution<double>()(rng);
  for (auto& x : eps.values()) x = std::normal_distribution<double>()(rng);
  const std::vector<std::size_t> times{1, 5, 10};
  CHECK(m.params.count() <= 64);
  const double err = nn::finite_diff_check(
      [&](nn::Tape& t) { return diffusion_loss(t, m, zt, times, eps); }, m.params, 1e-5);
  CHECK(err < 1e-4);
}
