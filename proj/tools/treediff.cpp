#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "treediff/harness/harness.hpp"

namespace th = treediff::harness;

namespace {

void print_rows(const std::vector<th::RunRecord>& rows) {
  std::cout << th::kCsvHeader << ",wall_seconds\n";
  for (const auto& r : rows) std::cout << th::csv_row(r) << ',' << r.wall_seconds << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tree-search guided latent graph diffusion on a toy graph domain"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  app.add_option("--out", out_dir, "output directory (checkpoints and results)");

  auto* train = app.add_subcommand("train", "run or resume the staged training pipeline");

  auto* sample = app.add_subcommand("sample", "draw samples with one method at one budget");
  std::string method = "treediff";
  std::size_t budget = 1;
  std::size_t count = 10;
  sample->add_option("--method", method, "standard|bon|beam|treediff")
      ->check(CLI::IsMember({"standard", "bon", "beam", "treediff"}));
  sample->add_option("--budget", budget, "budget multiple of T")->check(CLI::PositiveNumber);
  sample->add_option("--count", count, "number of samples")->check(CLI::PositiveNumber);

  auto* bench = app.add_subcommand("bench-scaling", "methods x budgets benchmark");
  auto* ablate = app.add_subcommand("ablate", "guidance scale sweep and guidance-off run");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks of the training losses");
  double h = 1e-5;
  gradcheck->add_option("--step", h, "central difference step");

  CLI11_PARSE(app, argc, argv);

  try {
    th::ExperimentConfig cfg = config_path.empty() ? th::ExperimentConfig{} : th::load_config(config_path);
    if (*seed_opt) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.validate();
    const th::fs::path out = cfg.out_dir;

    if (*train) {
      std::vector<th::StageLog> log;
      th::pipeline_train(cfg, &log);
      for (const auto& s : log) {
        std::cout << s.stage << ": " << (s.ran ? "trained" : "loaded");
        if (s.ran) std::cout << " in " << s.seconds << " s";
        if (!s.losses.empty()) std::cout << ", final loss " << s.losses.back();
        std::cout << '\n';
      }
    } else if (*sample) {
      const auto p = th::load_pipeline(cfg);
      auto rec = th::run_method(p, method, budget, count, cfg.seed);
      std::ofstream graphs(out / ("samples_" + method + ".jsonl"));
      for (const auto& s : rec.samples) {
        graphs << nlohmann::json{{"seed", s.seed},
                                 {"reward", s.reward},
                                 {"valid", s.valid},
                                 {"counters", treediff::to_json(s.counters)},
                                 {"graph", treediff::graph::to_json(s.graph)}}
                      .dump()
               << '\n';
      }
      if (method == "treediff") {
        std::ofstream traces(out / "search_trace.jsonl");
        const auto sc = th::treediff_budget_config(cfg.search, budget);
        for (std::size_t i = 0; i < count; ++i) {
          treediff::search::SearchTrace tr;
          th::sample_treediff_one(p, sc, th::sample_seed(cfg.seed, i), &tr);
          traces << tr.to_jsonl();
        }
      }
      th::write_csv(out / ("sample_" + method + ".csv"), {rec});
      print_rows({rec});
    } else if (*bench) {
      const auto p = th::load_pipeline(cfg);
      const auto rows = th::run_scaling_benchmark(p);
      th::write_csv(out / "bench_scaling.csv", rows);
      th::write_samples_csv(out / "bench_scaling_samples.csv", rows);
      print_rows(rows);
    } else if (*ablate) {
      const auto p = th::load_pipeline(cfg);
      const auto rows = th::run_ablations(p);
      th::write_csv(out / "ablations.csv", rows);
      print_rows(rows);
    } else if (*gradcheck) {
      bool ok = true;
      for (const auto& r : th::gradcheck_all(cfg.seed, h)) {
        std::printf("%-10s params=%zu max_rel_error=%.3e\n", r.loss.c_str(), r.parameters, r.max_rel_error);
        ok = ok && r.max_rel_error < 1e-4;
      }
      if (!ok) {
        std::cerr << "gradcheck: relative error above 1e-4\n";
        return 1;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "treediff: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
