// Benchmark and diagnostics CLI for the off-grid SBL channel estimation
// library. Subcommands: bench (Monte Carlo sweep to CSV), single (one run
// with an iteration trace), leakage (DFT energy-leakage profile),
// gen-scenario (write a preset scenario file).

#include <CLI11.hpp>
#include <offgrid/offgrid.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

namespace {

offgrid::BenchOptions
make_options(const std::string& methods, int trials, std::uint64_t seed, int threads,
             bool no_timing) {
  offgrid::BenchOptions opt;
  if (!methods.empty()) opt.methods = offgrid::detail::split_list(methods);
  opt.trials = trials;
  opt.master_seed = seed;
  opt.threads = threads;
  opt.zero_timing = no_timing;
  return opt;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"off-grid sparse Bayesian massive-MIMO channel estimation benchmarks"};
  app.require_subcommand(1);

  std::string scenario_spec;
  std::string methods;
  std::string out_path;
  std::string method = "offgrid";
  std::string preset = "ula_desk";
  int trials = 0;
  std::uint64_t seed = 1;
  int threads = 1;
  bool no_timing = false;
  int leak_n = 80;
  double leak_dl = 0.5;
  double leak_theta = 5.0198;
  int leak_sweep = 1;
  double leak_span = 0.0;
  bool list_presets = false;

  auto* bench = app.add_subcommand("bench", "run a Monte Carlo benchmark and emit CSV records");
  bench->add_option("--scenario", scenario_spec, "scenario file or preset name")->required();
  bench->add_option("--methods", methods, "comma-separated method list (default: scenario)");
  bench->add_option("--trials", trials, "trial count override (default: scenario)");
  bench->add_option("--seed", seed, "master seed")->capture_default_str();
  bench->add_option("--threads", threads, "worker threads")
      ->envname("OFFGRID_SBL_THREADS")
      ->capture_default_str();
  bench->add_option("--out", out_path, "CSV output path");
  bench->add_flag("--no-timing", no_timing, "zero the runtime_ms column (byte-stable output)");

  auto* single = app.add_subcommand("single", "run one estimation with an iteration trace");
  single->add_option("--scenario", scenario_spec, "scenario file or preset name")->required();
  single->add_option("--method", method, "estimation method")->capture_default_str();
  single->add_option("--seed", seed, "trial seed")->capture_default_str();
  single->add_option("--out", out_path, "trace CSV path");

  auto* leakage = app.add_subcommand("leakage", "DFT energy-leakage profile of a ULA");
  leakage->add_option("--n", leak_n, "array size")->capture_default_str();
  leakage->add_option("--d-over-lambda", leak_dl, "element spacing in wavelengths")
      ->capture_default_str();
  leakage->add_option("--theta-deg", leak_theta, "path direction (degrees)")
      ->capture_default_str();
  leakage->add_option("--sweep-count", leak_sweep, "number of theta samples")
      ->capture_default_str();
  leakage->add_option("--sweep-span-deg", leak_span, "total width of the theta sweep")
      ->capture_default_str();
  leakage->add_option("--out", out_path, "CSV output path");

  auto* gen = app.add_subcommand("gen-scenario", "write a preset scenario file");
  gen->add_option("--preset", preset, "preset name")->capture_default_str();
  gen->add_option("--out", out_path, "scenario output path");
  gen->add_flag("--list", list_presets, "list preset names and exit");

  CLI11_PARSE(app, argc, argv);

  try {
    if (bench->parsed()) {
      const auto scenario = offgrid::load_scenario(scenario_spec);
      const auto records =
          offgrid::run_benchmark(scenario, make_options(methods, trials, seed, threads, no_timing));
      if (!out_path.empty()) offgrid::write_text_file(out_path, offgrid::bench_csv(records));
      std::cout << "scenario: " << scenario.name << "  records: " << records.size() << "\n"
                << offgrid::summary_table(records);
      if (!out_path.empty()) std::cout << "csv: " << out_path << "\n";
    } else if (single->parsed()) {
      const auto scenario = offgrid::load_scenario(scenario_spec);
      const auto res = offgrid::run_single(scenario, method, seed);
      if (!out_path.empty()) offgrid::write_text_file(out_path, offgrid::trace_csv(res.trace));
      std::printf("method=%s nmse=%.10g iterations=%d runtime_ms=%.10g flags=%s\n", method.c_str(),
                  res.nmse, res.iterations, res.runtime_ms, res.flags.c_str());
      if (!out_path.empty()) std::cout << "trace: " << out_path << "\n";
    } else if (leakage->parsed()) {
      const auto rows = offgrid::run_leakage(leak_n, leak_dl, leak_theta, leak_sweep, leak_span);
      const auto csv = offgrid::leakage_csv(rows);
      if (!out_path.empty()) {
        offgrid::write_text_file(out_path, csv);
        std::cout << "rows: " << rows.size() << "  csv: " << out_path << "\n";
      } else {
        std::cout << csv;
      }
    } else if (gen->parsed()) {
      if (list_presets) {
        for (const auto& p : offgrid::scenario_preset_names()) std::cout << p << "\n";
        return 0;
      }
      const auto scenario = offgrid::scenario_preset(preset);
      const auto text = offgrid::scenario_to_text(scenario);
      if (!out_path.empty()) {
        offgrid::write_text_file(out_path, text);
        std::cout << "scenario: " << out_path << "\n";
      } else {
        std::cout << text;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
