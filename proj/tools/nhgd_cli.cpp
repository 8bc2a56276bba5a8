// nhgd_cli: run experiment specs, plot their metrics, run acceptance suites.

#include <iostream>

#include "CLI11.hpp"
#include "nhgd/bench.hpp"
#include "nhgd/verify.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Bilevel optimization experiments"};
  app.require_subcommand(1);

  std::string spec_path;
  std::string run_out;
  std::size_t run_threads = 0;
  auto* run = app.add_subcommand("run", "Run every method x seed of an experiment spec");
  run->add_option("spec", spec_path, "YAML spec, or a manifest.json from an earlier run")->required();
  run->add_option("--out", run_out, "Output directory (overrides output_dir and NHGD_OUT)");
  run->add_option("--threads", run_threads, "Worker threads (overrides threads and NHGD_THREADS)")
      ->check(CLI::PositiveNumber);

  std::string suite;
  bool verbose = false;
  auto* verify = app.add_subcommand("verify", "Run an acceptance suite");
  std::string suites;
  for (const auto& n : nhgd::suite_names()) suites += (suites.empty() ? "" : ", ") + n;
  verify->add_option("suite", suite, "One of: " + suites)->required();
  verify->add_flag("-v,--verbose", verbose, "Print progress lines");

  std::string csv_path;
  std::string style_name = "loss_vs_epoch";
  std::size_t smooth = 10;
  std::string plot_out;
  auto* plot = app.add_subcommand("plot", "Render metrics.csv as SVG");
  plot->add_option("metrics", csv_path, "metrics.csv from a run")->required();
  plot->add_option("--style", style_name, "loss_vs_epoch or metric_vs_walltime");
  plot->add_option("--smooth", smooth, "Moving-average window")->check(CLI::PositiveNumber);
  plot->add_option("--out", plot_out, "SVG path (default: next to the CSV)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (*run) {
    nhgd::RunOverrides o;
    if (run->count("--out")) o.output_dir = run_out;
    if (run->count("--threads")) o.threads = run_threads;
    return nhgd::cmd_run(spec_path, o, std::cout, std::cerr);
  }
  if (*verify) return nhgd::cmd_verify(suite, verbose, std::cout, std::cerr);

  const auto style = nhgd::parse_plot_style(style_name);
  if (!style) {
    std::cerr << "unknown style '" << style_name << "' (loss_vs_epoch or metric_vs_walltime)\n";
    return 2;
  }
  std::optional<std::filesystem::path> out;
  if (!plot_out.empty()) out = plot_out;
  return nhgd::cmd_plot(csv_path, *style, smooth, out, std::cout, std::cerr);
}
