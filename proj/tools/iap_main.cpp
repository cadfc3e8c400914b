#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "iap/config.hpp"
#include "iap/error.hpp"
#include "iap/pipeline.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
  std::string placement;
  std::string targeted;
  bool print_mode = false;
  std::string image;
  std::vector<std::string> runs;
  std::string report_out = "report.md";
  bool verbose = false;
};

iap::ExperimentConfig resolve(const Options& o) {
  iap::ExperimentConfig cfg =
      o.config.empty() ? iap::resolve_config(nlohmann::json::object()) : iap::load_config(o.config);
  if (o.seed) iap::override_seed(cfg, *o.seed);
  if (!o.out.empty()) iap::override_out(cfg, o.out);
  if (!o.placement.empty()) iap::override_placement(cfg, o.placement);
  if (!o.targeted.empty()) iap::override_targeted(cfg, o.targeted);
  if (o.print_mode) iap::override_print_mode(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inconspicuous adversarial patch pipeline"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "Experiment config (TOML)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Global seed override");
    sub->add_option("--out", o.out, "Run directory override");
    sub->add_flag("--resume", o.resume, "Reuse valid checkpoints");
    sub->add_flag("-v,--verbose", o.verbose, "Debug logging");
  };
  auto attack_flags = [&](CLI::App* sub) {
    sub->add_option("--placement", o.placement, "fixed:TOP,LEFT overrides the Grad-CAM placement");
    sub->add_option("--targeted", o.targeted, "Target class name");
    sub->add_flag("--print-mode", o.print_mode, "Enable the non-printability term");
    sub->add_option("--image", o.image, "Restrict to one fixture image id");
  };

  auto* make = app.add_subcommand("make-dataset", "Render the procedural dataset");
  common(make);
  auto* train = app.add_subcommand("train-victims", "Train or load the victim zoo and pick fixtures");
  common(train);
  auto* vmap = app.add_subcommand("vulnmap", "Grad-CAM heatmaps and patch placements");
  common(vmap);
  attack_flags(vmap);
  auto* attack = app.add_subcommand("attack", "Train generator stacks and emit seeded patches");
  common(attack);
  attack_flags(attack);
  auto* base = app.add_subcommand("baseline", "Direct-patch and PGD baselines");
  common(base);
  attack_flags(base);
  auto* eval = app.add_subcommand("evaluate", "Success tables, transfer, detection risk, histograms, physical grid");
  common(eval);
  attack_flags(eval);
  auto* run = app.add_subcommand("run", "train-victims, attack, baseline and evaluate in order");
  common(run);
  attack_flags(run);
  auto* report = app.add_subcommand("report", "Consolidated markdown over run directories");
  report->add_option("runs", o.runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("-o,--output", o.report_out, "Markdown output path");
  auto* print = app.add_subcommand("print-config", "Print the resolved config");
  common(print);
  attack_flags(print);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(o.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (report->parsed()) {
      std::vector<std::filesystem::path> dirs(o.runs.begin(), o.runs.end());
      iap::write_report(dirs, o.report_out);
      spdlog::info("report written to {}", o.report_out);
      return 0;
    }
    iap::ExperimentConfig cfg = resolve(o);
    if (print->parsed()) {
      std::fputs(iap::to_toml(cfg.resolved).c_str(), stdout);
      return 0;
    }
    iap::Pipeline p(std::move(cfg), o.resume);
    const std::optional<std::string> image = o.image.empty() ? std::nullopt : std::optional(o.image);
    if (make->parsed()) p.make_dataset();
    if (train->parsed()) p.train_victims();
    if (vmap->parsed()) p.vulnmap(image);
    if (attack->parsed()) p.attack(image);
    if (base->parsed()) p.baseline(image);
    if (eval->parsed()) p.evaluate();
    if (run->parsed()) p.run_all();
    return 0;
  } catch (const iap::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
}
