// dmdlab: train a toy teacher, distill it into a one-step generator, and
// evaluate the result. See README.md for the verbs and artifacts.
#include "dmd/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

namespace {

void setup_logging() {
  auto logger = spdlog::stderr_logger_st("dmdlab");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("DMD_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error") spdlog::set_level(spdlog::level::err);
  else if (level == "debug") spdlog::set_level(spdlog::level::debug);
  else spdlog::set_level(spdlog::level::info);
  if (level != "error" && level != "info" && level != "debug")
    spdlog::warn("DMD_LOG_LEVEL={} not recognised, using info", level);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Distribution matching distillation on toy targets"};
  app.require_subcommand(1);

  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  int steps = 0;
  long n = 0;

  const std::pair<const char*, const char*> verbs[] = {
      {"train-teacher", "train the diffusion teacher and report its score error"},
      {"gen-pairs", "solve the teacher ODE on fresh noise to build the paired dataset"},
      {"distill", "train the one-step generator"},
      {"sample", "draw samples from the generator"},
      {"eval", "compare generator, teacher and target samples"},
      {"ablate", "run the full / no-regression / no-DM comparison"},
      {"grad-check", "finite-difference check of every backward rule"}};
  for (const auto& [name, help] : verbs) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "TOML run configuration (default: built-in two-mode setup)");
    sub->add_option("--seed", seed, "override the run seed");
    sub->add_option("--out", out, "override the output directory");
    sub->add_option("--steps", steps, "override the step count of this stage");
    if (std::string_view(name) == "sample") sub->add_option("--n", n, "number of samples");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  auto* sub = app.get_subcommands().front();
  dmd::CommandOptions opts;
  opts.config = config;
  if (sub->count("--seed")) opts.seed = seed;
  if (sub->count("--out")) opts.out = out;
  if (sub->count("--steps")) opts.steps = steps;
  if (sub->get_option_no_throw("--n") && sub->count("--n")) opts.n = n;
  return dmd::run_command(sub->get_name(), opts, std::cout, std::cerr);
}
