#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "impromptu/pipeline.hpp"

namespace {

using impromptu::pipeline::PipelineConfig;

struct Overrides {
  std::string config;
  std::optional<std::string> workdir, corpus, seeds, lexicon, gold, provider, provider_file;
  std::optional<std::vector<std::size_t>> k;
  std::optional<int> rounds, threads;
  std::optional<double> keep_fraction;
  std::optional<std::uint64_t> seed_rng;
  bool no_cam = false;
  bool force = false;
  bool print_config = false;
  std::string log_level = "info";
};

PipelineConfig resolve(const Overrides& o, const std::string& command) {
  auto c = o.config.empty() ? PipelineConfig{} : PipelineConfig::load(o.config);
  if (o.workdir) c.workdir = *o.workdir;
  if (o.corpus) c.corpus = *o.corpus;
  if (o.seeds) c.seeds = *o.seeds;
  if (o.lexicon) c.lexicon = *o.lexicon;
  if (o.gold) c.gold = *o.gold;
  if (o.provider) c.provider = *o.provider;
  if (o.provider_file) c.provider_file = *o.provider_file;
  if (o.k) c.k_list = *o.k;
  if (o.rounds) c.rounds = *o.rounds;
  if (o.threads) c.threads = *o.threads;
  if (o.keep_fraction) c.keep_fraction = *o.keep_fraction;
  if (o.seed_rng) c.seed = *o.seed_rng;
  if (o.no_cam) c.fine_train.cam_weight = 0.0;
  if (command == "synth") c.synth.enabled = true;
  if (c.provider != "template" && c.provider != "file" && c.provider != "external") {
    throw impromptu::InputError("--provider must be template, file or external");
  }
  return c;
}

void error_line(const char* category, int code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", category}, {"exit_code", code}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Impromptu euphemism detection pipeline"};
  app.require_subcommand(0, 1);
  app.allow_extras();
  Overrides o;
  app.add_option("--config", o.config, "Pipeline config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--workdir", o.workdir, "Directory for stage artifacts");
  app.add_option("--corpus", o.corpus, "Input corpus (text lines or JSON-lines)");
  app.add_option("--seeds", o.seeds, "Seed list, one term per line");
  app.add_option("--lexicon", o.lexicon, "Optional lexicon restricting fine candidates");
  app.add_option("--gold", o.gold, "Gold labels (JSON-lines)");
  app.add_option("--k", o.k, "Comma-separated k values")->delimiter(',');
  app.add_option("--rounds", o.rounds, "Iteration rounds after the initial training");
  app.add_option("--keep-fraction", o.keep_fraction, "Fraction of occurrences kept per round");
  app.add_option("--threads", o.threads, "OpenMP worker cap");
  app.add_option("--seed-rng", o.seed_rng, "Master random seed");
  app.add_option("--provider", o.provider, "Dev-set provider: template, file or external");
  app.add_option("--provider-file", o.provider_file, "Provider file for --provider file");
  app.add_flag("--no-cam", o.no_cam, "Disable the context augmentation objective");
  app.add_flag("--force", o.force, "Rerun stages whose outputs exist");
  app.add_flag("--print-config", o.print_config, "Print the resolved config before running");
  app.add_option("--log-level", o.log_level, "trace, debug, info, warn, error or off");

  std::vector<std::string> commands = impromptu::pipeline::stage_names();
  commands.push_back("pipeline");
  for (const auto& name : commands) {
    app.add_subcommand(name, name == "pipeline" ? "Run every stage in order" : "Run the " + name + " stage")
        ->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << '\n';
    error_line("input", 2, e.what());
    return 2;
  }

  const auto extras = app.remaining();
  if (app.get_subcommands().empty() || !extras.empty()) {
    std::string message = "a subcommand is required";
    if (!extras.empty()) {
      message = app.get_subcommands().empty() ? "unknown subcommand '" + extras.front() + "'"
                                              : "unexpected argument '" + extras.front() + "'";
    }
    std::cerr << app.help() << '\n';
    error_line("input", 2, message);
    return 2;
  }

  spdlog::set_level(spdlog::level::from_str(o.log_level));
  spdlog::set_pattern("[%H:%M:%S] %l %v");
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const auto config = resolve(o, command);
    if (o.print_config) std::cout << config.to_json().dump(2) << std::endl;
    if (command == "pipeline") {
      impromptu::pipeline::run_pipeline(config, o.force);
    } else {
      impromptu::pipeline::run_stage(command, config, o.force);
    }
  } catch (const impromptu::ProviderError& e) {
    error_line("provider", 4, std::string(e.what()) + " (attempts: " + std::to_string(e.attempts()) + ")");
    return 4;
  } catch (const impromptu::InvariantError& e) {
    error_line("invariant", 3, e.what());
    return 3;
  } catch (const impromptu::InputError& e) {
    error_line("input", 2, e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    error_line("input", 2, std::string("malformed JSON input: ") + e.what());
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    error_line("input", 2, e.what());
    return 2;
  }
  return 0;
}
