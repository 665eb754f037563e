#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "corrreid/pipeline.hpp"

int main(int argc, char** argv) {
  using corrreid::pipeline::CommandOptions;

  CLI::App app{"Multi-scale correlation re-identification pipeline"};
  app.require_subcommand(1);

  CommandOptions options;
  std::vector<std::size_t> sweep;
  std::uint64_t seed = 0;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", options.config_path, "Pipeline config JSON");
    cmd->add_option("--in", options.in, "Input store directory or manifest");
    cmd->add_option("--out", options.out, "Output path");
    cmd->add_option("--seed", seed, "Derive every seed from this value");
  };
  auto* train = app.add_subcommand("train", "Run the three training stages");
  auto* correlate = app.add_subcommand("correlate", "Apply GCM, LCM and fusion to an encoder store");
  auto* eval = app.add_subcommand("eval", "Retrieval metrics for a feature store");
  auto* bench = app.add_subcommand("bench", "Multiply counts of the landmark affinity over a sweep");
  auto* synth = app.add_subcommand("synth", "Write the configured synthetic dataset");
  for (auto* cmd : {train, correlate, eval, bench, synth}) add_common(cmd);
  bench->add_option("--sweep", sweep, "Landmark counts")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : corrreid::pipeline::kConfig;
  }

  if (!sweep.empty()) options.sweep = sweep;
  for (auto* cmd : {train, correlate, eval, bench, synth}) {
    if (!cmd->parsed()) continue;
    if (cmd->count("--seed") > 0) options.seed = seed;
    return corrreid::pipeline::run(cmd->get_name(), options, std::cout, std::cerr);
  }
  return corrreid::pipeline::kConfig;
}
