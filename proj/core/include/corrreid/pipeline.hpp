#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "corrreid/config.hpp"

namespace corrreid::pipeline {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kState = 3, kData = 4 };

struct CommandOptions {
  std::string config_path;
  std::string in;
  std::string out;
  std::vector<std::size_t> sweep{1, 3, 5, 7, 9};
  std::optional<std::uint64_t> seed;
};

/// Config from the file (defaults when the path is empty), reseeded when
/// --seed was given.
PipelineConfig resolve_config(const CommandOptions& options);

/// Writes a run directory: checkpoints/stage{1,2,3}.json (rewritten every
/// epoch), train_log.jsonl, config.json, bank/part{i}.mcfr, the dataset
/// when it was synthesized, and the encoder store under encoder/.
void cmd_train(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);
/// Reads g.mcfr and l{i}.mcfr from the store directory --in and writes
/// u.mcfr, v.mcfr (when the local branch is on), z.mcfr and the manifest to --out.
void cmd_correlate(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);
/// Report JSON to --out plus a ranking TSV next to it.
void cmd_eval(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);
/// Multiply counts of the landmark affinity path for each swept count.
void cmd_bench(const PipelineConfig& config, const CommandOptions& options, std::ostream& out,
               std::ostream& log);
/// Writes the configured synthetic dataset to --out.
void cmd_synth(const PipelineConfig& config, const CommandOptions& options, std::ostream& log);

int exit_code_for(const std::exception& e);

/// Dispatches a subcommand and maps errors to exit codes, reporting them on `err`.
int run(const std::string& command, const CommandOptions& options, std::ostream& out, std::ostream& err);

/// Encoder store layout inside a directory.
std::string global_store(const std::string& dir);
std::string part_store(const std::string& dir, std::size_t part);

}  // namespace corrreid::pipeline
