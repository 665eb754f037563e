#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "corrreid/data.hpp"
#include "corrreid/encoder.hpp"
#include "corrreid/fusion.hpp"
#include "corrreid/gcm.hpp"

namespace corrreid {

struct GcmSettings {
  std::size_t landmarks = 5;
  std::size_t mask_k = 10;
  gcm::AffinitySign sign = gcm::AffinitySign::negative;
  std::uint64_t seed = 23;
};

struct LcmSettings {
  std::size_t k = 5;
  double temperature = 0.05;
  double momentum = 0.2;
  bool include_self = true;
  /// Mine positives every epoch (default) or every optimization step.
  bool mine_every_step = false;
};

struct FusionSettings {
  std::size_t ratio = 4;
  fusion::SigmoidScope scope = fusion::SigmoidScope::whole_sum;
};

struct TrainingSettings {
  std::size_t epochs_per_stage = 30;
  double base_lr = 1e-3;
  std::size_t warmup_epochs = 10;
  double weight_decay = 1e-4;
  double lr_floor = 1e-5;
  double momentum = 0.9;
  std::size_t stage1_batch = 16;
  /// 0 means the whole training set.
  std::size_t stage2_batch = 0;
  std::size_t stage3_batch = 16;
  /// Stages 2 and 3 keep the encoder fixed apart from the part-token
  /// parameters the clustering loss acts on. Set to update every block.
  bool unfreeze_encoder = false;
};

enum class FusionMode { add, concat, mca };

std::string to_string(FusionMode mode);
FusionMode fusion_mode_from_string(const std::string& text);

struct AblationSettings {
  bool use_gcm = true;
  bool use_lcm = true;
  FusionMode fusion = FusionMode::mca;
};

struct DataSettings {
  /// JSONL manifest; when empty the synthetic generator is used.
  std::string manifest;
  data::SyntheticSpec synthetic;
};

struct PipelineConfig {
  encoder::EncoderConfig encoder;
  GcmSettings gcm;
  LcmSettings lcm;
  FusionSettings fusion;
  TrainingSettings training;
  AblationSettings ablation;
  DataSettings data;
  /// Seeds the classifier heads, minibatch order and the fusion init.
  std::uint64_t seed = 7;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Replaces every seed with one derived from `seed`.
  void reseed(std::uint64_t seed);
};

/// Parses and validates; unknown keys and wrong types raise ConfigError with
/// the field path.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config(const std::string& path);
/// Canonical JSON with every field present and sorted keys.
std::string config_to_json(const PipelineConfig& config);
/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_fingerprint(const PipelineConfig& config);

/// Learning rate of a 1-based epoch: linear warmup to base_lr reaching it at
/// warmup_epochs, then cosine decay to lr_floor at the final epoch.
double learning_rate(const TrainingSettings& training, std::size_t epoch);

}  // namespace corrreid
