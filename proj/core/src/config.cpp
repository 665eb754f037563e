#include "corrreid/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace corrreid {

using nlohmann::json;

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::add: return "add";
    case FusionMode::concat: return "concat";
    case FusionMode::mca: return "mca";
  }
  return "mca";
}

FusionMode fusion_mode_from_string(const std::string& text) {
  if (text == "add") return FusionMode::add;
  if (text == "concat") return FusionMode::concat;
  if (text == "mca") return FusionMode::mca;
  throw ConfigError("unknown fusion mode \"" + text + "\" (expected add, concat or mca)");
}

namespace {

// Walks one JSON object, remembering which keys were read so leftovers can
// be reported.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(where() + " must be an object");
  }

  ~Section() = default;

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!node_.contains(key)) return;
    const json& v = node_[key];
    const std::string field = child(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field + " must be a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field + " must be an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) {
          out = v.get<T>();
        } else {
          throw ConfigError(field + " must be non-negative");
        }
      } else {
        out = v.get<T>();
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field + " must be a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(field + " must be a string");
      out = v.get<std::string>();
    }
  }

  template <typename Fn>
  void nested(const char* key, Fn&& fn) {
    seen_.insert(key);
    if (!node_.contains(key)) return;
    Section sub(node_[key], child(key));
    fn(sub);
    sub.finish();
  }

  template <typename Fn>
  void read_string(const char* key, Fn&& convert) {
    std::string text;
    bool present = node_.contains(key);
    read(key, text);
    if (!present) return;
    try {
      convert(text);
    } catch (const ConfigError& e) {
      throw ConfigError(child(key) + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [key, _] : node_.items())
      if (!seen_.contains(key)) throw ConfigError(child(key.c_str()) + ": unknown key");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void PipelineConfig::reseed(std::uint64_t s) {
  seed = splitmix(s);
  encoder.seed = splitmix(s ^ 0x01);
  gcm.seed = splitmix(s ^ 0x02);
  data.synthetic.seed = splitmix(s ^ 0x03);
}

void PipelineConfig::validate() const {
  try {
    encoder.validate();
  } catch (const Error& e) {
    throw ConfigError(std::string("encoder: ") + e.what());
  }
  const std::size_t d = encoder.embed_dim;
  if (gcm.landmarks == 0) throw ConfigError("gcm.landmarks must be at least 1");
  if (gcm.landmarks > d) {
    throw ConfigError("gcm.landmarks (" + std::to_string(gcm.landmarks) + ") exceeds encoder.embed_dim (" +
                      std::to_string(d) + ")");
  }
  if (gcm.mask_k == 0) throw ConfigError("gcm.mask_k must be at least 1");
  if (lcm.k == 0) throw ConfigError("lcm.k must be at least 1");
  if (!(lcm.temperature > 0.0)) throw ConfigError("lcm.temperature must be positive");
  if (!(lcm.momentum >= 0.0 && lcm.momentum <= 1.0)) throw ConfigError("lcm.momentum must lie in [0, 1]");
  if (fusion.ratio == 0 || d % fusion.ratio != 0) {
    throw ConfigError("fusion.ratio must divide encoder.embed_dim");
  }
  if (training.epochs_per_stage == 0) throw ConfigError("training.epochs_per_stage must be at least 1");
  if (!(training.base_lr > 0.0)) throw ConfigError("training.base_lr must be positive");
  if (!(training.lr_floor >= 0.0 && training.lr_floor <= training.base_lr)) {
    throw ConfigError("training.lr_floor must lie in [0, base_lr]");
  }
  if (!(training.weight_decay >= 0.0)) throw ConfigError("training.weight_decay must be >= 0");
  if (!(training.momentum >= 0.0 && training.momentum < 1.0)) {
    throw ConfigError("training.momentum must lie in [0, 1)");
  }
  if (training.stage1_batch == 0) throw ConfigError("training.stage1_batch must be at least 1");
  if (training.stage3_batch == 0) throw ConfigError("training.stage3_batch must be at least 1");
  if (data.manifest.empty()) {
    try {
      data.synthetic.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("data.") + e.what());
    }
    const auto& s = data.synthetic;
    if (s.height != encoder.image_height || s.width != encoder.image_width || s.channels != encoder.channels) {
      throw ConfigError("data.synthetic image shape must match encoder.image_height/width/channels");
    }
  }
}

PipelineConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig c;
  Section top(root, "");
  top.nested("encoder", [&](Section& s) {
    s.read("image_height", c.encoder.image_height);
    s.read("image_width", c.encoder.image_width);
    s.read("channels", c.encoder.channels);
    s.read("patch_size", c.encoder.patch_size);
    s.read("embed_dim", c.encoder.embed_dim);
    s.read("num_layers", c.encoder.num_layers);
    s.read("num_parts", c.encoder.num_parts);
    s.read("seed", c.encoder.seed);
  });
  top.nested("gcm", [&](Section& s) {
    s.read("landmarks", c.gcm.landmarks);
    s.read("mask_k", c.gcm.mask_k);
    s.read_string("affinity_sign", [&](const std::string& t) {
      try {
        c.gcm.sign = gcm::affinity_sign_from_string(t);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    });
    s.read("seed", c.gcm.seed);
  });
  top.nested("lcm", [&](Section& s) {
    s.read("k", c.lcm.k);
    s.read("temperature", c.lcm.temperature);
    s.read("momentum", c.lcm.momentum);
    s.read("include_self", c.lcm.include_self);
    s.read("mine_every_step", c.lcm.mine_every_step);
  });
  top.nested("fusion", [&](Section& s) {
    s.read("ratio", c.fusion.ratio);
    s.read_string("sigmoid_scope", [&](const std::string& t) {
      try {
        c.fusion.scope = fusion::sigmoid_scope_from_string(t);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    });
  });
  top.nested("training", [&](Section& s) {
    s.read("epochs_per_stage", c.training.epochs_per_stage);
    s.read("base_lr", c.training.base_lr);
    s.read("warmup_epochs", c.training.warmup_epochs);
    s.read("weight_decay", c.training.weight_decay);
    s.read("lr_floor", c.training.lr_floor);
    s.read("momentum", c.training.momentum);
    s.read("stage1_batch", c.training.stage1_batch);
    s.read("stage2_batch", c.training.stage2_batch);
    s.read("stage3_batch", c.training.stage3_batch);
    s.read("unfreeze_encoder", c.training.unfreeze_encoder);
  });
  top.nested("ablation", [&](Section& s) {
    s.read("use_gcm", c.ablation.use_gcm);
    s.read("use_lcm", c.ablation.use_lcm);
    s.read_string("fusion", [&](const std::string& t) { c.ablation.fusion = fusion_mode_from_string(t); });
  });
  top.nested("data", [&](Section& s) {
    s.read("manifest", c.data.manifest);
    s.nested("synthetic", [&](Section& y) {
      auto& sy = c.data.synthetic;
      y.read("num_ids", sy.num_ids);
      y.read("per_id", sy.per_id);
      y.read("height", sy.height);
      y.read("width", sy.width);
      y.read("channels", sy.channels);
      y.read("viewpoint_noise", sy.viewpoint_noise);
      y.read("part_dropout", sy.part_dropout);
      y.read("seed", sy.seed);
    });
  });
  top.read("seed", c.seed);
  top.finish();
  // Stripe geometry follows the encoder.
  c.data.synthetic.num_parts = c.encoder.num_parts;
  c.data.synthetic.patch_size = c.encoder.patch_size;
  c.validate();
  return c;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_to_json(const PipelineConfig& c) {
  json j;
  j["encoder"] = {{"image_height", c.encoder.image_height}, {"image_width", c.encoder.image_width},
                  {"channels", c.encoder.channels},         {"patch_size", c.encoder.patch_size},
                  {"embed_dim", c.encoder.embed_dim},       {"num_layers", c.encoder.num_layers},
                  {"num_parts", c.encoder.num_parts},       {"seed", c.encoder.seed}};
  j["gcm"] = {{"landmarks", c.gcm.landmarks},
              {"mask_k", c.gcm.mask_k},
              {"affinity_sign", gcm::to_string(c.gcm.sign)},
              {"seed", c.gcm.seed}};
  j["lcm"] = {{"k", c.lcm.k},
              {"temperature", c.lcm.temperature},
              {"momentum", c.lcm.momentum},
              {"include_self", c.lcm.include_self},
              {"mine_every_step", c.lcm.mine_every_step}};
  j["fusion"] = {{"ratio", c.fusion.ratio}, {"sigmoid_scope", fusion::to_string(c.fusion.scope)}};
  const auto& t = c.training;
  j["training"] = {{"epochs_per_stage", t.epochs_per_stage},
                   {"base_lr", t.base_lr},
                   {"warmup_epochs", t.warmup_epochs},
                   {"weight_decay", t.weight_decay},
                   {"lr_floor", t.lr_floor},
                   {"momentum", t.momentum},
                   {"stage1_batch", t.stage1_batch},
                   {"stage2_batch", t.stage2_batch},
                   {"stage3_batch", t.stage3_batch},
                   {"unfreeze_encoder", t.unfreeze_encoder}};
  j["ablation"] = {{"use_gcm", c.ablation.use_gcm},
                   {"use_lcm", c.ablation.use_lcm},
                   {"fusion", to_string(c.ablation.fusion)}};
  const auto& s = c.data.synthetic;
  j["data"] = {{"manifest", c.data.manifest},
               {"synthetic",
                {{"num_ids", s.num_ids},
                 {"per_id", s.per_id},
                 {"height", s.height},
                 {"width", s.width},
                 {"channels", s.channels},
                 {"viewpoint_noise", s.viewpoint_noise},
                 {"part_dropout", s.part_dropout},
                 {"seed", s.seed}}}};
  j["seed"] = c.seed;
  return j.dump(2);
}

std::string config_fingerprint(const PipelineConfig& config) {
  const std::string text = config_to_json(config);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

double learning_rate(const TrainingSettings& t, std::size_t epoch) {
  if (epoch == 0) throw ConfigError("epochs are numbered from 1");
  const std::size_t total = t.epochs_per_stage;
  if (epoch <= t.warmup_epochs) return t.base_lr * double(epoch) / double(t.warmup_epochs);
  if (total <= t.warmup_epochs) return t.base_lr;
  const double progress = double(epoch - t.warmup_epochs) / double(total - t.warmup_epochs);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
  return t.lr_floor + (t.base_lr - t.lr_floor) * cosine;
}

}  // namespace corrreid
