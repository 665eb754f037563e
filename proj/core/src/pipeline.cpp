#include "corrreid/pipeline.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "corrreid/eval.hpp"
#include "corrreid/store.hpp"
#include "corrreid/training.hpp"
#include "json_format.hpp"

namespace corrreid::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

std::string global_store(const std::string& dir) { return (fs::path(dir) / "g.mcfr").string(); }
std::string part_store(const std::string& dir, std::size_t part) {
  return (fs::path(dir) / ("l" + std::to_string(part) + ".mcfr")).string();
}

namespace {

constexpr const char* kManifestName = "manifest.jsonl";

class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw StateError("checkpoint directory is locked by another run: " + path_.string());
    std::fclose(f);
  }
  ~DirectoryLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void require_out(const CommandOptions& options, const char* command) {
  if (options.out.empty()) throw ConfigError(std::string(command) + " requires --out");
}

void require_in(const CommandOptions& options, const char* command) {
  if (options.in.empty()) throw ConfigError(std::string(command) + " requires --in");
}

// Manifest copy without pixel references; stores only need ids, labels and splits.
data::Manifest metadata_only(data::Manifest m) {
  for (auto& r : m.records) {
    r.path.reset();
    r.image.reset();
  }
  return m;
}

std::map<std::string, std::uint64_t> seed_map(const PipelineConfig& c) {
  return {{"data", c.data.synthetic.seed}, {"encoder", c.encoder.seed}, {"gcm", c.gcm.seed}, {"pipeline", c.seed}};
}

std::vector<int> labels_of(const data::Manifest& m) {
  std::vector<int> out;
  for (const auto& r : m.records) out.push_back(r.label);
  return out;
}

std::vector<std::string> ids_of(const data::Manifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records) out.push_back(r.item_id);
  return out;
}

data::Manifest read_store_manifest(const fs::path& dir, const PipelineConfig& config) {
  if (fs::exists(dir / kManifestName)) {
    std::ifstream in(dir / kManifestName);
    return data::parse_manifest(in);
  }
  if (!config.data.manifest.empty()) return data::load_manifest(config.data.manifest);
  throw DataError("no manifest next to the store in " + dir.string() + " and none configured");
}

}  // namespace

PipelineConfig resolve_config(const CommandOptions& options) {
  PipelineConfig config = options.config_path.empty() ? PipelineConfig{} : load_config(options.config_path);
  if (options.seed) config.reseed(*options.seed);
  config.validate();
  return config;
}

void cmd_train(const PipelineConfig& config, const CommandOptions& options, std::ostream& log) {
  require_out(options, "train");
  const fs::path run(options.out);
  fs::create_directories(run / "checkpoints");
  DirectoryLock lock(run / "checkpoints");

  data::Dataset dataset;
  const std::string manifest = !options.in.empty() ? options.in : config.data.manifest;
  if (!manifest.empty()) {
    dataset = data::read_dataset(manifest);
  } else {
    dataset = data::synth_dataset(config.data.synthetic);
    data::write_dataset(dataset, (run / "data").string());
  }
  for (const auto& img : dataset.images) {
    if (img.height != config.encoder.image_height || img.width != config.encoder.image_width ||
        img.channels != config.encoder.channels) {
      throw DataError("image shape " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                      std::to_string(img.channels) + " does not match the encoder config");
    }
  }
  const auto train = training::make_train_data(dataset);
  write_text(run / "config.json", config_to_json(config) + "\n");

  std::ofstream train_log(run / "train_log.jsonl", std::ios::trunc);
  if (!train_log) throw IoError("cannot write " + (run / "train_log.jsonl").string());
  {
    json meta{{"event", "start"},
              {"config_fingerprint", config_fingerprint(config)},
              {"stage1_loss", "identity_cross_entropy"},
              {"optimizer", "sgd_momentum"},
              {"train_items", train.images.size()},
              {"classes", train.classes}};
    train_log << meta.dump() << '\n';
  }
  const auto on_epoch = [&](const training::EpochRecord& rec, const training::Model& model) {
    json line{{"event", "epoch"}, {"stage", rec.stage}, {"epoch", rec.epoch}, {"lr", rec.lr},
              {"loss", rec.loss}, {"accuracy", rec.accuracy}};
    for (const auto& [k, v] : rec.extra) line[k] = v;
    train_log << line.dump() << '\n';
    train_log.flush();
    write_text(run / "checkpoints" / ("stage" + std::to_string(rec.stage) + ".json"), training::model_to_json(model));
    log << "stage " << rec.stage << " epoch " << rec.epoch << " loss " << rec.loss << '\n';
  };
  const auto model = training::train_all(config, train, on_epoch);

  if (!model.bank.parts.empty()) {
    fs::create_directories(run / "bank");
    for (std::size_t p = 0; p < model.bank.num_parts(); ++p)
      data::store_write((run / "bank" / ("part" + std::to_string(p) + ".mcfr")).string(), model.bank.parts[p],
                        train.item_ids, train.original_labels, data::DType::f64);
  }

  const auto enc = encoder::encode(dataset.images, model.encoder);
  const fs::path store = run / "encoder";
  fs::create_directories(store);
  const auto ids = ids_of(dataset.manifest);
  const auto labels = labels_of(dataset.manifest);
  data::store_write(global_store(store.string()), enc.global, ids, labels);
  for (std::size_t p = 0; p < enc.local.num_parts(); ++p)
    data::store_write(part_store(store.string(), p), enc.local.parts[p], ids, labels);
  data::write_manifest(metadata_only(dataset.manifest), (store / kManifestName).string());
  train_log << json{{"event", "done"}, {"items_encoded", ids.size()}}.dump() << '\n';
}

void cmd_correlate(const PipelineConfig& config, const CommandOptions& options, std::ostream& log) {
  require_in(options, "correlate");
  require_out(options, "correlate");
  const fs::path in(options.in);
  const fs::path checkpoint = in.parent_path() / "checkpoints" / "stage3.json";
  if (!fs::exists(checkpoint)) throw StateError("missing checkpoint " + checkpoint.string() + " (run train first)");
  const auto model = training::model_from_json(read_text(checkpoint), config);
  if (model.stage < 3) throw StateError("checkpoint " + checkpoint.string() + " is from an unfinished run");

  const auto g = data::store_read(global_store(in.string()));
  LocalFeatures local;
  for (std::size_t p = 0; p < config.encoder.num_parts; ++p) {
    auto part = data::store_read(part_store(in.string(), p));
    if (part.item_ids != g.item_ids) throw DataError("part store " + std::to_string(p) + " rows differ from g");
    local.parts.push_back(std::move(part.values));
  }
  if (g.values.cols() != config.encoder.embed_dim) {
    throw DataError("store width " + std::to_string(g.values.cols()) + " does not match encoder.embed_dim");
  }
  const auto rep = training::compose(model, config.ablation, g.values, local);

  const fs::path out(options.out);
  fs::create_directories(out);
  data::store_write((out / "u.mcfr").string(), rep.u, g.item_ids, g.labels);
  if (rep.v) data::store_write((out / "v.mcfr").string(), *rep.v, g.item_ids, g.labels);
  data::store_write((out / "z.mcfr").string(), rep.z, g.item_ids, g.labels);
  if (fs::exists(in / kManifestName)) {
    fs::copy_file(in / kManifestName, out / kManifestName, fs::copy_options::overwrite_existing);
  }
  log << "correlated " << g.values.rows() << " items (gcm " << (config.ablation.use_gcm ? "on" : "off") << ", lcm "
      << (config.ablation.use_lcm ? "on" : "off") << ", fusion " << to_string(config.ablation.fusion) << ")\n";
}

void cmd_eval(const PipelineConfig& config, const CommandOptions& options, std::ostream& log) {
  require_in(options, "eval");
  fs::path store_path(options.in), dir(options.in);
  if (fs::is_directory(store_path)) {
    store_path = fs::exists(dir / "z.mcfr") ? dir / "z.mcfr" : dir / "g.mcfr";
  } else {
    dir = store_path.parent_path();
  }
  const auto store = data::store_read(store_path.string());
  const auto manifest = read_store_manifest(dir, config);
  if (manifest.size() != store.values.rows()) {
    throw DataError("store has " + std::to_string(store.values.rows()) + " rows but the manifest lists " +
                    std::to_string(manifest.size()) + " items");
  }
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < store.item_ids.size(); ++i) row_of.emplace(store.item_ids[i], i);

  eval::RetrievalSet query, gallery;
  std::vector<std::size_t> query_rows, gallery_rows;
  bool all_cameras = true;
  for (const auto& r : manifest.records) {
    const auto it = row_of.find(r.item_id);
    if (it == row_of.end()) throw DataError("item " + r.item_id + " is not in the store");
    if (store.labels[it->second] != r.label) throw DataError("label of " + r.item_id + " differs between store and manifest");
    if (r.split == data::Split::train) continue;
    auto& set = r.split == data::Split::query ? query : gallery;
    (r.split == data::Split::query ? query_rows : gallery_rows).push_back(it->second);
    set.labels.push_back(r.label);
    set.ids.push_back(r.item_id);
    set.cameras.push_back(r.camera);
    all_cameras = all_cameras && r.camera.has_value();
  }
  if (query_rows.empty() || gallery_rows.empty()) throw DataError("manifest needs query and gallery items");
  query.features = gather_rows(store.values, query_rows);
  gallery.features = gather_rows(store.values, gallery_rows);

  eval::EvaluationOptions opts;
  opts.exclude_same_camera = all_cameras;
  auto evaluation = eval::evaluate(std::move(query), std::move(gallery), opts);
  evaluation.report.config_fingerprint = config_fingerprint(config);
  evaluation.report.seeds = seed_map(config);

  const fs::path out = options.out.empty() ? dir / "report.json" : fs::path(options.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  eval::emit_report(evaluation.report, out.string());
  fs::path table = out;
  table.replace_extension(".ranking.tsv");
  eval::write_ranking_table(evaluation, 10, table.string());
  log << "mAP " << evaluation.report.map_score << " over " << evaluation.report.num_queries << " queries\n";
}

void cmd_bench(const PipelineConfig& config, const CommandOptions& options, std::ostream& out, std::ostream& log) {
  require_in(options, "bench");
  fs::path path(options.in);
  if (fs::is_directory(path)) path = global_store(path.string());
  const auto store = data::store_read(path.string());
  FeatureMatrix g = store.values;
  l2_normalize_rows(g);
  const std::size_t n = g.rows(), d = g.cols();

  json records = json::array();
  std::uint64_t previous = 0;
  for (const std::size_t l : options.sweep) {
    if (l == 0 || l > std::min(n, d)) {
      log << "warning: skipping landmarks=" << l << " (must lie in [1, " << std::min(n, d) << "])\n";
      continue;
    }
    auto params = gcm::GcmParams::identity(d);
    params.landmarks = l;
    params.mask_k = config.gcm.mask_k;
    params.sign = config.gcm.sign;
    params.seed = config.gcm.seed;
    const auto result = gcm::gcm_forward(g, params);
    const auto& cost = result.diagnostics.cost;
    if (!records.empty() && cost.affinity_multiplies <= previous) {
      throw StateError("affinity multiply count is not increasing at landmarks=" + std::to_string(l));
    }
    previous = cost.affinity_multiplies;
    const auto analytic = gcm::analytic_landmark_multiplies(n, d, l);
    json rec{{"landmarks", l},
             {"affinity_multiplies", cost.affinity_multiplies},
             {"projection_multiplies", cost.projection_multiplies},
             {"total_multiplies", cost.total()},
             {"analytic_multiplies", analytic},
             {"dense_affinity_multiplies", gcm::analytic_dense_multiplies(n, d)},
             {"relative_error", std::abs(double(cost.affinity_multiplies) - double(analytic)) / double(analytic)},
             {"mask_density", result.diagnostics.mask_density}};
    if (!store.labels.empty()) rec["leave_one_out_map"] = eval::leave_one_out_map(result.u, store.labels);
    records.push_back(std::move(rec));
  }
  json doc{{"n", n},
           {"dim", d},
           {"mask_k", std::min(config.gcm.mask_k, n)},
           {"affinity_sign", gcm::to_string(config.gcm.sign)},
           {"records", records}};
  const std::string text = detail::dump_fixed(doc) + "\n";
  if (options.out.empty()) {
    out << text;
  } else {
    write_text(options.out, text);
  }
}

void cmd_synth(const PipelineConfig& config, const CommandOptions& options, std::ostream& log) {
  require_out(options, "synth");
  const auto dataset = data::synth_dataset(config.data.synthetic);
  data::write_dataset(dataset, options.out);
  log << "wrote " << dataset.images.size() << " items to " << options.out << '\n';
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kConfig;
  if (dynamic_cast<const StateError*>(&e)) return kState;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const IoError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e) || dynamic_cast<const DegenerateRowError*>(&e)) {
    return kData;
  }
  if (dynamic_cast<const fs::filesystem_error*>(&e)) return kData;
  return kFailure;
}

int run(const std::string& command, const CommandOptions& options, std::ostream& out, std::ostream& err) {
  try {
    const auto config = resolve_config(options);
    if (command == "train") {
      cmd_train(config, options, err);
    } else if (command == "correlate") {
      cmd_correlate(config, options, err);
    } else if (command == "eval") {
      cmd_eval(config, options, err);
    } else if (command == "bench") {
      cmd_bench(config, options, out, err);
    } else if (command == "synth") {
      cmd_synth(config, options, err);
    } else {
      throw ConfigError("unknown command " + command);
    }
    return kOk;
  } catch (const std::exception& e) {
    const int code = exit_code_for(e);
    err << "error: " << e.what() << '\n';
    return code;
  }
}

}  // namespace corrreid::pipeline
