#include "corrreid/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

namespace corrreid::training {

using nlohmann::json;

Classifier Classifier::init(std::size_t dim, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  Classifier c;
  c.weight = Matrix::random_normal(dim, classes, 1.0 / std::sqrt(double(dim)), rng);
  c.bias = Matrix(1, classes);
  return c;
}

CrossEntropy cross_entropy(const Matrix& features, std::span<const int> labels, const Classifier& head) {
  const std::size_t n = features.rows(), classes = head.classes();
  if (labels.size() != n) throw ShapeError("cross_entropy: label count does not match rows");
  if (features.cols() != head.dim()) {
    throw ShapeError("cross_entropy: features " + shape_string(features) + " vs head " +
                     shape_string(head.weight));
  }
  Matrix logits = matmul(features, head.weight);
  CrossEntropy out;
  Matrix d_logits(n, classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.row(i);
    for (std::size_t c = 0; c < classes; ++c) row[c] += head.bias(0, c);
    const int y = labels[i];
    if (y < 0 || std::size_t(y) >= classes) throw DataError("cross_entropy: label out of range");
    const auto p = stable_softmax_row(row);
    out.loss -= std::log(std::max(p[std::size_t(y)], 1e-300));
    if (std::size_t(std::max_element(row.begin(), row.end()) - row.begin()) == std::size_t(y)) ++correct;
    for (std::size_t c = 0; c < classes; ++c)
      d_logits(i, c) = (p[c] - (c == std::size_t(y) ? 1.0 : 0.0)) / double(n);
  }
  out.loss /= double(n);
  out.accuracy = double(correct) / double(n);
  out.d_weight = matmul_at(features, d_logits);
  out.d_bias = Matrix(1, classes);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < classes; ++c) out.d_bias(0, c) += d_logits(i, c);
  out.d_features = matmul_bt(d_logits, head.weight);
  return out;
}

void Sgd::step(const std::string& name, Matrix& param, const Matrix& grad, double lr) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    throw ShapeError("Sgd::step " + name + ": param " + shape_string(param) + " vs grad " + shape_string(grad));
  }
  auto [it, inserted] = velocity_.try_emplace(name, param.rows(), param.cols());
  auto v = it->second.values();
  auto p = param.values();
  const auto g = grad.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    v[i] = momentum_ * v[i] + g[i] + weight_decay_ * p[i];
    p[i] -= lr * v[i];
  }
}

TrainData make_train_data(const data::Dataset& dataset) {
  TrainData out;
  std::map<int, int> dense;
  for (const std::size_t i : dataset.manifest.indices(data::Split::train)) dense.emplace(dataset.manifest.records[i].label, 0);
  if (dense.size() < 2) throw DataError("training split needs at least two identities");
  int next = 0;
  for (auto& [label, id] : dense) id = next++;
  for (const std::size_t i : dataset.manifest.indices(data::Split::train)) {
    const auto& r = dataset.manifest.records[i];
    out.images.push_back(dataset.images.at(i));
    out.labels.push_back(dense[r.label]);
    out.original_labels.push_back(r.label);
    out.item_ids.push_back(r.item_id);
  }
  out.classes = dense.size();
  return out;
}

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t x = seed ^ (tag * 0x9e3779b97f4a7c15ULL);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t fused_dim(const PipelineConfig& config) {
  const std::size_t d = config.encoder.embed_dim;
  return config.ablation.use_lcm && config.ablation.fusion == FusionMode::concat ? 2 * d : d;
}

std::vector<std::pair<std::string, Matrix*>> encoder_blocks(encoder::EncoderParams& p) {
  std::vector<std::pair<std::string, Matrix*>> out;
  encoder::for_each_param(p, [&](std::string_view name, Matrix& m) { out.emplace_back(std::string(name), &m); });
  return out;
}

// Parts-only updates touch the part tokens and their positional rows; these
// do not reach the class token.
void step_encoder(Sgd& opt, encoder::EncoderParams& params, encoder::EncoderParams& grads, double lr,
                  bool parts_only) {
  auto p = encoder_blocks(params);
  auto g = encoder_blocks(grads);
  const std::size_t parts = params.config.num_parts;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& name = p[i].first;
    if (!parts_only) {
      opt.step("encoder." + name, *p[i].second, *g[i].second, lr);
    } else if (name == "part_tokens") {
      opt.step("encoder." + name, *p[i].second, *g[i].second, lr);
    } else if (name == "pos_embed") {
      Matrix rows(parts, params.config.embed_dim), grad_rows(parts, params.config.embed_dim);
      for (std::size_t r = 0; r < parts; ++r) {
        std::ranges::copy(p[i].second->row(1 + r), rows.row(r).begin());
        std::ranges::copy(g[i].second->row(1 + r), grad_rows.row(r).begin());
      }
      opt.step("encoder.pos_embed.parts", rows, grad_rows, lr);
      for (std::size_t r = 0; r < parts; ++r) std::ranges::copy(rows.row(r), p[i].second->row(1 + r).begin());
    }
  }
}

void step_head(Sgd& opt, const std::string& name, Classifier& head, const CrossEntropy& ce, double lr) {
  opt.step(name + ".weight", head.weight, ce.d_weight, lr);
  opt.step(name + ".bias", head.bias, ce.d_bias, lr);
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch, Rng* rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (rng) std::shuffle(order.begin(), order.end(), *rng);
  if (batch == 0 || batch > n) batch = n;
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + std::ptrdiff_t(b), order.begin() + std::ptrdiff_t(std::min(n, b + batch)));
  return out;
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (const std::size_t i : idx) out.push_back(v[i]);
  return out;
}

LocalFeatures gather_local(const LocalFeatures& local, std::span<const std::size_t> idx) {
  LocalFeatures out;
  for (const auto& part : local.parts) out.parts.push_back(gather_rows(part, idx));
  return out;
}

void check_finite(double loss, std::size_t stage, std::size_t epoch) {
  if (!std::isfinite(loss)) {
    throw StateError("training diverged: non-finite loss at stage " + std::to_string(stage) + " epoch " +
                     std::to_string(epoch));
  }
}

// Non-finite parameters surface as degenerate softmax rows before the loss is seen.
template <class Body>
void guarded(std::size_t stage, std::size_t epoch, Body&& body) {
  try {
    body();
  } catch (const DegenerateRowError&) {
    throw StateError("training diverged: non-finite values at stage " + std::to_string(stage) + " epoch " +
                     std::to_string(epoch));
  }
}

FeatureMatrix fuse_features(const Model& model, FusionMode mode, const FeatureMatrix& u, const FeatureMatrix& v) {
  switch (mode) {
    case FusionMode::add: {
      FeatureMatrix z = u;
      add_scaled(z, v);
      scale_inplace(z, 0.5);
      return z;
    }
    case FusionMode::concat: {
      FeatureMatrix z(u.rows(), u.cols() + v.cols());
      for (std::size_t i = 0; i < u.rows(); ++i) {
        std::ranges::copy(u.row(i), z.row(i).begin());
        std::ranges::copy(v.row(i), z.row(i).begin() + std::ptrdiff_t(u.cols()));
      }
      return z;
    }
    case FusionMode::mca: return fusion::fuse_rows(u, v, model.mca);
  }
  return u;
}

}  // namespace

Model init_model(const PipelineConfig& config, std::size_t classes) {
  config.validate();
  const std::size_t d = config.encoder.embed_dim, parts = config.encoder.num_parts;
  Model m;
  m.encoder = encoder::EncoderParams::init(config.encoder);
  m.gcm = gcm::GcmParams::identity(d);
  m.gcm.landmarks = config.gcm.landmarks;
  m.gcm.mask_k = config.gcm.mask_k;
  m.gcm.sign = config.gcm.sign;
  m.gcm.seed = config.gcm.seed;
  // Starts as the normalized mean of the parts.
  m.reduce = Matrix(parts * d, d);
  for (std::size_t p = 0; p < parts; ++p)
    for (std::size_t c = 0; c < d; ++c) m.reduce(p * d + c, c) = 1.0 / double(parts);
  m.mca = fusion::McaParams::init(d, config.fusion.ratio, config.fusion.scope, mix(config.seed, 11));
  m.bank.momentum = config.lcm.momentum;
  m.head_g = Classifier::init(d, classes, mix(config.seed, 1));
  m.head_u = Classifier::init(d, classes, mix(config.seed, 2));
  m.head_v = Classifier::init(d, classes, mix(config.seed, 3));
  m.head_z = Classifier::init(fused_dim(config), classes, mix(config.seed, 4));
  return m;
}

void train_stage1(Model& model, const PipelineConfig& config, const TrainData& data, const EpochCallback& on_epoch) {
  const auto& t = config.training;
  Sgd opt(t.momentum, t.weight_decay);
  Rng rng(mix(config.seed, 101));
  for (std::size_t epoch = 1; epoch <= t.epochs_per_stage; ++epoch) {
    const double lr = learning_rate(t, epoch);
    double loss = 0.0, acc = 0.0;
    guarded(1, epoch, [&] {
      for (const auto& batch : make_batches(data.images.size(), t.stage1_batch, &rng)) {
        const auto images = gather(data.images, batch);
        const auto labels = gather(data.labels, batch);
        const auto enc = encoder::encode(images, model.encoder);
        const auto ce = cross_entropy(enc.global, labels, model.head_g);
        check_finite(ce.loss, 1, epoch);
        auto grads = encoder::encode_backward(images, model.encoder, ce.d_features, LocalFeatures{});
        step_encoder(opt, model.encoder, grads, lr, false);
        step_head(opt, "head_g", model.head_g, ce, lr);
        loss += ce.loss * double(batch.size());
        acc += ce.accuracy * double(batch.size());
      }
    });
    const double n = double(data.images.size());
    model.stage = 1;
    if (on_epoch) on_epoch({1, epoch, lr, loss / n, acc / n, {}}, model);
  }
}

void train_stage2(Model& model, const PipelineConfig& config, const TrainData& data, const EpochCallback& on_epoch) {
  const auto& t = config.training;
  const auto& ab = config.ablation;
  const bool parts_only = !t.unfreeze_encoder;
  Sgd opt(t.momentum, t.weight_decay);
  Rng rng(mix(config.seed, 202));
  const std::size_t n = data.images.size();
  std::uint64_t step_index = 0;
  for (std::size_t epoch = 1; epoch <= t.epochs_per_stage; ++epoch) {
    const double lr = learning_rate(t, epoch);
    EpochRecord rec{2, epoch, lr, 0.0, 0.0, {}};
    double ce_u = 0.0, ce_v = 0.0, cluster = 0.0, acc = 0.0, pos_sim = 0.0;

    guarded(2, epoch, [&] {
      auto enc = encoder::encode(data.images, model.encoder);
      std::vector<lcm::PositiveSet> positives;
      if (ab.use_lcm) {
        model.bank = lcm::bank_update(std::move(model.bank), enc.local, epoch - 1);
        if (!config.lcm.mine_every_step) positives = lcm::mine_all(enc.local, model.bank, config.lcm.k, config.lcm.include_self);
      }

      for (const auto& batch : make_batches(n, t.stage2_batch, t.stage2_batch == 0 ? nullptr : &rng)) {
        const auto images = gather(data.images, batch);
        const auto labels = gather(data.labels, batch);
        const double w = double(batch.size()) / double(n);
        Matrix d_global;
        LocalFeatures d_local;
        if (ab.use_gcm) {
          const Matrix g = gather_rows(enc.global, batch);
          auto params = model.gcm;
          params.seed = mix(model.gcm.seed, ++step_index);
          const auto res = gcm::gcm_forward(g, params);
          const auto ce = cross_entropy(res.u, labels, model.head_u);
          check_finite(ce.loss, 2, epoch);
          const auto grads = gcm::gcm_backward(g, params, res, ce.d_features);
          opt.step("gcm.query", model.gcm.query, grads.query, lr);
          opt.step("gcm.key", model.gcm.key, grads.key, lr);
          opt.step("gcm.value", model.gcm.value, grads.value, lr);
          step_head(opt, "head_u", model.head_u, ce, lr);
          if (!parts_only) d_global = grads.features;
          ce_u += ce.loss * w;
          acc += ce.accuracy * w;
        }
        if (ab.use_lcm) {
          const LocalFeatures local = gather_local(enc.local, batch);
          std::vector<lcm::PositiveSet> sets;
          for (std::size_t p = 0; p < local.num_parts(); ++p)
            for (std::size_t j = 0; j < batch.size(); ++j) {
              lcm::PositiveSet s;
              if (config.lcm.mine_every_step || positives.empty()) {
                const std::optional<std::size_t> exclude =
                    config.lcm.include_self ? std::nullopt : std::optional<std::size_t>(batch[j]);
                s = lcm::mine_positives(local.parts[p].row(j), model.bank.parts[p], config.lcm.k, exclude);
              } else {
                s = positives[p * n + batch[j]];
              }
              s.item = j;
              s.part = p;
              sets.push_back(std::move(s));
            }
          const auto cl = lcm::clustering_loss(local, model.bank, sets, config.lcm.temperature);
          const Matrix v = lcm::fuse_local(local, model.reduce);
          const auto ce = cross_entropy(v, labels, model.head_v);
          check_finite(cl.loss + ce.loss, 2, epoch);
          const auto fb = lcm::fuse_local_backward(local, model.reduce, ce.d_features);
          opt.step("reduce", model.reduce, fb.reduce, lr);
          step_head(opt, "head_v", model.head_v, ce, lr);
          d_local = cl.gradient;
          for (std::size_t p = 0; p < d_local.num_parts(); ++p) add_scaled(d_local.parts[p], fb.local.parts[p]);
          pos_sim += lcm::mean_positive_similarity(local, model.bank, sets) * w;
          cluster += cl.loss * w;
          ce_v += ce.loss * w;
        }
        if (!d_global.empty() || !d_local.parts.empty()) {
          auto grads = encoder::encode_backward(images, model.encoder, d_global, d_local);
          step_encoder(opt, model.encoder, grads, lr, parts_only);
        }
      }
    });
    rec.loss = ce_u + ce_v + cluster;
    rec.accuracy = acc;
    if (ab.use_gcm) rec.extra["ce_u"] = ce_u;
    if (ab.use_lcm) {
      rec.extra["ce_v"] = ce_v;
      rec.extra["clustering"] = cluster;
      rec.extra["positive_similarity"] = pos_sim;
    }
    model.stage = 2;
    if (on_epoch) on_epoch(rec, model);
  }
}

void train_stage3(Model& model, const PipelineConfig& config, const TrainData& data, const EpochCallback& on_epoch) {
  const auto& t = config.training;
  const auto& ab = config.ablation;
  Sgd opt(t.momentum, t.weight_decay);
  Rng rng(mix(config.seed, 303));
  const auto enc = encoder::encode(data.images, model.encoder);
  const auto rep = compose(model, ab, enc.global, enc.local);
  const bool train_gate = ab.use_lcm && ab.fusion == FusionMode::mca;
  const std::size_t n = data.images.size();
  for (std::size_t epoch = 1; epoch <= t.epochs_per_stage; ++epoch) {
    const double lr = learning_rate(t, epoch);
    double loss = 0.0, acc = 0.0;
    guarded(3, epoch, [&] {
      for (const auto& batch : make_batches(n, t.stage3_batch, &rng)) {
        const auto labels = gather(data.labels, batch);
        const double w = double(batch.size()) / double(n);
        if (train_gate) {
          const Matrix u = gather_rows(rep.u, batch), v = gather_rows(*rep.v, batch);
          const Matrix z = fusion::fuse_rows(u, v, model.mca);
          const auto ce = cross_entropy(z, labels, model.head_z);
          check_finite(ce.loss, 3, epoch);
          const auto grads = fusion::fuse_rows_backward(u, v, model.mca, ce.d_features);
          opt.step("mca.squeeze", model.mca.squeeze, grads.squeeze, lr);
          opt.step("mca.expand", model.mca.expand, grads.expand, lr);
          step_head(opt, "head_z", model.head_z, ce, lr);
          loss += ce.loss * w;
          acc += ce.accuracy * w;
        } else {
          const auto ce = cross_entropy(gather_rows(rep.z, batch), labels, model.head_z);
          check_finite(ce.loss, 3, epoch);
          step_head(opt, "head_z", model.head_z, ce, lr);
          loss += ce.loss * w;
          acc += ce.accuracy * w;
        }
      }
    });
    model.stage = 3;
    if (on_epoch) on_epoch({3, epoch, lr, loss, acc, {}}, model);
  }
}

Model train_all(const PipelineConfig& config, const TrainData& data, const EpochCallback& on_epoch) {
  Model model = init_model(config, data.classes);
  train_stage1(model, config, data, on_epoch);
  train_stage2(model, config, data, on_epoch);
  train_stage3(model, config, data, on_epoch);
  return model;
}

Representations compose(const Model& model, const AblationSettings& ablation, const FeatureMatrix& g,
                        const LocalFeatures& local) {
  Representations r;
  r.u = ablation.use_gcm ? gcm::gcm_forward(g, model.gcm).u : g;
  if (!ablation.use_lcm) {
    r.z = r.u;
    return r;
  }
  r.v = lcm::fuse_local(local, model.reduce);
  r.z = fuse_features(model, ablation.fusion, r.u, *r.v);
  return r;
}

namespace {

json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

void matrix_from(const json& root, const std::string& key, Matrix& into) {
  const json* node = &root;
  std::size_t pos = 0;
  std::string path = key;
  while (true) {
    const auto dot = path.find('/', pos);
    const std::string part = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (!node->is_object() || !node->contains(part)) throw StateError("checkpoint is missing block " + key);
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  try {
    const auto rows = (*node).at("rows").get<std::size_t>();
    const auto cols = (*node).at("cols").get<std::size_t>();
    auto values = (*node).at("data").get<std::vector<double>>();
    if (rows != into.rows() || cols != into.cols() || values.size() != rows * cols) {
      throw StateError("checkpoint block " + key + " has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                       ", expected " + shape_string(into));
    }
    into = Matrix(rows, cols, std::move(values));
  } catch (const json::exception& e) {
    throw StateError("checkpoint block " + key + " is malformed: " + e.what());
  }
}

}  // namespace

std::string model_to_json(const Model& model) {
  json j;
  j["stage"] = model.stage;
  encoder::for_each_param(model.encoder, [&](std::string_view name, const Matrix& m) {
    j["encoder"][std::string(name)] = matrix_json(m);
  });
  j["gcm"] = {{"query", matrix_json(model.gcm.query)},
              {"key", matrix_json(model.gcm.key)},
              {"value", matrix_json(model.gcm.value)}};
  j["reduce"] = matrix_json(model.reduce);
  j["mca"] = {{"squeeze", matrix_json(model.mca.squeeze)}, {"expand", matrix_json(model.mca.expand)}};
  const auto head = [](const Classifier& c) { return json{{"weight", matrix_json(c.weight)}, {"bias", matrix_json(c.bias)}}; };
  j["heads"] = {{"g", head(model.head_g)}, {"u", head(model.head_u)}, {"v", head(model.head_v)}, {"z", head(model.head_z)}};
  return j.dump();
}

Model model_from_json(const std::string& text, const PipelineConfig& config) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw StateError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!j.contains("heads") || !j["heads"].contains("g")) throw StateError("checkpoint is missing block heads/g");
  const std::size_t classes = j["heads"]["g"].value("bias", json::object()).value("cols", std::size_t(0));
  if (classes == 0) throw StateError("checkpoint is missing block heads/g/bias");
  Model m = init_model(config, classes);
  m.stage = j.value("stage", std::size_t(0));
  encoder::for_each_param(m.encoder, [&](std::string_view name, Matrix& mat) {
    matrix_from(j, "encoder/" + std::string(name), mat);
  });
  matrix_from(j, "gcm/query", m.gcm.query);
  matrix_from(j, "gcm/key", m.gcm.key);
  matrix_from(j, "gcm/value", m.gcm.value);
  matrix_from(j, "reduce", m.reduce);
  matrix_from(j, "mca/squeeze", m.mca.squeeze);
  matrix_from(j, "mca/expand", m.mca.expand);
  for (const auto& [key, head] : {std::pair<const char*, Classifier*>{"g", &m.head_g}, {"u", &m.head_u},
                                  {"v", &m.head_v}}) {
    matrix_from(j, std::string("heads/") + key + "/weight", head->weight);
    matrix_from(j, std::string("heads/") + key + "/bias", head->bias);
  }
  // head_z is sized by the fusion mode of the training run; a checkpoint read
  // under another mode keeps the fresh head.
  try {
    matrix_from(j, "heads/z/weight", m.head_z.weight);
    matrix_from(j, "heads/z/bias", m.head_z.bias);
  } catch (const StateError&) {
    m.head_z = Classifier::init(m.head_z.dim(), classes, 0);
  }
  return m;
}

}  // namespace corrreid::training
