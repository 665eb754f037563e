#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "corrreid/config.hpp"
#include "corrreid/data.hpp"
#include "corrreid/encoder.hpp"
#include "corrreid/fusion.hpp"
#include "corrreid/gcm.hpp"
#include "corrreid/lcm.hpp"

namespace corrreid::training {

/// Linear identity classifier used as the training signal of each stage.
struct Classifier {
  Matrix weight;  // d x C
  Matrix bias;    // 1 x C

  static Classifier init(std::size_t dim, std::size_t classes, std::uint64_t seed);
  std::size_t dim() const { return weight.rows(); }
  std::size_t classes() const { return weight.cols(); }
};

struct CrossEntropy {
  double loss = 0.0;  // mean over rows
  double accuracy = 0.0;
  Matrix d_features;
  Matrix d_weight;
  Matrix d_bias;
};

/// Softmax cross-entropy of `features * weight + bias` against dense labels
/// in [0, classes).
CrossEntropy cross_entropy(const Matrix& features, std::span<const int> labels,
                           const Classifier& head);

/// SGD with heavy-ball momentum and L2 weight decay. Velocity is kept per
/// parameter name.
class Sgd {
 public:
  Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const std::string& name, Matrix& param, const Matrix& grad, double lr);

 private:
  double momentum_;
  double weight_decay_;
  std::map<std::string, Matrix> velocity_;
};

struct Model {
  encoder::EncoderParams encoder;
  gcm::GcmParams gcm;
  Matrix reduce;  // (P*d) x d
  fusion::McaParams mca;
  lcm::MemoryBank bank;
  Classifier head_g, head_u, head_v, head_z;
  std::size_t stage = 0;  // last completed stage
};

struct TrainData {
  std::vector<Image> images;
  std::vector<int> labels;           // dense, 0..classes-1
  std::vector<int> original_labels;  // as in the manifest
  std::vector<std::string> item_ids;
  std::size_t classes = 0;
};

/// Training split of the dataset with labels remapped to 0..C-1.
TrainData make_train_data(const data::Dataset& dataset);

Model init_model(const PipelineConfig& config, std::size_t classes);

struct EpochRecord {
  std::size_t stage = 0;
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
  std::map<std::string, double> extra;
};

using EpochCallback = std::function<void(const EpochRecord&, const Model&)>;

/// Encoder and head_g, identity cross-entropy on g.
void train_stage1(Model& model, const PipelineConfig& config, const TrainData& data,
                  const EpochCallback& on_epoch = {});
/// GCM projections and head_u by cross-entropy on u; memory bank, clustering
/// loss on the part features, and the reduction with head_v by cross-entropy
/// on v. Modules disabled in the ablation are skipped.
void train_stage2(Model& model, const PipelineConfig& config, const TrainData& data,
                  const EpochCallback& on_epoch = {});
/// MCA gate and head_z by cross-entropy on z with u and v held fixed.
void train_stage3(Model& model, const PipelineConfig& config, const TrainData& data,
                  const EpochCallback& on_epoch = {});
Model train_all(const PipelineConfig& config, const TrainData& data, const EpochCallback& on_epoch = {});

struct Representations {
  FeatureMatrix u;
  std::optional<FeatureMatrix> v;
  FeatureMatrix z;
};

/// u = GCM(g) or g; v = fuse_local(l, R) or absent; z per the fusion mode.
Representations compose(const Model& model, const AblationSettings& ablation, const FeatureMatrix& g,
                        const LocalFeatures& local);

/// JSON of every learned block except the memory bank.
std::string model_to_json(const Model& model);
/// Restores blocks into a model initialized from `config`. Raises StateError
/// on missing or mis-shaped blocks.
Model model_from_json(const std::string& text, const PipelineConfig& config);

}  // namespace corrreid::training
