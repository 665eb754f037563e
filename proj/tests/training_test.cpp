#include <cmath>

#include <gtest/gtest.h>

#include "corrreid/training.hpp"
#include "test_support.hpp"

namespace corrreid::training {
namespace {

using testing::frobenius_dot;
using testing::random_local;
using testing::random_matrix;
using testing::random_unit_rows;

PipelineConfig tiny_config(std::size_t epochs = 1) {
  PipelineConfig c;
  c.encoder.image_height = 12;
  c.encoder.image_width = 16;
  c.encoder.embed_dim = 16;
  c.encoder.num_layers = 1;
  c.encoder.num_parts = 3;
  c.gcm.landmarks = 4;
  c.gcm.mask_k = 4;
  c.lcm.k = 3;
  c.training.epochs_per_stage = epochs;
  c.training.warmup_epochs = 1;
  c.training.base_lr = 0.05;
  c.data.synthetic.num_ids = 4;
  c.data.synthetic.per_id = 8;
  c.data.synthetic.height = 12;
  c.data.synthetic.width = 16;
  c.data.synthetic.viewpoint_noise = 0.3;
  c.validate();
  return c;
}

TrainData tiny_data(const PipelineConfig& c) {
  data::SyntheticSpec spec = c.data.synthetic;
  spec.num_parts = c.encoder.num_parts;
  spec.patch_size = c.encoder.patch_size;
  return make_train_data(data::synth_dataset(spec));
}

TEST(CrossEntropy, GradientsPassGradCheck) {
  const std::size_t n = 6, d = 5, classes = 4;
  const Matrix x = random_matrix(n, d, 1);
  const std::vector<int> labels{0, 1, 2, 3, 1, 0};
  Classifier head = Classifier::init(d, classes, 2);
  head.bias = random_matrix(1, classes, 3);
  const CrossEntropy ce = cross_entropy(x, labels, head);
  auto f_x = [&](std::span<const double> v) {
    return cross_entropy(Matrix(n, d, std::vector<double>(v.begin(), v.end())), labels, head).loss;
  };
  auto f_w = [&](std::span<const double> v) {
    Classifier h = head;
    h.weight = Matrix(d, classes, std::vector<double>(v.begin(), v.end()));
    return cross_entropy(x, labels, h).loss;
  };
  auto f_b = [&](std::span<const double> v) {
    Classifier h = head;
    h.bias = Matrix(1, classes, std::vector<double>(v.begin(), v.end()));
    return cross_entropy(x, labels, h).loss;
  };
  EXPECT_TRUE(grad_check(f_x, x.values(), ce.d_features.values()).pass);
  EXPECT_TRUE(grad_check(f_w, head.weight.values(), ce.d_weight.values()).pass);
  EXPECT_TRUE(grad_check(f_b, head.bias.values(), ce.d_bias.values()).pass);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  Classifier head;
  head.weight = Matrix(3, 5);
  head.bias = Matrix(1, 5);
  const std::vector<int> labels{0, 4};
  EXPECT_NEAR(cross_entropy(random_matrix(2, 3, 1), labels, head).loss, std::log(5.0), 1e-14);
}

TEST(CrossEntropy, BadLabelsAreRejected) {
  const Classifier head = Classifier::init(3, 2, 1);
  const std::vector<int> bad{0, 2};
  EXPECT_THROW(cross_entropy(random_matrix(2, 3, 1), bad, head), DataError);
  const std::vector<int> short_labels{0};
  EXPECT_THROW(cross_entropy(random_matrix(2, 3, 1), short_labels, head), ShapeError);
}

TEST(Sgd, MomentumAndDecayArithmetic) {
  Sgd opt(0.9, 0.1);
  Matrix p(1, 1, 2.0);
  const Matrix g(1, 1, 1.0);
  opt.step("w", p, g, 0.5);
  // v = 1 + 0.1*2 = 1.2 ; p = 2 - 0.6
  EXPECT_DOUBLE_EQ(p(0, 0), 1.4);
  opt.step("w", p, g, 0.5);
  // v = 0.9*1.2 + 1 + 0.14 = 2.22 ; p = 1.4 - 1.11
  EXPECT_NEAR(p(0, 0), 0.29, 1e-15);
  Matrix q(1, 1, 2.0);
  opt.step("other", q, g, 0.5);
  EXPECT_DOUBLE_EQ(q(0, 0), 1.4);
}

TEST(MakeTrainData, RemapsLabelsDensely) {
  data::Dataset ds = data::synth_dataset(tiny_config().data.synthetic);
  for (auto& r : ds.manifest.records) r.label = r.label * 10 + 3;
  const TrainData td = make_train_data(ds);
  EXPECT_EQ(td.classes, 4u);
  for (std::size_t i = 0; i < td.labels.size(); ++i) {
    EXPECT_GE(td.labels[i], 0);
    EXPECT_LT(td.labels[i], 4);
    EXPECT_EQ(td.original_labels[i], (td.original_labels[i] - 3) / 10 * 10 + 3);
  }
  EXPECT_EQ(td.images.size(), ds.manifest.indices(data::Split::train).size());
}

class ComposeTest : public ::testing::Test {
 protected:
  void SetUp() override {
    config = tiny_config();
    model = init_model(config, 4);
    model.gcm.query = random_matrix(16, 16, 5, 0.3);
    model.gcm.key = random_matrix(16, 16, 6, 0.3);
    model.reduce = random_matrix(48, 16, 7, 0.3);
    g = random_unit_rows(10, 16, 8);
    local = random_local(3, 10, 16, 9);
  }
  PipelineConfig config;
  Model model;
  Matrix g;
  LocalFeatures local;
};

TEST_F(ComposeTest, BaselineReturnsGlobalFeatures) {
  const Representations r = compose(model, {false, false, FusionMode::mca}, g, local);
  EXPECT_EQ(r.z, g);
  EXPECT_EQ(r.u, g);
  EXPECT_FALSE(r.v.has_value());
}

TEST_F(ComposeTest, ModesMatchModuleComposition) {
  const FeatureMatrix u = gcm::gcm_forward(g, model.gcm).u;
  const FeatureMatrix v = lcm::fuse_local(local, model.reduce);
  const Representations mca = compose(model, {true, true, FusionMode::mca}, g, local);
  EXPECT_EQ(mca.u, u);
  EXPECT_EQ(*mca.v, v);
  EXPECT_EQ(mca.z, fusion::fuse_rows(u, v, model.mca));

  const Representations add = compose(model, {true, true, FusionMode::add}, g, local);
  for (std::size_t i = 0; i < u.size(); ++i)
    EXPECT_NEAR(add.z.values()[i], 0.5 * (u.values()[i] + v.values()[i]), 1e-15);

  const Representations cat = compose(model, {true, true, FusionMode::concat}, g, local);
  ASSERT_EQ(cat.z.cols(), 32u);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t c = 0; c < 16; ++c) {
      EXPECT_EQ(cat.z(r, c), u(r, c));
      EXPECT_EQ(cat.z(r, 16 + c), v(r, c));
    }

  const Representations gcm_only = compose(model, {true, false, FusionMode::mca}, g, local);
  EXPECT_EQ(gcm_only.z, u);
}

TEST_F(ComposeTest, GlobalAndLocalBranchesAreIndependent) {
  const Representations with_gcm = compose(model, {true, true, FusionMode::mca}, g, local);
  const Representations without_gcm = compose(model, {false, true, FusionMode::mca}, g, local);
  EXPECT_EQ(*with_gcm.v, *without_gcm.v);
  const Representations no_lcm = compose(model, {true, false, FusionMode::mca}, g, local);
  EXPECT_EQ(with_gcm.u, no_lcm.u);
}

TEST(Training, OneEpochPerStageRunsEveryStage) {
  const PipelineConfig c = tiny_config(1);
  const TrainData td = tiny_data(c);
  std::vector<EpochRecord> records;
  const Model m = train_all(c, td, [&](const EpochRecord& r, const Model&) { records.push_back(r); });
  EXPECT_EQ(m.stage, 3u);
  ASSERT_EQ(records.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(records[s].stage, s + 1);
    EXPECT_EQ(records[s].epoch, 1u);
    EXPECT_TRUE(std::isfinite(records[s].loss));
  }
  EXPECT_TRUE(records[1].extra.contains("clustering"));
  EXPECT_EQ(m.bank.slots(), td.images.size());
}

TEST(Training, StageOneLossFallsOnEasyData) {
  int majority = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    PipelineConfig c = tiny_config(20);
    c.reseed(seed);
    c.training.base_lr = 0.02;
    c.training.warmup_epochs = 2;
    const TrainData td = tiny_data(c);
    Model m = init_model(c, td.classes);
    std::vector<double> losses;
    train_stage1(m, c, td, [&](const EpochRecord& r, const Model&) { losses.push_back(r.loss); });
    ASSERT_EQ(losses.size(), 20u);
    majority += losses.back() < losses.front();
  }
  EXPECT_GE(majority, 3);
}

TEST(Training, DivergenceIsStateErrorNamingStage) {
  PipelineConfig c = tiny_config(3);
  c.training.base_lr = 1e200;
  c.training.lr_floor = 0.0;
  const TrainData td = tiny_data(c);
  Model m = init_model(c, td.classes);
  try {
    train_stage1(m, c, td);
    FAIL() << "training did not diverge";
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("stage 1"), std::string::npos) << e.what();
  }
}

TEST(Training, AblationSkipsDisabledModules) {
  PipelineConfig c = tiny_config(1);
  c.ablation.use_gcm = false;
  c.ablation.use_lcm = false;
  const TrainData td = tiny_data(c);
  Model m = init_model(c, td.classes);
  const Model before = m;
  train_stage2(m, c, td);
  EXPECT_EQ(m.gcm.query, before.gcm.query);
  EXPECT_EQ(m.reduce, before.reduce);
  EXPECT_EQ(m.bank.slots(), 0u);
}

TEST(Training, FrozenEncoderOnlyMovesPartParameters) {
  PipelineConfig c = tiny_config(1);
  const TrainData td = tiny_data(c);
  Model m = init_model(c, td.classes);
  const Model before = m;
  train_stage2(m, c, td);
  EXPECT_EQ(m.encoder.patch_proj, before.encoder.patch_proj);
  EXPECT_EQ(m.encoder.cls_token, before.encoder.cls_token);
  EXPECT_NE(m.encoder.part_tokens, before.encoder.part_tokens);
  for (std::size_t c2 = 0; c2 < m.encoder.pos_embed.cols(); ++c2) EXPECT_EQ(m.encoder.pos_embed(0, c2), before.encoder.pos_embed(0, c2));
}

TEST(Checkpoint, JsonRoundTripRestoresEveryBlock) {
  const PipelineConfig c = tiny_config(1);
  Model m = init_model(c, 4);
  m.gcm.value = random_matrix(16, 16, 3);
  m.head_z.bias = random_matrix(1, 4, 4);
  m.stage = 2;
  const Model back = model_from_json(model_to_json(m), c);
  EXPECT_EQ(back.stage, 2u);
  EXPECT_EQ(back.gcm.value, m.gcm.value);
  EXPECT_EQ(back.head_z.bias, m.head_z.bias);
  EXPECT_EQ(back.encoder.part_tokens, m.encoder.part_tokens);
  EXPECT_EQ(model_to_json(back), model_to_json(m));
}

TEST(Checkpoint, MissingOrMisshapedBlocksAreStateErrors) {
  const PipelineConfig c = tiny_config(1);
  EXPECT_THROW(model_from_json("not json", c), StateError);
  EXPECT_THROW(model_from_json("{}", c), StateError);
  PipelineConfig wider = c;
  wider.encoder.embed_dim = 32;
  wider.validate();
  EXPECT_THROW(model_from_json(model_to_json(init_model(c, 4)), wider), StateError);
}

}  // namespace
}  // namespace corrreid::training
