#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "corrreid/data.hpp"
#include "corrreid/eval.hpp"
#include "corrreid/store.hpp"
#include "test_support.hpp"

namespace corrreid::data {
namespace {

using testing::TempDir;
using testing::random_matrix;

SyntheticSpec small_spec(double noise = 0.3, double dropout = 0.0, std::uint64_t seed = 1) {
  SyntheticSpec s;
  s.num_ids = 4;
  s.per_id = 6;
  s.height = 12;
  s.width = 16;
  s.num_parts = 3;
  s.patch_size = 4;
  s.viewpoint_noise = noise;
  s.part_dropout = dropout;
  s.seed = seed;
  return s;
}

Matrix pixel_rows(const Dataset& ds) {
  Matrix m(ds.images.size(), ds.images.front().pixels.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) std::ranges::copy(ds.images[i].pixels, m.row(i).begin());
  return m;
}

std::vector<int> labels_of(const Dataset& ds) {
  std::vector<int> out;
  for (const auto& r : ds.manifest.records) out.push_back(r.label);
  return out;
}

Manifest parse_text(const std::string& text) {
  std::istringstream in(text);
  return parse_manifest(in);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

TEST(Synth, NoiselessSamplesOfAnIdentityAreIdentical) {
  const Dataset ds = synth_dataset(small_spec(0.0));
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    for (std::size_t j = 0; j < ds.images.size(); ++j)
      if (ds.manifest.records[i].label == ds.manifest.records[j].label) {
        ASSERT_EQ(ds.images[i], ds.images[j]);
      }
}

TEST(Synth, SameSeedIsByteIdentical) {
  const Dataset a = synth_dataset(small_spec(0.4, 0.3, 9)), b = synth_dataset(small_spec(0.4, 0.3, 9));
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(manifest_to_jsonl(a.manifest), manifest_to_jsonl(b.manifest));
  const Dataset c = synth_dataset(small_spec(0.4, 0.3, 10));
  EXPECT_NE(a.images, c.images);
}

TEST(Synth, SplitsFollowSampleIndex) {
  const Dataset ds = synth_dataset(small_spec());
  ASSERT_EQ(ds.manifest.size(), 24u);
  EXPECT_EQ(ds.manifest.indices(Split::query).size(), 4u);
  EXPECT_EQ(ds.manifest.indices(Split::gallery).size(), 12u);
  EXPECT_EQ(ds.manifest.indices(Split::train).size(), 8u);
  EXPECT_NO_THROW(validate_manifest(ds.manifest));
}

TEST(Synth, SmallNoiseIsNearlyPerfectlySeparable) {
  const Dataset ds = synth_dataset(small_spec(0.05));
  EXPECT_GE(eval::leave_one_out_map(pixel_rows(ds), labels_of(ds)), 0.99);
}

TEST(Synth, NoiseDialLowersRawRetrieval) {
  double previous = 2.0;
  for (const double sigma : {0.2, 0.6, 1.2}) {
    double total = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      SyntheticSpec spec = small_spec(sigma, 0.0, seed);
      spec.num_ids = 8;
      spec.per_id = 8;
      const Dataset ds = synth_dataset(spec);
      total += eval::leave_one_out_map(pixel_rows(ds), labels_of(ds)) / 5.0;
    }
    EXPECT_LE(total, previous) << "sigma " << sigma;
    previous = total;
  }
}

TEST(Synth, DropoutZeroesWholeStripes) {
  const SyntheticSpec spec = small_spec(0.3, 0.99);
  const Dataset ds = synth_dataset(spec);
  const auto stripes = stripe_pixel_rows(spec);
  ASSERT_EQ(stripes.size(), 3u);
  std::size_t zeroed = 0;
  for (const Image& img : ds.images) {
    for (const auto& [begin, end] : stripes) {
      bool all_zero = true;
      for (std::size_t y = begin; y < end && all_zero; ++y)
        for (std::size_t x = 0; x < img.width; ++x) all_zero = all_zero && img.at(y, x, 0) == 0.0;
      zeroed += all_zero;
    }
  }
  EXPECT_GE(zeroed, ds.images.size() * 9 / 10);
}

TEST(Synth, InvalidSpecsAreConfigErrors) {
  SyntheticSpec s = small_spec();
  s.per_id = 1;
  EXPECT_THROW(synth_dataset(s), ConfigError);
  s = small_spec();
  s.num_ids = 1;
  EXPECT_THROW(synth_dataset(s), ConfigError);
  s = small_spec();
  s.part_dropout = 1.0;
  EXPECT_THROW(synth_dataset(s), ConfigError);
  s = small_spec();
  s.viewpoint_noise = -0.1;
  EXPECT_THROW(synth_dataset(s), ConfigError);
}

TEST(Manifest, EmptyInputIsEmptyError) {
  try {
    parse_text("");
    FAIL() << "expected an error";
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.kind(), ManifestError::Kind::empty);
  }
}

TEST(Manifest, ThreeWellFormedLines) {
  const Manifest m = parse_text(
      "{\"item_id\":\"a\",\"label\":1,\"split\":\"query\",\"path\":\"a.img\"}\n"
      "{\"item_id\":\"b\",\"label\":1,\"split\":\"gallery\",\"path\":\"b.img\",\"camera\":2}\n"
      "{\"item_id\":\"c\",\"label\":2,\"split\":\"train\",\"path\":\"c.img\"}\n");
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.records[1].camera, 2);
  EXPECT_EQ(m.records[2].split, Split::train);
  EXPECT_EQ(m.records[2].line, 3u);
}

TEST(Manifest, DuplicateIdNamesBothLines) {
  try {
    parse_text(
        "{\"item_id\":\"a\",\"label\":1,\"split\":\"gallery\",\"path\":\"a.img\"}\n"
        "{\"item_id\":\"b\",\"label\":1,\"split\":\"query\",\"path\":\"b.img\"}\n"
        "{\"item_id\":\"a\",\"label\":2,\"split\":\"train\",\"path\":\"c.img\"}\n");
    FAIL() << "expected an error";
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.kind(), ManifestError::Kind::duplicate_id);
    const std::string what = e.what();
    EXPECT_NE(what.find("line 3"), std::string::npos) << what;
    EXPECT_NE(what.find('1'), std::string::npos) << what;
  }
}

TEST(Manifest, UnknownSplitAndMissingQueryLabel) {
  try {
    parse_text("{\"item_id\":\"a\",\"label\":1,\"split\":\"holdout\",\"path\":\"a.img\"}\n");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.kind(), ManifestError::Kind::unknown_split);
    EXPECT_EQ(e.line(), 1u);
  }
  try {
    parse_text(
        "{\"item_id\":\"a\",\"label\":1,\"split\":\"gallery\",\"path\":\"a.img\"}\n"
        "{\"item_id\":\"b\",\"label\":4,\"split\":\"query\",\"path\":\"b.img\"}\n");
    FAIL();
  } catch (const ManifestError& e) {
    EXPECT_EQ(e.kind(), ManifestError::Kind::query_label_absent);
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Manifest, MalformedLinesReportLineNumbers) {
  const std::string good = "{\"item_id\":\"a\",\"label\":1,\"split\":\"gallery\",\"path\":\"a.img\"}\n";
  const std::vector<std::pair<std::string, ManifestError::Kind>> cases{
      {"not json\n", ManifestError::Kind::parse},
      {"{\"item_id\":\"b\",\"split\":\"train\",\"path\":\"b\"}\n", ManifestError::Kind::missing_field},
      {"{\"item_id\":\"b\",\"label\":\"x\",\"split\":\"train\",\"path\":\"b\"}\n", ManifestError::Kind::parse},
      {"{\"item_id\":\"b\",\"label\":1,\"split\":\"train\",\"path\":\"b\",\"color\":1}\n", ManifestError::Kind::parse},
  };
  for (const auto& [line, kind] : cases) {
    try {
      parse_text(good + line);
      FAIL() << line;
    } catch (const ManifestError& e) {
      EXPECT_EQ(e.kind(), kind) << line;
      EXPECT_EQ(e.line(), 2u) << line;
    }
  }
}

TEST(Manifest, JsonlRoundTripWithInlineImage) {
  Dataset ds = synth_dataset(small_spec());
  ds.manifest.records[0].image = ds.images[0];
  ds.manifest.records[0].path.reset();
  const Manifest back = parse_text(manifest_to_jsonl(ds.manifest));
  ASSERT_EQ(back.size(), ds.manifest.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back.records[i].item_id, ds.manifest.records[i].item_id);
    EXPECT_EQ(back.records[i].label, ds.manifest.records[i].label);
    EXPECT_EQ(back.records[i].split, ds.manifest.records[i].split);
  }
  ASSERT_TRUE(back.records[0].image.has_value());
  EXPECT_TRUE(back.records[0].image->same_shape(ds.images[0]));
}

TEST(Dataset, WriteReadRoundTripAtFloatPrecision) {
  TempDir dir("dataset");
  const Dataset ds = synth_dataset(small_spec(0.5, 0.2));
  write_dataset(ds, dir.str());
  const Dataset back = read_dataset(dir.str("manifest.jsonl"));
  ASSERT_EQ(back.images.size(), ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    for (std::size_t p = 0; p < ds.images[i].pixels.size(); ++p)
      ASSERT_EQ(back.images[i].pixels[p], double(float(ds.images[i].pixels[p])));
}

TEST(Dataset, TruncatedImageBlockIsDataError) {
  TempDir dir("block");
  write_image_block(testing::random_image(4, 4, 1, 3), dir.str("x.img"));
  std::string bytes = slurp(dir.str("x.img"));
  bytes.pop_back();
  spit(dir.str("x.img"), bytes);
  EXPECT_THROW(read_image_block(dir.str("x.img")), DataError);
}

TEST(Store, RoundTripWithinFloatEpsilon) {
  TempDir dir("store");
  const Matrix m = random_matrix(10, 8, 4);
  std::vector<std::string> ids;
  std::vector<int> labels;
  for (int i = 0; i < 10; ++i) {
    ids.push_back("item" + std::to_string(i));
    labels.push_back(i % 3);
  }
  store_write(dir.str("f.mcfr"), m, ids, labels);
  const FeatureStore s = store_read(dir.str("f.mcfr"));
  EXPECT_EQ(s.item_ids, ids);
  EXPECT_EQ(s.labels, labels);
  for (std::size_t i = 0; i < m.size(); ++i)
    EXPECT_LE(std::abs(s.values.values()[i] - m.values()[i]), dtype_epsilon(DType::f32) * std::abs(m.values()[i]));
  store_write(dir.str("g.mcfr"), m, ids, labels, DType::f64);
  EXPECT_EQ(store_read(dir.str("g.mcfr")).values, m);
}

TEST(Store, HeaderIsLittleEndianLayout) {
  TempDir dir("layout");
  store_write(dir.str("f.mcfr"), random_matrix(3, 2, 1), {"a", "b", "c"}, {0, 1, 2}, DType::f64);
  const std::string bytes = slurp(dir.str("f.mcfr"));
  ASSERT_EQ(bytes.size(), kStoreHeaderBytes + 3 * 2 * 8);
  EXPECT_EQ(bytes.substr(0, 4), "MCFR");
  const auto u8 = [&](std::size_t i) { return static_cast<unsigned char>(bytes[i]); };
  EXPECT_EQ(u8(4), 1);
  EXPECT_EQ(u8(8), 3);
  EXPECT_EQ(u8(16), 2);
  EXPECT_EQ(u8(24), 2);
}

class StoreCorruption : public ::testing::Test {
 protected:
  void SetUp() override {
    store_write(dir.str("f.mcfr"), random_matrix(4, 3, 2), {"a", "b", "c", "d"}, {0, 0, 1, 1});
    bytes = slurp(dir.str("f.mcfr"));
  }
  StoreError::Kind failure_kind() {
    spit(dir.str("f.mcfr"), bytes);
    try {
      store_read(dir.str("f.mcfr"));
    } catch (const StoreError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "store read succeeded";
    return StoreError::Kind::bad_magic;
  }
  TempDir dir{"corrupt"};
  std::string bytes;
};

TEST_F(StoreCorruption, OneByteShortIsTruncated) {
  bytes.pop_back();
  EXPECT_EQ(failure_kind(), StoreError::Kind::truncated);
}

TEST_F(StoreCorruption, BadMagic) {
  bytes[0] = 'X';
  EXPECT_EQ(failure_kind(), StoreError::Kind::bad_magic);
}

TEST_F(StoreCorruption, UnsupportedVersion) {
  bytes[4] = 9;
  EXPECT_EQ(failure_kind(), StoreError::Kind::unsupported_version);
}

TEST_F(StoreCorruption, UnknownDtype) {
  bytes[24] = 7;
  EXPECT_EQ(failure_kind(), StoreError::Kind::bad_dtype);
}

TEST_F(StoreCorruption, SidecarCountMismatch) {
  spit(sidecar_path(dir.str("f.mcfr")), "a\t0\nb\t0\nc\t1\n");
  EXPECT_EQ(failure_kind(), StoreError::Kind::label_mismatch);
}

TEST(Store, StoreErrorsAreDataErrors) {
  TempDir dir("kind");
  spit(dir.str("f.mcfr"), "nope");
  EXPECT_THROW(store_read(dir.str("f.mcfr")), DataError);
  EXPECT_THROW(store_read(dir.str("missing.mcfr")), IoError);
}

}  // namespace
}  // namespace corrreid::data
