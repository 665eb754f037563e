#pragma once

#include <cstddef>
#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "corrreid/errors.hpp"
#include "corrreid/features.hpp"

namespace corrreid::data {

struct SyntheticSpec {
  std::size_t num_ids = 8;
  std::size_t per_id = 16;
  std::size_t height = 16;
  std::size_t width = 32;
  std::size_t channels = 1;
  /// Per-pixel noise standard deviation; also scales the horizontal shift.
  double viewpoint_noise = 0.5;
  /// Probability that one horizontal stripe is zeroed.
  double part_dropout = 0.0;
  /// Stripe geometry, matching the encoder's region partition.
  std::size_t num_parts = 3;
  std::size_t patch_size = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

enum class Split { train, query, gallery };

std::string to_string(Split split);
std::optional<Split> split_from_string(const std::string& text);

struct ManifestRecord {
  std::string item_id;
  int label = 0;
  Split split = Split::train;
  std::optional<int> camera;
  std::optional<std::string> path;
  std::optional<Image> image;
  std::size_t line = 0;
};

struct Manifest {
  std::vector<ManifestRecord> records;

  std::vector<std::size_t> indices(Split split) const;
  std::size_t size() const { return records.size(); }
};

class ManifestError : public DataError {
 public:
  enum class Kind { empty, parse, missing_field, duplicate_id, unknown_split, query_label_absent };

  ManifestError(Kind kind, std::size_t line, const std::string& message)
      : DataError("manifest line " + std::to_string(line) + ": " + message), kind_(kind), line_(line) {}

  Kind kind() const { return kind_; }
  std::size_t line() const { return line_; }

 private:
  Kind kind_;
  std::size_t line_;
};

struct Dataset {
  std::vector<Image> images;  // aligned with manifest.records
  Manifest manifest;
};

/// Identity templates are orthogonalized low-frequency patterns. Each sample
/// is a circularly shifted template plus Gaussian noise, optionally with one
/// stripe zeroed. Per identity, sample 0 is the query, odd samples go to the
/// gallery and the remaining even samples to train.
Dataset synth_dataset(const SyntheticSpec& spec);

/// Pixel rows of each dropout stripe.
std::vector<std::pair<std::size_t, std::size_t>> stripe_pixel_rows(const SyntheticSpec& spec);

/// Checks uniqueness, splits and that every query label is in the gallery.
void validate_manifest(const Manifest& manifest);

Manifest parse_manifest(std::istream& in);
Manifest load_manifest(const std::string& path);
/// One JSON object per line. Inline images are written when present.
std::string manifest_to_jsonl(const Manifest& manifest);
void write_manifest(const Manifest& manifest, const std::string& path);

/// Flat binary image block: one JSON header line {"dtype":"f32","shape":[H,W,C]}
/// followed by H*W*C little-endian float32 values.
void write_image_block(const Image& image, const std::string& path);
Image read_image_block(const std::string& path);

/// Resolves every record's pixels, reading relative paths against `base_dir`.
std::vector<Image> load_images(const Manifest& manifest, const std::string& base_dir);

/// Writes the dataset as a manifest plus one image block per item under `dir`.
void write_dataset(const Dataset& dataset, const std::string& dir);
Dataset read_dataset(const std::string& manifest_path);

}  // namespace corrreid::data
