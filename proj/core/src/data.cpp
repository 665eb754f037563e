#include "corrreid/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "corrreid/encoder.hpp"

namespace corrreid::data {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
  if (num_ids < 2) throw ConfigError("synthetic.num_ids must be at least 2");
  if (per_id < 2) throw ConfigError("synthetic.per_id must be at least 2 to form query and gallery");
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("synthetic image shape is empty");
  if (!(viewpoint_noise >= 0.0)) throw ConfigError("synthetic.viewpoint_noise must be >= 0");
  if (!(part_dropout >= 0.0 && part_dropout < 1.0)) {
    throw ConfigError("synthetic.part_dropout must lie in [0, 1)");
  }
  if (patch_size == 0 || height % patch_size != 0) {
    throw ConfigError("synthetic.height must be divisible by patch_size");
  }
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "train";
}

std::optional<Split> split_from_string(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "query") return Split::query;
  if (text == "gallery") return Split::gallery;
  return std::nullopt;
}

std::vector<std::size_t> Manifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> stripe_pixel_rows(const SyntheticSpec& spec) {
  const auto counts = encoder::stripe_rows(spec.height / spec.patch_size, spec.num_parts);
  std::vector<std::pair<std::size_t, std::size_t>> stripes;
  std::size_t row = 0;
  for (const std::size_t c : counts) {
    stripes.emplace_back(row * spec.patch_size, (row + c) * spec.patch_size);
    row += c;
  }
  return stripes;
}

namespace {

// Low-frequency basis: DCT rows (fy < 4) times periodic columns (fx < 8,
// random phase).
std::vector<std::vector<double>> make_templates(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t h = spec.height, w = spec.width, ch = spec.channels;
  const std::size_t pixels = h * w * ch;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const std::size_t max_fy = std::min<std::size_t>(4, h);
  const std::size_t max_fx = std::min<std::size_t>(8, w / 2 + 1);

  std::vector<std::vector<double>> templates;
  for (std::size_t id = 0; id < spec.num_ids; ++id) {
    std::vector<double> t(pixels, 0.0);
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t fy = 0; fy < max_fy; ++fy) {
        for (std::size_t fx = 0; fx < max_fx; ++fx) {
          const double amp = normal(rng);
          const double ph = phase(rng);
          for (std::size_t y = 0; y < h; ++y) {
            const double vy = std::cos(std::numbers::pi * double(fy) * (double(y) + 0.5) / double(h));
            for (std::size_t x = 0; x < w; ++x) {
              const double vx = std::cos(2.0 * std::numbers::pi * double(fx) * double(x) / double(w) + ph);
              t[(y * w + x) * ch + c] += amp * vy * vx;
            }
          }
        }
      }
    }
    // Gram-Schmidt against earlier identities.
    for (const auto& prev : templates) {
      double proj = 0.0;
      for (std::size_t i = 0; i < pixels; ++i) proj += t[i] * prev[i];
      for (std::size_t i = 0; i < pixels; ++i) t[i] -= proj * prev[i];
    }
    double n = 0.0;
    for (double v : t) n += v * v;
    n = std::sqrt(n);
    if (n < 1e-8) {
      throw ConfigError("cannot build " + std::to_string(spec.num_ids) +
                        " orthogonal identity templates at this image size");
    }
    for (double& v : t) v /= n;
    templates.push_back(std::move(t));
  }
  // Unit RMS per pixel.
  const double scale = std::sqrt(double(pixels));
  for (auto& t : templates)
    for (double& v : t) v *= scale;
  return templates;
}

}  // namespace

Dataset synth_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto templates = make_templates(spec, rng);
  const auto stripes = stripe_pixel_rows(spec);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick_stripe(0, stripes.size() - 1);
  const long max_shift = long(spec.width / 4);

  Dataset ds;
  for (std::size_t id = 0; id < spec.num_ids; ++id) {
    for (std::size_t s = 0; s < spec.per_id; ++s) {
      Image img(spec.height, spec.width, spec.channels);
      const long shift = std::clamp(long(std::lround(2.0 * spec.viewpoint_noise * normal(rng))),
                                    -max_shift, max_shift);
      const long w = long(spec.width);
      for (std::size_t y = 0; y < spec.height; ++y)
        for (std::size_t x = 0; x < spec.width; ++x) {
          const std::size_t src_x = std::size_t(((long(x) - shift) % w + w) % w);
          for (std::size_t c = 0; c < spec.channels; ++c)
            img.at(y, x, c) = templates[id][(y * spec.width + src_x) * spec.channels + c] +
                              spec.viewpoint_noise * normal(rng);
        }
      if (unit(rng) < spec.part_dropout) {
        const auto [begin, end] = stripes[pick_stripe(rng)];
        for (std::size_t y = begin; y < end; ++y)
          for (std::size_t x = 0; x < spec.width; ++x)
            for (std::size_t c = 0; c < spec.channels; ++c) img.at(y, x, c) = 0.0;
      }
      ManifestRecord rec;
      char name[48];
      std::snprintf(name, sizeof name, "id%03zu_%03zu", id, s);
      rec.item_id = name;
      rec.label = int(id);
      rec.split = s == 0 ? Split::query : (s % 2 == 1 ? Split::gallery : Split::train);
      rec.line = ds.manifest.records.size() + 1;
      ds.manifest.records.push_back(std::move(rec));
      ds.images.push_back(std::move(img));
    }
  }
  return ds;
}

void validate_manifest(const Manifest& manifest) {
  if (manifest.records.empty()) throw ManifestError(ManifestError::Kind::empty, 0, "manifest is empty");
  std::map<std::string, std::size_t> seen;
  std::set<int> gallery_labels;
  for (const auto& r : manifest.records) {
    const auto [it, inserted] = seen.emplace(r.item_id, r.line);
    if (!inserted) {
      throw ManifestError(ManifestError::Kind::duplicate_id, r.line,
                          "item_id \"" + r.item_id + "\" already defined on line " +
                              std::to_string(it->second));
    }
    if (r.split == Split::gallery) gallery_labels.insert(r.label);
  }
  for (const auto& r : manifest.records) {
    if (r.split == Split::query && !gallery_labels.contains(r.label)) {
      throw ManifestError(ManifestError::Kind::query_label_absent, r.line,
                          "query label " + std::to_string(r.label) + " has no gallery item");
    }
  }
}

namespace {

Image image_from_json(const nlohmann::json& j, std::size_t line) {
  if (!j.contains("shape") || !j.contains("data")) {
    throw ManifestError(ManifestError::Kind::missing_field, line, "inline image needs shape and data");
  }
  const auto shape = j["shape"].get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw ManifestError(ManifestError::Kind::parse, line, "image shape must be [H, W, C]");
  Image img(shape[0], shape[1], shape[2]);
  const auto data = j["data"].get<std::vector<double>>();
  if (data.size() != img.pixels.size()) {
    throw ManifestError(ManifestError::Kind::parse, line, "inline image data length mismatch");
  }
  img.pixels = data;
  return img;
}

}  // namespace

Manifest parse_manifest(std::istream& in) {
  static const std::set<std::string> known{"item_id", "label", "split", "camera", "path", "image"};
  Manifest m;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError(ManifestError::Kind::parse, line, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ManifestError(ManifestError::Kind::parse, line, "record is not an object");
    for (const auto& [key, _] : j.items())
      if (!known.contains(key)) throw ManifestError(ManifestError::Kind::parse, line, "unknown field \"" + key + "\"");
    for (const char* field : {"item_id", "label", "split"})
      if (!j.contains(field)) {
        throw ManifestError(ManifestError::Kind::missing_field, line,
                            std::string("missing field \"") + field + "\"");
      }
    ManifestRecord r;
    r.line = line;
    try {
      r.item_id = j["item_id"].get<std::string>();
      r.label = j["label"].get<int>();
      const auto split_text = j["split"].get<std::string>();
      const auto split = split_from_string(split_text);
      if (!split) {
        throw ManifestError(ManifestError::Kind::unknown_split, line, "unknown split \"" + split_text + "\"");
      }
      r.split = *split;
      if (j.contains("camera")) r.camera = j["camera"].get<int>();
      if (j.contains("path")) r.path = j["path"].get<std::string>();
      if (j.contains("image")) r.image = image_from_json(j["image"], line);
    } catch (const nlohmann::json::exception& e) {
      throw ManifestError(ManifestError::Kind::parse, line, std::string("bad field type: ") + e.what());
    }
    m.records.push_back(std::move(r));
  }
  validate_manifest(m);
  return m;
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  return parse_manifest(in);
}

std::string manifest_to_jsonl(const Manifest& manifest) {
  std::string out;
  for (const auto& r : manifest.records) {
    nlohmann::json j;
    j["item_id"] = r.item_id;
    j["label"] = r.label;
    j["split"] = to_string(r.split);
    if (r.camera) j["camera"] = *r.camera;
    if (r.path) j["path"] = *r.path;
    if (r.image) {
      j["image"]["shape"] = {r.image->height, r.image->width, r.image->channels};
      j["image"]["data"] = r.image->pixels;
    }
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const Manifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open manifest for writing: " + path);
  out << manifest_to_jsonl(manifest);
  if (!out) throw IoError("failed writing manifest " + path);
}

void write_image_block(const Image& image, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open image block " + path);
  nlohmann::json header;
  header["dtype"] = "f32";
  header["shape"] = {image.height, image.width, image.channels};
  out << header.dump() << '\n';
  for (const double v : image.pixels) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                    static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  if (!out) throw IoError("failed writing image block " + path);
}

Image read_image_block(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image block " + path);
  std::string header_line;
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("image block " + path + " has an invalid header: " + e.what());
  }
  if (header.value("dtype", "") != "f32") throw DataError("image block " + path + " is not f32");
  const auto shape = header.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 3) throw DataError("image block " + path + " shape must be [H, W, C]");
  Image img(shape[0], shape[1], shape[2]);
  for (double& v : img.pixels) {
    unsigned char bytes[4];
    if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw DataError("image block " + path + " is truncated");
    const std::uint32_t bits = std::uint32_t(bytes[0]) | (std::uint32_t(bytes[1]) << 8) |
                               (std::uint32_t(bytes[2]) << 16) | (std::uint32_t(bytes[3]) << 24);
    v = std::bit_cast<float>(bits);
  }
  return img;
}

std::vector<Image> load_images(const Manifest& manifest, const std::string& base_dir) {
  std::vector<Image> images;
  images.reserve(manifest.size());
  for (const auto& r : manifest.records) {
    if (r.image) {
      images.push_back(*r.image);
    } else if (r.path) {
      fs::path p(*r.path);
      if (p.is_relative()) p = fs::path(base_dir) / p;
      images.push_back(read_image_block(p.string()));
    } else {
      throw ManifestError(ManifestError::Kind::missing_field, r.line, "record has neither path nor image");
    }
  }
  for (std::size_t i = 1; i < images.size(); ++i)
    if (!images[i].same_shape(images[0])) throw DataError("images in the manifest differ in shape");
  return images;
}

void write_dataset(const Dataset& dataset, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "images");
  Manifest m = dataset.manifest;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const std::string rel = "images/" + m.records[i].item_id + ".img";
    write_image_block(dataset.images.at(i), (fs::path(dir) / rel).string());
    m.records[i].path = rel;
    m.records[i].image.reset();
  }
  write_manifest(m, (fs::path(dir) / "manifest.jsonl").string());
}

Dataset read_dataset(const std::string& manifest_path) {
  Dataset ds;
  ds.manifest = load_manifest(manifest_path);
  ds.images = load_images(ds.manifest, fs::path(manifest_path).parent_path().string());
  return ds;
}

}  // namespace corrreid::data
