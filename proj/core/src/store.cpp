#include "corrreid/store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace corrreid::data {

namespace {

template <typename T>
void put_le(std::string& buf, T value) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= U(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace

std::string sidecar_path(const std::string& store_path) { return store_path + ".labels"; }

double dtype_epsilon(DType dtype) {
  return dtype == DType::f32 ? double(std::numeric_limits<float>::epsilon())
                             : std::numeric_limits<double>::epsilon();
}

void store_write(const std::string& path, const FeatureMatrix& values,
                 const std::vector<std::string>& item_ids, const std::vector<int>& labels,
                 DType dtype) {
  if (item_ids.size() != values.rows() || labels.size() != values.rows()) {
    throw ShapeError("store_write: " + std::to_string(values.rows()) + " rows but " +
                     std::to_string(item_ids.size()) + " ids and " + std::to_string(labels.size()) +
                     " labels");
  }
  std::string buf;
  const std::size_t width = dtype == DType::f32 ? 4 : 8;
  buf.reserve(kStoreHeaderBytes + values.rows() * values.cols() * width);
  buf.append(kStoreMagic, 4);
  put_le<std::uint32_t>(buf, kStoreVersion);
  put_le<std::uint64_t>(buf, values.rows());
  put_le<std::uint64_t>(buf, values.cols());
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(dtype));
  for (const double v : values.values()) {
    if (dtype == DType::f32) put_le<float>(buf, static_cast<float>(v));
    else put_le<double>(buf, v);
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open store for writing: " + path);
    out.write(buf.data(), std::streamsize(buf.size()));
    if (!out) throw IoError("failed writing store " + path);
  }
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw IoError("cannot open sidecar for writing: " + sidecar_path(path));
  for (std::size_t i = 0; i < item_ids.size(); ++i) {
    if (item_ids[i].find_first_of("\t\n") != std::string::npos) {
      throw DataError("item_id contains a tab or newline: " + item_ids[i]);
    }
    side << item_ids[i] << '\t' << labels[i] << '\n';
  }
  if (!side) throw IoError("failed writing sidecar " + sidecar_path(path));
}

FeatureStore store_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open store " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || std::memcmp(p, kStoreMagic, 4) != 0) {
    throw StoreError(StoreError::Kind::bad_magic, path + ": not a feature store (bad magic)");
  }
  if (bytes.size() < kStoreHeaderBytes) {
    throw StoreError(StoreError::Kind::truncated, path + ": header is truncated");
  }
  const auto version = get_le<std::uint32_t>(p + 4);
  if (version != kStoreVersion) {
    throw StoreError(StoreError::Kind::unsupported_version,
                     path + ": unsupported store version " + std::to_string(version));
  }
  const auto n = get_le<std::uint64_t>(p + 8);
  const auto d = get_le<std::uint64_t>(p + 16);
  const auto tag = get_le<std::uint32_t>(p + 24);
  if (tag != 1 && tag != 2) {
    throw StoreError(StoreError::Kind::bad_dtype, path + ": unknown dtype tag " + std::to_string(tag));
  }
  FeatureStore store;
  store.dtype = static_cast<DType>(tag);
  const std::size_t width = store.dtype == DType::f32 ? 4 : 8;
  if (d != 0 && n > (bytes.size() - kStoreHeaderBytes) / width / d) {
    throw StoreError(StoreError::Kind::truncated, path + ": payload shorter than " + std::to_string(n) +
                                                     "x" + std::to_string(d));
  }
  if (bytes.size() != kStoreHeaderBytes + n * d * width) {
    throw StoreError(StoreError::Kind::truncated, path + ": payload size does not match header");
  }
  store.values = FeatureMatrix(n, d);
  auto out = store.values.values();
  const unsigned char* q = p + kStoreHeaderBytes;
  for (std::size_t i = 0; i < n * d; ++i, q += width)
    out[i] = store.dtype == DType::f32 ? double(get_le<float>(q)) : get_le<double>(q);

  std::ifstream side(sidecar_path(path));
  if (!side) throw IoError("missing label sidecar " + sidecar_path(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(side, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw StoreError(StoreError::Kind::label_mismatch,
                       sidecar_path(path) + " line " + std::to_string(line_no) + ": expected item_id<TAB>label");
    }
    store.item_ids.push_back(line.substr(0, tab));
    try {
      std::size_t used = 0;
      const std::string label_text = line.substr(tab + 1);
      store.labels.push_back(std::stoi(label_text, &used));
      if (used != label_text.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw StoreError(StoreError::Kind::label_mismatch,
                       sidecar_path(path) + " line " + std::to_string(line_no) + ": label is not an integer");
    }
  }
  if (store.item_ids.size() != n) {
    throw StoreError(StoreError::Kind::label_mismatch,
                     path + ": store has " + std::to_string(n) + " rows but sidecar has " +
                         std::to_string(store.item_ids.size()));
  }
  return store;
}

}  // namespace corrreid::data
