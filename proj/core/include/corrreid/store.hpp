#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "corrreid/errors.hpp"
#include "corrreid/features.hpp"

namespace corrreid::data {

/// Payload element type tag.
enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

inline constexpr char kStoreMagic[4] = {'M', 'C', 'F', 'R'};
inline constexpr std::uint32_t kStoreVersion = 1;
/// magic(4) version(u32) N(u64) d(u64) dtype(u32), little-endian.
inline constexpr std::size_t kStoreHeaderBytes = 28;

struct FeatureStore {
  FeatureMatrix values;
  DType dtype = DType::f32;
  std::vector<std::string> item_ids;
  std::vector<int> labels;
};

class StoreError : public DataError {
 public:
  enum class Kind { bad_magic, unsupported_version, bad_dtype, truncated, label_mismatch };

  StoreError(Kind kind, const std::string& message) : DataError(message), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string sidecar_path(const std::string& store_path);

/// Writes the binary store and its "<path>.labels" sidecar (item_id TAB label
/// per row).
void store_write(const std::string& path, const FeatureMatrix& values,
                 const std::vector<std::string>& item_ids, const std::vector<int>& labels,
                 DType dtype = DType::f32);
FeatureStore store_read(const std::string& path);

/// Machine epsilon of the payload type.
double dtype_epsilon(DType dtype);

}  // namespace corrreid::data
