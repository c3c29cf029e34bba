#pragma once

// Versioned binary container shared by base models, adapters, routers and
// fused models.
//
//   "SAMK" | u32 version | ModelConfig | str kind | str meta (JSON text)
//   u32 count | count x { str name | u8 dtype | u8 ndim | u64 dims[ndim] | values }
//
// All integers and values are little-endian; str is a u32 length + bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "samdkif/model_config.hpp"
#include "samdkif/tensor.hpp"

namespace samdkif {

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2, kI32 = 3, kU8 = 4 };

struct NamedTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<double> values;  // widened copy; narrowed again on write
};

class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  Checkpoint() = default;
  Checkpoint(std::string kind, ModelConfig config) : kind(std::move(kind)), config(config) {}

  std::string kind;
  ModelConfig config;
  std::string meta = "{}";

  template <typename T>
  void put(const std::string& name, const Tensor<T>& tensor);
  void put_raw(std::string name, DType dtype, Shape shape, std::vector<double> values);

  bool has(const std::string& name) const;
  const NamedTensor& entry(const std::string& name) const;

  /// Throws FormatError when the name is missing.
  template <typename T>
  Tensor<T> get(const std::string& name) const;

  const std::vector<NamedTensor>& tensors() const { return tensors_; }

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);

  void save(const std::string& path) const;
  /// Throws FormatError (unreadable, bad magic, unknown version, truncated).
  static Checkpoint load(const std::string& path);

 private:
  std::vector<NamedTensor> tensors_;
};

}  // namespace samdkif
