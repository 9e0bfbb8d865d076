#pragma once

// Named-tensor checkpoint file:
//   "FLCK", u32 version, u32 count, then per tensor
//   u32 name length, name bytes, u8 dtype (0 f32, 1 f64), u32 ndim, u32 dims..., raw values.
// All integers and values are little-endian. Tensors are written in name order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ageflow/tensor.hpp"

namespace ageflow {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct StoredTensor {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<float> f32;
  std::vector<double> f64;

  std::size_t numel() const { return dtype == DType::F32 ? f32.size() : f64.size(); }
  bool operator==(const StoredTensor&) const = default;
};

class Checkpoint {
 public:
  void put(const std::string& name, const Tensor<float>& t);
  void put(const std::string& name, const Tensor<double>& t);
  void put_scalar(const std::string& name, double value);
  void put_vector(const std::string& name, const std::vector<double>& values);

  bool contains(const std::string& name) const { return tensors_.count(name) > 0; }
  /// True when any tensor name starts with prefix.
  bool has_prefix(const std::string& prefix) const;

  /// Throws Fault naming the tensor when missing or of another dtype or shape.
  Tensor<float> get_f32(const std::string& name, const Shape& expected = {}) const;
  double get_scalar(const std::string& name) const;
  std::vector<double> get_vector(const std::string& name) const;

  /// Copies every tensor from other, replacing same-named entries.
  void merge(const Checkpoint& other);
  /// Drops every tensor whose name starts with prefix.
  void erase_prefix(const std::string& prefix);

  const std::map<std::string, StoredTensor>& tensors() const { return tensors_; }
  std::map<std::string, StoredTensor>& tensors() { return tensors_; }

  bool operator==(const Checkpoint&) const = default;

 private:
  const StoredTensor& find(const std::string& name) const;

  std::map<std::string, StoredTensor> tensors_;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
/// Throws Fault on bad magic, unsupported version, unknown dtype or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");

}  // namespace ageflow
