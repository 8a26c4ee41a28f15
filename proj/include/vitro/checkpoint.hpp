// SPDX-License-Identifier: Apache-2.0
//
// Versioned named-tensor container.
//
//   magic    6 bytes  "VITRO1"
//   version  u32
//   records until end of file, each:
//     name length u32, UTF-8 name, dtype u8 (1 = f64), rank u32,
//     dims u32[rank], payload f64[prod(dims)]
//
// All integers and floats are little-endian; payloads are row-major.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitro/tensor.hpp"

namespace vitro {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;

  Shape shape() const { return Shape(dims.begin(), dims.end()); }
};

class Checkpoint {
 public:
  static constexpr std::string_view kMagic = "VITRO1";
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint8_t kDtypeF64 = 1;

  void add(std::string name, const Shape& shape, std::span<const double> values);
  void add(std::string name, const Tensor& tensor);
  // Text stored as one f64 per UTF-8 byte.
  void add_text(std::string name, std::string_view text);
  void add_u64(std::string name, std::uint64_t value);

  bool contains(std::string_view name) const;
  const NamedTensor& get(std::string_view name) const;
  Tensor tensor(std::string_view name, bool trainable = false) const;
  std::string text(std::string_view name) const;
  std::uint64_t u64(std::string_view name) const;
  double scalar(std::string_view name) const;

  const std::vector<NamedTensor>& records() const { return records_; }

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<NamedTensor> records_;
};

std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace vitro
