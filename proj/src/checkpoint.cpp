// SPDX-License-Identifier: Apache-2.0
#include "vitro/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>

#include "vitro/error.hpp"

namespace vitro {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool done() const { return pos_ == bytes_.size(); }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what + " at byte " +
                        std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
    return v;
  }

  double f64(const char* what) {
    auto s = take(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return std::bit_cast<double>(v);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(std::string name, const Shape& shape, std::span<const double> values) {
  if (contains(name)) throw FormatError("checkpoint: duplicate record name '" + name + "'");
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("checkpoint: record '" + name + "' has " + std::to_string(values.size()) +
                         " values for shape " + shape_str(shape));
  }
  NamedTensor rec;
  rec.name = std::move(name);
  for (std::size_t d : shape) rec.dims.push_back(static_cast<std::uint32_t>(d));
  rec.values.assign(values.begin(), values.end());
  records_.push_back(std::move(rec));
}

void Checkpoint::add(std::string name, const Tensor& tensor) { add(std::move(name), tensor.shape(), tensor.data()); }

void Checkpoint::add_text(std::string name, std::string_view text) {
  std::vector<double> codes;
  codes.reserve(text.size());
  for (unsigned char c : text) codes.push_back(static_cast<double>(c));
  add(std::move(name), Shape{codes.size()}, codes);
}

void Checkpoint::add_u64(std::string name, std::uint64_t value) {
  // two exact 32-bit halves, low first
  const std::vector<double> halves{static_cast<double>(value & 0xffffffffULL), static_cast<double>(value >> 32)};
  add(std::move(name), Shape{2}, halves);
}

bool Checkpoint::contains(std::string_view name) const {
  return std::any_of(records_.begin(), records_.end(), [&](const NamedTensor& r) { return r.name == name; });
}

const NamedTensor& Checkpoint::get(std::string_view name) const {
  for (const NamedTensor& r : records_)
    if (r.name == name) return r;
  throw LookupError("checkpoint: no record named '" + std::string(name) + "'");
}

Tensor Checkpoint::tensor(std::string_view name, bool trainable) const {
  const NamedTensor& r = get(name);
  return Tensor::from(r.shape(), r.values, trainable);
}

std::string Checkpoint::text(std::string_view name) const {
  std::string out;
  for (double v : get(name).values) out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  return out;
}

std::uint64_t Checkpoint::u64(std::string_view name) const {
  const NamedTensor& r = get(name);
  if (r.values.size() != 2) throw FormatError("checkpoint: record '" + r.name + "' is not a u64");
  return static_cast<std::uint64_t>(r.values[0]) | (static_cast<std::uint64_t>(r.values[1]) << 32);
}

double Checkpoint::scalar(std::string_view name) const {
  const NamedTensor& r = get(name);
  if (r.values.size() != 1) throw FormatError("checkpoint: record '" + r.name + "' is not a scalar");
  return r.values[0];
}

std::vector<std::uint8_t> Checkpoint::to_bytes() const {
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kVersion);
  for (const NamedTensor& r : records_) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(kDtypeF64);
    put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    for (std::uint32_t d : r.dims) put_u32(out, d);
    for (double v : r.values) put_f64(out, v);
  }
  return out;
}

Checkpoint Checkpoint::from_bytes(std::span<const std::uint8_t> bytes) {
  Reader in(bytes);
  auto magic = in.take(kMagic.size(), "magic");
  if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = in.u32("version");
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                      std::to_string(kVersion) + ")");
  }
  Checkpoint ckpt;
  while (!in.done()) {
    const std::uint32_t name_len = in.u32("name length");
    auto name_bytes = in.take(name_len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto dtype = in.take(1, "dtype")[0];
    if (dtype != kDtypeF64) {
      throw FormatError("checkpoint: record '" + name + "' has unknown dtype code " + std::to_string(dtype));
    }
    const std::uint32_t rank = in.u32("rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(in.u32("dims"));
    const std::size_t count = shape_numel(shape);
    if (count > bytes.size() / 8) throw FormatError("checkpoint: record '" + name + "' payload truncated");
    std::vector<double> values(count);
    for (double& v : values) v = in.f64("payload");
    if (ckpt.contains(name)) throw FormatError("checkpoint: duplicate record name '" + name + "'");
    ckpt.add(std::move(name), shape, values);
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 computation failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

}  // namespace vitro
