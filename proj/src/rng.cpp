// SPDX-License-Identifier: Apache-2.0
#include "vitro/rng.hpp"

namespace vitro {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  // FNV-1a over the stream name, mixed with the run seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

std::vector<double> normal_values(Rng& rng, std::size_t count, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> out(count);
  for (double& v : out) v = dist(rng);
  return out;
}

Tensor normal_tensor(Rng& rng, Shape shape, double stddev, bool trainable) {
  const std::size_t n = shape_numel(shape);
  return Tensor::from(std::move(shape), normal_values(rng, n, stddev), trainable);
}

}  // namespace vitro
