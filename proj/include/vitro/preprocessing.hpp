// SPDX-License-Identifier: Apache-2.0
//
// Everything between a raw lookback window and the backbone input: reversible
// instance normalization, patching, the learnable patch embedding and the
// statistics token.
#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "vitro/tensor.hpp"

namespace vitro {

using Series = std::vector<double>;

struct RevInState {
  static constexpr double kEps = 1e-5;
  double mean = 0.0;
  double stddev = 1.0;  // never below kEps
};

struct NormalizedWindow {
  Series values;
  RevInState state;
};

// Per-window standardisation (non-affine). Throws InputError for fewer than two points.
NormalizedWindow revin_normalize(std::span<const double> x);
Series revin_denormalize(std::span<const double> y, const RevInState& state);

struct PatchConfig {
  std::size_t patch_len = 16;
  std::size_t stride = 8;
  std::size_t lookback = 64;

  void validate() const;
  // floor((T - L_p) / S) + 2
  std::size_t patch_count() const;
};

// [P x L_p] frozen tensor. The window is right-padded with S copies of its
// last value, which is what produces the final patch.
Tensor make_patches(std::span<const double> x, const PatchConfig& cfg);

// patches * W_e^T + b_e with W_e [d x L_p], b_e [d].
Tensor embed_patches(const Tensor& patches, const Tensor& weight, const Tensor& bias);

struct StatsVector {
  static constexpr std::size_t kSize = 6;
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
  double stddev = 0.0;
  double median = 0.0;
  double slope = 0.0;  // least-squares slope per step

  std::array<double, kSize> as_array() const { return {min, max, mean, stddev, median, slope}; }
};

StatsVector compute_stats(std::span<const double> x);

// W_s * stats(x) + b_s as a [1 x d] row, W_s [d x 6].
Tensor stats_token(std::span<const double> x, const Tensor& weight, const Tensor& bias);

}  // namespace vitro
