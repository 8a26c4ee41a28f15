// SPDX-License-Identifier: Apache-2.0
#include "vitro/preprocessing.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vitro/error.hpp"

namespace vitro {

NormalizedWindow revin_normalize(std::span<const double> x) {
  if (x.size() < 2) throw InputError("revin_normalize: need at least 2 points, got " + std::to_string(x.size()));
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  NormalizedWindow out;
  out.state.mean = mu;
  out.state.stddev = std::max(std::sqrt(var), RevInState::kEps);
  out.values.reserve(x.size());
  for (double v : x) out.values.push_back((v - mu) / out.state.stddev);
  return out;
}

Series revin_denormalize(std::span<const double> y, const RevInState& state) {
  Series out;
  out.reserve(y.size());
  for (double v : y) out.push_back(v * state.stddev + state.mean);
  return out;
}

void PatchConfig::validate() const {
  if (patch_len < 1 || patch_len > lookback) {
    throw ConfigError("patch config: patch length " + std::to_string(patch_len) + " must lie in [1, " +
                      std::to_string(lookback) + "]");
  }
  if (stride < 1) throw ConfigError("patch config: stride must be >= 1");
}

std::size_t PatchConfig::patch_count() const {
  validate();
  return (lookback - patch_len) / stride + 2;
}

Tensor make_patches(std::span<const double> x, const PatchConfig& cfg) {
  const std::size_t count = cfg.patch_count();
  if (x.size() != cfg.lookback) {
    throw DimensionError("make_patches: window length " + std::to_string(x.size()) + " != lookback " +
                         std::to_string(cfg.lookback));
  }
  std::vector<double> padded(x.begin(), x.end());
  padded.insert(padded.end(), cfg.stride, x.back());
  std::vector<double> out;
  out.reserve(count * cfg.patch_len);
  for (std::size_t p = 0; p < count; ++p) {
    const std::size_t start = p * cfg.stride;
    out.insert(out.end(), padded.begin() + static_cast<std::ptrdiff_t>(start),
               padded.begin() + static_cast<std::ptrdiff_t>(start + cfg.patch_len));
  }
  return Tensor::from({count, cfg.patch_len}, std::move(out));
}

Tensor embed_patches(const Tensor& patches, const Tensor& weight, const Tensor& bias) {
  return linear(patches, weight, bias);
}

StatsVector compute_stats(std::span<const double> x) {
  if (x.size() < 2) throw InputError("compute_stats: need at least 2 points, got " + std::to_string(x.size()));
  StatsVector s;
  const double n = static_cast<double>(x.size());
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  s.min = *lo;
  s.max = *hi;
  for (double v : x) s.mean += v;
  s.mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(var / n);

  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  s.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);

  const double t_mean = (n - 1.0) / 2.0;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double dt = static_cast<double>(t) - t_mean;
    sxy += dt * (x[t] - s.mean);
    sxx += dt * dt;
  }
  s.slope = sxy / sxx;
  return s;
}

Tensor stats_token(std::span<const double> x, const Tensor& weight, const Tensor& bias) {
  const auto values = compute_stats(x).as_array();
  Tensor stats = Tensor::from({1, StatsVector::kSize}, {values.begin(), values.end()});
  return linear(stats, weight, bias);
}

}  // namespace vitro
