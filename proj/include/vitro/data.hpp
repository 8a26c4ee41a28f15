// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion: CSV files and synthetic generators, sliding windows,
// chronological splits and train-fitted standard scaling.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitro/preprocessing.hpp"
#include "vitro/vocabulary.hpp"

namespace vitro {

struct WindowInstance {
  WindowId id = 0;
  std::size_t channel = 0;
  std::size_t offset = 0;  // index of the first lookback step in the channel
  Series lookback;         // X_i, length T
  Series target;           // Y_i, length tau
};

// Windows at offsets 0, stride, 2*stride, ... while offset + T + tau <= length.
// Ids are first_id, first_id + 1, ... in offset order.
std::vector<WindowInstance> make_windows(std::span<const double> series, std::size_t lookback, std::size_t horizon,
                                         std::size_t stride, WindowId first_id = 0, std::size_t channel = 0);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<Series> columns;  // one entry per value column
};

// One row per variable. `columns` selects value columns by header name; when
// empty, every column is used except a leading non-numeric (date) column.
std::vector<Series> load_csv(const std::filesystem::path& path, const std::vector<std::string>& columns = {});
CsvTable read_csv_table(const std::filesystem::path& path, const std::vector<std::string>& columns = {});
// Columns-as-variables layout, %.17g values.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<Series>& columns);
// Row-major layout: each entry of `rows` becomes one line.
void write_rows_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                    const std::vector<Series>& rows);
std::vector<Series> read_rows_csv(const std::filesystem::path& path);

struct SineComponent {
  double amplitude = 1.0;
  double frequency = 0.05;  // cycles per step
  double phase = 0.0;
};

struct SynthParams {
  std::size_t channels = 4;
  std::size_t length = 1200;
  double noise = 0.1;
  std::size_t components = 2;
  // When set, every channel uses exactly these sines instead of random draws.
  std::vector<SineComponent> sines;
};

// "sines": sum_j a_j sin(2 pi f_j t + phi_j) + noise
// "trend": offset + slope * t + one seasonal sine + noise
// "arma-like": ARMA(2,1) driven by Gaussian noise
std::vector<Series> synth_generate(std::string_view name, const SynthParams& params, std::uint64_t seed);

struct StandardScaler {
  std::vector<double> mean;
  std::vector<double> stddev;

  static StandardScaler fit(const std::vector<Series>& channels, std::size_t end);
  std::vector<Series> transform(const std::vector<Series>& channels) const;
  // Back to original units; identity for an unfitted scaler.
  Series inverse(std::size_t channel, std::span<const double> values) const;
};

struct DatasetSpec {
  std::size_t lookback = 64;
  std::size_t horizon = 16;
  std::size_t stride = 16;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  bool scale = true;

  void validate() const;
};

struct WindowedDataset {
  std::vector<WindowInstance> train, val, test;
  StandardScaler scaler;
  std::size_t train_end = 0;  // first time index after the train split
  std::size_t val_end = 0;    // first time index of the test split
};

// Chronological split. Train windows lie entirely before train_end; val and
// test windows take their targets from their own region and may reach back
// for lookback. Ids are unique across all three splits.
WindowedDataset build_dataset(const std::vector<Series>& channels, const DatasetSpec& spec);

}  // namespace vitro
