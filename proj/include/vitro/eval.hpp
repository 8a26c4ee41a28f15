// SPDX-License-Identifier: Apache-2.0
//
// Metrics, run configuration, horizon sweeps and report emission.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitro/backbone.hpp"
#include "vitro/data.hpp"
#include "vitro/stage1.hpp"
#include "vitro/stage2.hpp"

namespace vitro {

// Both throw DimensionError on a length mismatch or empty input.
double metric_mse(std::span<const double> pred, std::span<const double> target);
double metric_mae(std::span<const double> pred, std::span<const double> target);

// Flat key=value run description. Blank lines and lines starting with '#'
// are ignored; unknown keys are a ConfigError.
struct RunConfig {
  std::string source = "synthetic";  // synthetic | csv
  std::string csv_path;
  std::vector<std::string> csv_columns;
  std::string generator = "sines";
  SynthParams synth;
  std::size_t window_stride = 16;
  double train_fraction = 0.7;
  double val_fraction = 0.1;
  bool scale = true;
  std::size_t lookback = 64;
  std::vector<std::size_t> horizons{8, 16, 24, 32};
  PatchConfig patch;
  BackboneConfig backbone;
  std::size_t stage1_epochs = 20;
  std::size_t stage1_batch = 16;
  double stage1_lr = 1e-2;
  std::size_t stage2_epochs = 20;
  std::size_t stage2_batch = 16;
  double stage2_lr = 1e-3;
  std::size_t core_size = 0;
  std::size_t top_k = 4;
  std::size_t attn_heads = 4;
  Stage2Mode mode = Stage2Mode::Sim;
  std::uint64_t seed = 1;
  std::string out = "runs/default";

  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);
  // Every key with its current value, parseable by parse().
  std::string to_text() const;
  void validate() const;

  DatasetSpec dataset_spec(std::size_t horizon) const;
  TrainRunConfig stage1_config(std::size_t horizon) const;
  Stage2Config stage2_config() const;
};

// Channels for the configured source; synthetic data uses `seed`.
std::vector<Series> load_channels(const RunConfig& cfg);

struct HorizonMetrics {
  std::size_t horizon = 0;
  double mse = 0.0;
  double mae = 0.0;

  bool operator==(const HorizonMetrics&) const = default;
};

// Per-horizon MSE and MAE in original units plus their arithmetic mean.
struct MetricReport {
  std::string label;
  std::vector<HorizonMetrics> rows;

  HorizonMetrics average() const;
  // label,horizon,mse,mae with a final "avg" row.
  void write_csv(const std::filesystem::path& path) const;
  bool operator==(const MetricReport&) const = default;
};

// Mean MSE/MAE over every window and step after mapping back to original units.
HorizonMetrics evaluate_forecaster(const Forecaster& forecaster, const std::vector<WindowInstance>& windows,
                                   const StandardScaler& scaler);
// Repeat the last lookback value across the horizon.
HorizonMetrics evaluate_naive(const std::vector<WindowInstance>& windows, const StandardScaler& scaler);

void write_loss_csv(const std::filesystem::path& path, std::span<const double> trace);
// One row per (head, core word): head,word,p_0..p_{P-1}.
void write_attention_csv(const std::filesystem::path& path, std::span<const double> weights, std::size_t heads,
                         std::size_t patches, std::size_t words);

struct HorizonRun {
  std::size_t horizon = 0;
  std::vector<double> stage1_loss;
  std::vector<double> stage2_loss;
  std::string backbone_sha256;
  HorizonMetrics naive;
};

struct PipelineResult {
  MetricReport report;
  std::vector<HorizonRun> runs;
};

// stage1 -> stage2(mode) -> test evaluation for each horizon. With an output
// directory, writes metrics.csv and per-horizon h<tau>/ artifacts.
PipelineResult run_pipeline(const RunConfig& cfg, const std::optional<std::filesystem::path>& out = std::nullopt);

struct VocabComparison {
  MetricReport vitro;
  MetricReport random;
  std::vector<std::string> backbone_sha256;  // one per horizon, shared by both runs

  // horizon,vitro_mse,random_mse,delta_mse,vitro_mae,random_mae,delta_mae
  // with delta = vitro - random and a final "avg" row.
  void write_csv(const std::filesystem::path& path) const;
};

// Stage 2 twice per horizon, with the stage-1 vocabulary and with a seeded
// random one that never saw training; everything else identical.
VocabComparison compare_vocab(const RunConfig& cfg, const std::optional<std::filesystem::path>& out = std::nullopt);

}  // namespace vitro
