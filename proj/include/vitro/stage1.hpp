// SPDX-License-Identifier: Apache-2.0
//
// Stage 1: vocabulary inversion. V, s and the adapter layers around the
// frozen backbone are optimised jointly against the forecasting MSE.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vitro/backbone.hpp"
#include "vitro/checkpoint.hpp"
#include "vitro/data.hpp"
#include "vitro/optim.hpp"
#include "vitro/preprocessing.hpp"
#include "vitro/rng.hpp"
#include "vitro/vocabulary.hpp"

namespace vitro {

// Trainable layers shared by both stages: patch embedder (W_e, b_e), stats
// projector (W_s, b_s) and forecast head g (W, b).
struct AdapterParams {
  Tensor patch_weight;  // [d x L_p]
  Tensor patch_bias;    // [d]
  Tensor stats_weight;  // [d x 6]
  Tensor stats_bias;    // [d]
  Tensor head_weight;   // [tau x P*d]
  Tensor head_bias;     // [tau]

  static AdapterParams init(std::size_t width, const PatchConfig& patch, std::size_t horizon, std::uint64_t seed);

  std::vector<Tensor> tensors() const;
  AdapterParams clone() const;
  void write(Checkpoint& ckpt, const std::string& prefix = "adapter.") const;
  static AdapterParams read(const Checkpoint& ckpt, const std::string& prefix = "adapter.");
};

// Flattens h_patches [P x d] row-major and applies W h + b.
Tensor head_g(const Tensor& hidden_patches, const Tensor& weight, const Tensor& bias);

struct TrainRunConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 1e-2;
  std::uint64_t seed = 1;
  PatchConfig patch{};
  std::size_t horizon = 16;
  std::vector<std::string> templates = default_templates();
  std::size_t log_every = 1;

  void validate() const;
};

struct Stage1Params {
  AdapterParams adapter;
  Vocabulary vocab;

  std::vector<Tensor> trainable() const;
};

// Forward for one window: RevIN -> patches -> prompt -> backbone -> head.
// Returns the prediction in normalised units.
struct WindowForward {
  Tensor prediction;
  NormalizedWindow norm;
};

WindowForward stage1_forward(const WindowInstance& window, std::size_t template_id, const Stage1Params& params,
                             const FrozenBackbone& backbone, const PatchConfig& patch);

// Mean normalised-space MSE over the batch followed by one Adam update.
double stage1_step(std::span<const WindowInstance> batch, std::span<const std::size_t> template_ids,
                   Stage1Params& params, Adam& adam, const FrozenBackbone& backbone, const PatchConfig& patch);

struct Stage1Checkpoint {
  Stage1Params params;
  BackboneConfig backbone;
  std::string backbone_sha256;
  TrainRunConfig config;
  double final_loss = 0.0;

  Checkpoint to_checkpoint() const;
  static Stage1Checkpoint from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static Stage1Checkpoint load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }
};

struct Stage1Result {
  Stage1Checkpoint checkpoint;
  std::vector<double> loss_trace;          // one entry per optimizer step
  std::vector<std::size_t> row_updates;    // steps in which each V row received gradient
};

Stage1Result train_stage1(const std::vector<WindowInstance>& windows, const TrainRunConfig& cfg,
                          const BackboneConfig& backbone_cfg);

// Mean of the first and last `fraction` of a loss trace.
double smoothed_head(std::span<const double> trace, double fraction = 0.1);
double smoothed_tail(std::span<const double> trace, double fraction = 0.1);

void write_backbone_config(Checkpoint& ckpt, const BackboneConfig& cfg, const std::string& sha);
BackboneConfig read_backbone_config(const Checkpoint& ckpt);
void write_patch_config(Checkpoint& ckpt, const PatchConfig& patch, std::size_t horizon);
PatchConfig read_patch_config(const Checkpoint& ckpt, std::size_t* horizon);

}  // namespace vitro
