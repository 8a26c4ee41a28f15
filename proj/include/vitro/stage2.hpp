// SPDX-License-Identifier: Apache-2.0
//
// Stage 2: forecasting with a frozen learned vocabulary, either by selecting
// the most similar core-lexicon rows per patch ("sim") or by cross-attending
// from patches to the core lexicon ("attn").
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
#include "vitro/tensor.hpp"
#include "vitro/vocabulary.hpp"

namespace vitro {

enum class Stage2Mode { Sim, Attn };

std::string_view mode_name(Stage2Mode mode);
Stage2Mode parse_mode(std::string_view text);

struct Stage2Config {
  Stage2Mode mode = Stage2Mode::Sim;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::size_t core_size = 0;  // 0 selects max(8, n / 16), capped below n
  std::size_t top_k = 4;
  std::size_t heads = 4;
  std::size_t log_every = 1;

  std::size_t resolved_core_size(std::size_t vocab_size) const;
  void validate(std::size_t vocab_size, std::size_t width) const;
};

// C = W_v V + b_v with W_v [n' x n]; b_v [n'] is added across each row.
struct CoreLexicon {
  Tensor weight;
  Tensor bias;

  static CoreLexicon init(std::size_t core_size, std::size_t vocab_size, std::uint64_t seed);
};

Tensor core_lexicon(const Tensor& words, const Tensor& weight, const Tensor& bias);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

// Per patch row, the k core rows with the largest cosine similarity, in
// descending score order; ties go to the lower index. Not differentiable.
struct TopK {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;  // rows x k
  std::vector<double> scores;        // rows x k

  std::span<const std::size_t> row_indices(std::size_t r) const { return {indices.data() + r * k, k}; }
  std::span<const double> row_scores(std::size_t r) const { return {scores.data() + r * k, k}; }
};

TopK cosine_topk(const Tensor& patches, const Tensor& core, std::size_t k);

// For each patch p: [E_p; c_p1; ...; c_pk], then s and e_stats once,
// plus sinusoidal positions.
AssembledPrompt augment_embedding(const Tensor& patch_embeddings, const Tensor& core, const TopK& selection,
                                  const Tensor& shared, const Tensor& stats_token, const FrozenBackbone& backbone);

// Per-head projections stored as [d x d] matrices whose column block
// [h*d_h, (h+1)*d_h) is W_h for head h.
struct CrossAttnParams {
  std::size_t heads = 1;
  Tensor query;
  Tensor key;
  Tensor value;

  static CrossAttnParams init(std::size_t width, std::size_t heads, std::uint64_t seed);
  std::vector<Tensor> tensors() const { return {query, key, value}; }
};

// Z_h = softmax(Q_h K_h^T / sqrt(d_h)) V_h with Q = E W^Q, K = C W^K, V = C W^V.
AttentionResult cross_attention(const Tensor& patch_embeddings, const Tensor& core, const CrossAttnParams& params);

struct Stage2Model {
  Stage2Mode mode = Stage2Mode::Sim;
  AdapterParams adapter;
  Tensor words;   // frozen V
  Tensor shared;  // frozen s
  CoreLexicon lexicon;
  CrossAttnParams attention;  // attn mode only
  std::size_t top_k = 4;
  PatchConfig patch;
  std::size_t horizon = 0;
  BackboneConfig backbone;
  std::string backbone_sha256;
  std::vector<std::string> templates;

  std::vector<Tensor> trainable() const;
  Checkpoint to_checkpoint() const;
  static Stage2Model from_checkpoint(const Checkpoint& ckpt);
  void save(const std::filesystem::path& path) const { to_checkpoint().save(path); }
  static Stage2Model load(const std::filesystem::path& path);
};

struct Stage2Forward {
  Tensor prediction;  // normalised units
  NormalizedWindow norm;
  TopK selection;                 // sim mode
  std::vector<double> attention;  // attn mode, heads x P x n'
};

Stage2Forward stage2_forward(const Stage2Model& model, const FrozenBackbone& backbone,
                             std::span<const double> lookback);

// Rebuilds the frozen backbone for a model and checks it against the stored hash.
FrozenBackbone rebuild_backbone(const Stage2Model& model);

// Read-only inference over a trained model.
class Forecaster {
 public:
  explicit Forecaster(Stage2Model model);
  static Forecaster load(const std::filesystem::path& path) { return Forecaster(Stage2Model::load(path)); }

  // Forecast in the units of the input window.
  Series predict(std::span<const double> window) const;
  std::vector<Series> predict_batch(const std::vector<Series>& windows) const;
  // Attention weights averaged over windows, heads x P x n' (attn mode).
  std::vector<double> mean_attention(const std::vector<Series>& windows) const;

  const Stage2Model& model() const { return model_; }
  const FrozenBackbone& backbone() const { return backbone_; }

 private:
  Stage2Model model_;
  FrozenBackbone backbone_;
};

// Replacement for the learned V and s, used for controlled comparisons.
struct VocabOverride {
  Tensor words;
  Tensor shared;

  static VocabOverride random(std::size_t vocab_size, std::size_t width, std::uint64_t seed);
};

struct Stage2Result {
  Stage2Model model;
  std::vector<double> loss_trace;
};

Stage2Result train_stage2(const Stage1Checkpoint& stage1, const std::vector<WindowInstance>& windows,
                          const Stage2Config& cfg, const std::optional<VocabOverride>& vocab = std::nullopt);
// Loads the stage-1 checkpoint first; a missing file is an IoError.
Stage2Result train_stage2(const std::filesystem::path& stage1_path, const std::vector<WindowInstance>& windows,
                          const Stage2Config& cfg);

}  // namespace vitro
