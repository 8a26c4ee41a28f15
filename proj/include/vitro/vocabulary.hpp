// SPDX-License-Identifier: Apache-2.0
//
// Learned time-series vocabulary: one pseudo-word embedding per training
// window plus one shared dataset embedding, and the prompt assembly that
// splices them into template text.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "vitro/backbone.hpp"
#include "vitro/checkpoint.hpp"
#include "vitro/tensor.hpp"

namespace vitro {

using WindowId = std::uint64_t;

std::vector<std::string> default_templates();
// {P} exactly once, {S} at most once. Throws ConfigError otherwise.
void validate_template(std::string_view text);

class Vocabulary {
 public:
  static constexpr double kInitStd = 0.02;

  // Seeded-normal V [n x d] and s [1 x d], both trainable.
  static Vocabulary create(std::span<const WindowId> ids, std::size_t width, std::uint64_t seed,
                           std::vector<std::string> templates = default_templates());

  Vocabulary() = default;
  Vocabulary(Tensor words, Tensor shared, std::vector<WindowId> ids, std::vector<std::string> templates);

  const Tensor& words() const { return words_; }
  const Tensor& shared() const { return shared_; }
  Tensor& words() { return words_; }
  Tensor& shared() { return shared_; }

  std::size_t size() const { return ids_.size(); }
  std::size_t width() const { return words_.shape()[1]; }
  const std::vector<WindowId>& ids() const { return ids_; }
  const std::vector<std::string>& templates() const { return templates_; }

  bool contains(WindowId id) const { return rows_.contains(id); }
  // Throws LookupError for ids outside the training set.
  std::size_t row_of(WindowId id) const;

  void set_trainable(bool trainable);

  void write(Checkpoint& ckpt, const std::string& prefix = "vocab.") const;
  static Vocabulary read(const Checkpoint& ckpt, const std::string& prefix = "vocab.");

 private:
  Tensor words_;
  Tensor shared_;
  std::vector<WindowId> ids_;
  std::unordered_map<WindowId, std::size_t> rows_;
  std::vector<std::string> templates_;
};

enum class SegmentKind { Patch, Text, Pseudo, Shared, Stats, Lexicon };

struct Segment {
  SegmentKind kind;
  std::size_t begin;
  std::size_t length;
};

// Ordered description of an assembled backbone input.
struct PromptLayout {
  std::vector<Segment> segments;
  std::size_t length = 0;
  std::vector<std::size_t> patch_positions;

  void append(SegmentKind kind, std::size_t length);
  // Causal mask where every non-patch position is visible to all queries.
  AttentionMask attention_mask() const;
};

struct AssembledPrompt {
  Tensor sequence;  // [L x d], positions already added
  PromptLayout layout;
};

// Template rows with the {P} slot replaced by v_i and {S} by s (no positions).
Tensor splice_template(WindowId id, std::size_t template_id, const Vocabulary& vocab,
                       const FrozenBackbone& backbone, PromptLayout* layout = nullptr);

// [E_i; template with v_i and s; e_stats] + sinusoidal positions.
AssembledPrompt assemble_prompt(const Tensor& patch_embeddings, WindowId id, std::size_t template_id,
                                const Vocabulary& vocab, const Tensor& stats_token, const FrozenBackbone& backbone);

// Writes <stem>.vitro (V and s), <stem>.csv (n rows of V) and <stem>.shared.csv (s).
void export_embeddings(const Vocabulary& vocab, const std::filesystem::path& stem);
// Header dim_0..dim_{d-1}, one row per embedding, %.17g values.
void write_embedding_csv(const Tensor& rows, const std::filesystem::path& path);

}  // namespace vitro
