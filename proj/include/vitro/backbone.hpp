// SPDX-License-Identifier: Apache-2.0
//
// Frozen decoder-only transformer used as f(.), plus the fixed word-level
// tokenizer for prompt-template text.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vitro/checkpoint.hpp"
#include "vitro/tensor.hpp"

namespace vitro {

using TokenId = std::size_t;

class TemplateTokenizer {
 public:
  static constexpr std::string_view kPatch = "<PATCH>";
  static constexpr std::string_view kPseudo = "<PSEUDO>";
  static constexpr std::string_view kShared = "<SHARED>";
  static constexpr std::string_view kStats = "<STATS>";
  // Slot spellings inside template strings.
  static constexpr std::string_view kPseudoSlot = "{P}";
  static constexpr std::string_view kSharedSlot = "{S}";

  // Vocabulary = markers (ids 0..3) followed by the sorted word set of the templates.
  explicit TemplateTokenizer(std::span<const std::string> templates);

  // Whitespace-separated words; slots map to the pseudo/shared markers.
  std::vector<TokenId> tokenize(std::string_view text) const;
  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  static bool is_marker(std::string_view word);

 private:
  std::vector<std::string> words_;
  std::map<std::string, TokenId, std::less<>> ids_;
};

struct BackboneConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t layers = 3;
  std::size_t max_seq = 256;
  std::uint64_t seed = 20240917;

  void validate() const;
};

struct BackboneLayer {
  Tensor ln1_gain, ln1_bias;
  Tensor query_w, query_b, key_w, key_b, value_w, value_b, out_w, out_b;
  Tensor ln2_gain, ln2_bias;
  Tensor fc_w, fc_b, proj_w, proj_b;
};

class FrozenBackbone {
 public:
  static constexpr double kInitStd = 0.02;

  // Seeded init; every tensor is frozen.
  FrozenBackbone(const BackboneConfig& cfg, TemplateTokenizer tokenizer);

  // Pre-norm decoder stack. The mask is always causal; `always_visible`
  // entries may open extra keys. Throws InputError if the sequence is longer
  // than max_seq.
  Tensor forward(const Tensor& seq, const AttentionMask& mask) const;
  Tensor forward(const Tensor& seq) const;

  // Frozen token-table lookup.
  Tensor embed_text(std::span<const TokenId> tokens) const;
  // Sinusoidal encodings for positions [0, length).
  Tensor positions(std::size_t length) const;

  const BackboneConfig& config() const { return cfg_; }
  const TemplateTokenizer& tokenizer() const { return tokenizer_; }
  std::size_t width() const { return cfg_.width; }

  // Every weight under a stable name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_weights() const;
  Checkpoint to_checkpoint() const;
  std::string weights_sha256() const;

 private:
  BackboneConfig cfg_;
  TemplateTokenizer tokenizer_;
  std::vector<BackboneLayer> layers_;
  Tensor final_gain_, final_bias_;
  Tensor token_table_;
  Tensor position_table_;
};

FrozenBackbone init_backbone(const BackboneConfig& cfg, std::span<const std::string> templates);

}  // namespace vitro
