// SPDX-License-Identifier: Apache-2.0
#include "vitro/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "vitro/error.hpp"
#include "vitro/rng.hpp"

namespace vitro {

namespace {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.push_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

}  // namespace

TemplateTokenizer::TemplateTokenizer(std::span<const std::string> templates) {
  std::set<std::string, std::less<>> vocab;
  for (const std::string& t : templates) {
    for (std::string_view w : split_words(t)) {
      if (w == kPseudoSlot || w == kSharedSlot) continue;
      if (is_marker(w)) throw TokenizerError("template word '" + std::string(w) + "' collides with a marker");
      vocab.emplace(w);
    }
  }
  for (std::string_view m : {kPatch, kPseudo, kShared, kStats}) words_.emplace_back(m);
  words_.insert(words_.end(), vocab.begin(), vocab.end());
  for (TokenId i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], i);
}

bool TemplateTokenizer::is_marker(std::string_view word) {
  return word == kPatch || word == kPseudo || word == kShared || word == kStats;
}

std::vector<TokenId> TemplateTokenizer::tokenize(std::string_view text) const {
  std::vector<TokenId> out;
  for (std::string_view w : split_words(text)) {
    if (w == kPseudoSlot) {
      out.push_back(id(kPseudo));
    } else if (w == kSharedSlot) {
      out.push_back(id(kShared));
    } else {
      out.push_back(id(w));
    }
  }
  return out;
}

TokenId TemplateTokenizer::id(std::string_view word) const {
  auto it = ids_.find(word);
  if (it == ids_.end()) throw TokenizerError("unknown word '" + std::string(word) + "'");
  return it->second;
}

const std::string& TemplateTokenizer::word(TokenId id) const {
  if (id >= words_.size()) throw TokenizerError("unknown token id " + std::to_string(id));
  return words_[id];
}

void BackboneConfig::validate() const {
  if (width == 0 || heads == 0 || layers == 0 || max_seq == 0) {
    throw ConfigError("backbone config: width, heads, layers and max_seq must be positive");
  }
  if (width % heads != 0) {
    throw ConfigError("backbone config: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

FrozenBackbone::FrozenBackbone(const BackboneConfig& cfg, TemplateTokenizer tokenizer)
    : cfg_(cfg), tokenizer_(std::move(tokenizer)) {
  cfg_.validate();
  const std::size_t d = cfg_.width;
  Rng rng(derive_seed(cfg_.seed, "backbone.layers"));
  auto weight = [&](std::size_t out, std::size_t in) { return normal_tensor(rng, {out, in}, kInitStd, false); };
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}); };
  auto ones = [](std::size_t n) { return Tensor::full({n}, 1.0); };
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    BackboneLayer layer;
    layer.ln1_gain = ones(d);
    layer.ln1_bias = zeros(d);
    layer.query_w = weight(d, d);
    layer.query_b = zeros(d);
    layer.key_w = weight(d, d);
    layer.key_b = zeros(d);
    layer.value_w = weight(d, d);
    layer.value_b = zeros(d);
    layer.out_w = weight(d, d);
    layer.out_b = zeros(d);
    layer.ln2_gain = ones(d);
    layer.ln2_bias = zeros(d);
    layer.fc_w = weight(4 * d, d);
    layer.fc_b = zeros(4 * d);
    layer.proj_w = weight(d, 4 * d);
    layer.proj_b = zeros(d);
    layers_.push_back(std::move(layer));
  }
  final_gain_ = ones(d);
  final_bias_ = zeros(d);

  // Separate stream so layer weights do not depend on the template vocabulary.
  Rng table_rng(derive_seed(cfg_.seed, "backbone.tokens"));
  token_table_ = normal_tensor(table_rng, {tokenizer_.size(), d}, kInitStd, false);

  std::vector<double> pe(cfg_.max_seq * d);
  for (std::size_t pos = 0; pos < cfg_.max_seq; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(angle);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(angle);
    }
  }
  position_table_ = Tensor::from({cfg_.max_seq, d}, std::move(pe));
}

Tensor FrozenBackbone::forward(const Tensor& seq) const { return forward(seq, AttentionMask{true, {}}); }

Tensor FrozenBackbone::forward(const Tensor& seq, const AttentionMask& mask) const {
  if (seq.rank() != 2 || seq.shape()[1] != cfg_.width) {
    throw DimensionError("backbone forward: expected [L x " + std::to_string(cfg_.width) + "], got " +
                         shape_str(seq.shape()));
  }
  if (seq.shape()[0] > cfg_.max_seq) {
    throw InputError("backbone forward: sequence length " + std::to_string(seq.shape()[0]) + " exceeds max_seq " +
                     std::to_string(cfg_.max_seq));
  }
  AttentionMask causal = mask;
  causal.causal = true;
  Tensor x = seq;
  for (const BackboneLayer& layer : layers_) {
    Tensor h = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
    Tensor q = linear(h, layer.query_w, layer.query_b);
    Tensor k = linear(h, layer.key_w, layer.key_b);
    Tensor v = linear(h, layer.value_w, layer.value_b);
    Tensor attn = multi_head_attention(q, k, v, cfg_.heads, causal).output;
    x = add(x, linear(attn, layer.out_w, layer.out_b));
    Tensor h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
    Tensor mlp = linear(gelu(linear(h2, layer.fc_w, layer.fc_b)), layer.proj_w, layer.proj_b);
    x = add(x, mlp);
  }
  return layer_norm(x, final_gain_, final_bias_);
}

Tensor FrozenBackbone::embed_text(std::span<const TokenId> tokens) const {
  for (TokenId t : tokens) {
    if (t >= tokenizer_.size()) throw TokenizerError("unknown token id " + std::to_string(t));
  }
  if (tokens.empty()) return Tensor::zeros({0, cfg_.width});
  return gather_rows(token_table_, tokens);
}

Tensor FrozenBackbone::positions(std::size_t length) const {
  if (length > cfg_.max_seq) {
    throw InputError("positions: length " + std::to_string(length) + " exceeds max_seq " +
                     std::to_string(cfg_.max_seq));
  }
  return slice_rows(position_table_, 0, length);
}

std::vector<std::pair<std::string, Tensor>> FrozenBackbone::named_weights() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const BackboneLayer& L = layers_[l];
    const std::string p = "backbone.layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gain", L.ln1_gain);
    out.emplace_back(p + "ln1.bias", L.ln1_bias);
    out.emplace_back(p + "attn.query.weight", L.query_w);
    out.emplace_back(p + "attn.query.bias", L.query_b);
    out.emplace_back(p + "attn.key.weight", L.key_w);
    out.emplace_back(p + "attn.key.bias", L.key_b);
    out.emplace_back(p + "attn.value.weight", L.value_w);
    out.emplace_back(p + "attn.value.bias", L.value_b);
    out.emplace_back(p + "attn.out.weight", L.out_w);
    out.emplace_back(p + "attn.out.bias", L.out_b);
    out.emplace_back(p + "ln2.gain", L.ln2_gain);
    out.emplace_back(p + "ln2.bias", L.ln2_bias);
    out.emplace_back(p + "mlp.fc.weight", L.fc_w);
    out.emplace_back(p + "mlp.fc.bias", L.fc_b);
    out.emplace_back(p + "mlp.proj.weight", L.proj_w);
    out.emplace_back(p + "mlp.proj.bias", L.proj_b);
  }
  out.emplace_back("backbone.final_ln.gain", final_gain_);
  out.emplace_back("backbone.final_ln.bias", final_bias_);
  out.emplace_back("backbone.token_table", token_table_);
  out.emplace_back("backbone.positions", position_table_);
  return out;
}

Checkpoint FrozenBackbone::to_checkpoint() const {
  Checkpoint ckpt;
  for (const auto& [name, t] : named_weights()) ckpt.add(name, t);
  return ckpt;
}

std::string FrozenBackbone::weights_sha256() const { return sha256_hex(to_checkpoint().to_bytes()); }

FrozenBackbone init_backbone(const BackboneConfig& cfg, std::span<const std::string> templates) {
  return FrozenBackbone(cfg, TemplateTokenizer(templates));
}

}  // namespace vitro
