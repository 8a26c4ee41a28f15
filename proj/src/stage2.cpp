// SPDX-License-Identifier: Apache-2.0
#include "vitro/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitro/error.hpp"
#include "vitro/rng.hpp"

namespace vitro {

std::string_view mode_name(Stage2Mode mode) { return mode == Stage2Mode::Sim ? "sim" : "attn"; }

Stage2Mode parse_mode(std::string_view text) {
  if (text == "sim") return Stage2Mode::Sim;
  if (text == "attn") return Stage2Mode::Attn;
  throw ConfigError("unknown stage-2 mode '" + std::string(text) + "' (expected sim or attn)");
}

std::size_t Stage2Config::resolved_core_size(std::size_t vocab_size) const {
  if (core_size != 0) return core_size;
  const std::size_t wanted = std::max<std::size_t>(8, vocab_size / 16);
  return vocab_size > 1 ? std::min(wanted, vocab_size - 1) : wanted;
}

void Stage2Config::validate(std::size_t vocab_size, std::size_t width) const {
  const std::size_t core = resolved_core_size(vocab_size);
  if (batch_size < 1) throw ConfigError("stage2: batch size must be >= 1");
  if (lr < 0.0) throw ConfigError("stage2: learning rate must be >= 0");
  if (core < 1) throw ConfigError("stage2: core lexicon size must be >= 1");
  if (core >= vocab_size) {
    throw ConfigError("stage2: core lexicon size " + std::to_string(core) + " must be smaller than vocabulary size " +
                      std::to_string(vocab_size));
  }
  if (mode == Stage2Mode::Sim && (top_k < 1 || top_k >= core)) {
    throw ConfigError("stage2: top-k " + std::to_string(top_k) + " must satisfy 1 <= k < " + std::to_string(core));
  }
  if (mode == Stage2Mode::Attn && (heads == 0 || width % heads != 0)) {
    throw ConfigError("stage2: " + std::to_string(heads) + " heads do not divide width " + std::to_string(width));
  }
}

CoreLexicon CoreLexicon::init(std::size_t core_size, std::size_t vocab_size, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "core-lexicon"));
  return {normal_tensor(rng, {core_size, vocab_size}, 1.0 / std::sqrt(static_cast<double>(vocab_size)), true),
          Tensor::zeros({core_size}, true)};
}

Tensor core_lexicon(const Tensor& words, const Tensor& weight, const Tensor& bias) {
  return add_per_row(matmul(weight, words), bias);
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  constexpr double kNormEps = 1e-12;
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::max(std::sqrt(na), kNormEps) * std::max(std::sqrt(nb), kNormEps));
}

TopK cosine_topk(const Tensor& patches, const Tensor& core, std::size_t k) {
  if (patches.rank() != 2 || core.rank() != 2 || patches.shape()[1] != core.shape()[1]) {
    throw DimensionError("cosine_topk: patches " + shape_str(patches.shape()) + " and core " +
                         shape_str(core.shape()) + " are incompatible");
  }
  const std::size_t rows = patches.shape()[0], n_core = core.shape()[0], d = core.shape()[1];
  if (k < 1 || k >= n_core) {
    throw ConfigError("cosine_topk: k = " + std::to_string(k) + " must satisfy 1 <= k < " + std::to_string(n_core));
  }
  TopK out{rows, k, {}, {}};
  out.indices.reserve(rows * k);
  out.scores.reserve(rows * k);
  std::vector<double> sims(n_core);
  std::vector<std::size_t> order(n_core);
  for (std::size_t r = 0; r < rows; ++r) {
    auto p = patches.data().subspan(r * d, d);
    for (std::size_t m = 0; m < n_core; ++m) sims[m] = cosine_similarity(p, core.data().subspan(m * d, d));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); });
    for (std::size_t j = 0; j < k; ++j) {
      out.indices.push_back(order[j]);
      out.scores.push_back(sims[order[j]]);
    }
  }
  return out;
}

AssembledPrompt augment_embedding(const Tensor& patch_embeddings, const Tensor& core, const TopK& selection,
                                  const Tensor& shared, const Tensor& stats_token, const FrozenBackbone& backbone) {
  const std::size_t d = backbone.width();
  if (selection.k == 0) throw ConfigError("augment_embedding: k must be >= 1");
  if (patch_embeddings.rank() != 2 || patch_embeddings.shape()[0] != selection.rows) {
    throw DimensionError("augment_embedding: selection does not cover every patch");
  }
  AssembledPrompt out;
  std::vector<Tensor> parts;
  for (std::size_t p = 0; p < selection.rows; ++p) {
    parts.push_back(slice_rows(patch_embeddings, p, p + 1));
    out.layout.append(SegmentKind::Patch, 1);
    parts.push_back(gather_rows(core, selection.row_indices(p)));
    out.layout.append(SegmentKind::Lexicon, selection.k);
  }
  parts.push_back(reshape(shared, {1, d}));
  out.layout.append(SegmentKind::Shared, 1);
  parts.push_back(reshape(stats_token, {1, d}));
  out.layout.append(SegmentKind::Stats, 1);
  out.sequence = add(concat(parts, 0), backbone.positions(out.layout.length));
  return out;
}

CrossAttnParams CrossAttnParams::init(std::size_t width, std::size_t heads, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "cross-attention"));
  const double std = 1.0 / std::sqrt(static_cast<double>(width));
  CrossAttnParams p;
  p.heads = heads;
  p.query = normal_tensor(rng, {width, width}, std, true);
  p.key = normal_tensor(rng, {width, width}, std, true);
  p.value = normal_tensor(rng, {width, width}, std, true);
  return p;
}

AttentionResult cross_attention(const Tensor& patch_embeddings, const Tensor& core, const CrossAttnParams& params) {
  if (params.heads == 0 || core.shape()[1] % params.heads != 0) {
    throw ConfigError("cross_attention: " + std::to_string(params.heads) + " heads do not divide width " +
                      std::to_string(core.shape()[1]));
  }
  Tensor q = matmul(patch_embeddings, params.query);
  Tensor k = matmul(core, params.key);
  Tensor v = matmul(core, params.value);
  return multi_head_attention(q, k, v, params.heads);
}

std::vector<Tensor> Stage2Model::trainable() const {
  auto out = adapter.tensors();
  out.push_back(lexicon.weight);
  out.push_back(lexicon.bias);
  if (mode == Stage2Mode::Attn)
    for (const Tensor& t : attention.tensors()) out.push_back(t);
  return out;
}

Checkpoint Stage2Model::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.add_text("meta.kind", "stage2");
  ckpt.add_text("meta.mode", mode_name(mode));
  write_backbone_config(ckpt, backbone, backbone_sha256);
  write_patch_config(ckpt, patch, horizon);
  const std::vector<double> sizes{static_cast<double>(top_k), static_cast<double>(attention.heads)};
  ckpt.add("meta.stage2", Shape{sizes.size()}, sizes);
  std::string joined;
  for (const std::string& t : templates) joined += t + '\n';
  ckpt.add_text("meta.templates", joined);
  adapter.write(ckpt);
  ckpt.add("vocab.words", words);
  ckpt.add("vocab.shared", shared);
  ckpt.add("lexicon.weight", lexicon.weight);
  ckpt.add("lexicon.bias", lexicon.bias);
  if (mode == Stage2Mode::Attn) {
    ckpt.add("attention.query", attention.query);
    ckpt.add("attention.key", attention.key);
    ckpt.add("attention.value", attention.value);
  }
  return ckpt;
}

Stage2Model Stage2Model::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.text("meta.kind") != "stage2") throw FormatError("checkpoint is not a stage-2 checkpoint");
  Stage2Model m;
  m.mode = parse_mode(ckpt.text("meta.mode"));
  m.backbone = read_backbone_config(ckpt);
  m.backbone_sha256 = ckpt.text("meta.backbone.sha256");
  m.patch = read_patch_config(ckpt, &m.horizon);
  const auto& sizes = ckpt.get("meta.stage2").values;
  if (sizes.size() != 2) throw FormatError("checkpoint: malformed meta.stage2");
  m.top_k = static_cast<std::size_t>(sizes[0]);
  m.attention.heads = static_cast<std::size_t>(sizes[1]);
  const std::string joined = ckpt.text("meta.templates");
  for (std::size_t start = 0, nl; (nl = joined.find('\n', start)) != std::string::npos; start = nl + 1) {
    m.templates.push_back(joined.substr(start, nl - start));
  }
  m.adapter = AdapterParams::read(ckpt);
  m.words = ckpt.tensor("vocab.words");
  m.shared = ckpt.tensor("vocab.shared");
  m.lexicon = {ckpt.tensor("lexicon.weight", true), ckpt.tensor("lexicon.bias", true)};
  if (m.mode == Stage2Mode::Attn) {
    m.attention.query = ckpt.tensor("attention.query", true);
    m.attention.key = ckpt.tensor("attention.key", true);
    m.attention.value = ckpt.tensor("attention.value", true);
  }
  return m;
}

Stage2Model Stage2Model::load(const std::filesystem::path& path) { return from_checkpoint(Checkpoint::load(path)); }

Stage2Forward stage2_forward(const Stage2Model& model, const FrozenBackbone& backbone,
                             std::span<const double> lookback) {
  if (lookback.size() != model.patch.lookback) {
    throw InputError("stage2: window length " + std::to_string(lookback.size()) + " does not match lookback " +
                     std::to_string(model.patch.lookback));
  }
  Stage2Forward out;
  out.norm = revin_normalize(lookback);
  Tensor patches = make_patches(out.norm.values, model.patch);
  Tensor embedded = embed_patches(patches, model.adapter.patch_weight, model.adapter.patch_bias);
  Tensor stats = stats_token(lookback, model.adapter.stats_weight, model.adapter.stats_bias);
  Tensor core = core_lexicon(model.words, model.lexicon.weight, model.lexicon.bias);

  AssembledPrompt prompt;
  if (model.mode == Stage2Mode::Sim) {
    out.selection = cosine_topk(embedded, core, model.top_k);
    prompt = augment_embedding(embedded, core, out.selection, model.shared, stats, backbone);
  } else {
    AttentionResult attn = cross_attention(embedded, core, model.attention);
    out.attention = std::move(attn.weights);
    const std::size_t d = backbone.width();
    prompt.layout.append(SegmentKind::Patch, attn.output.shape()[0]);
    prompt.layout.append(SegmentKind::Shared, 1);
    prompt.layout.append(SegmentKind::Stats, 1);
    Tensor seq = concat({attn.output, reshape(model.shared, {1, d}), reshape(stats, {1, d})}, 0);
    prompt.sequence = add(seq, backbone.positions(prompt.layout.length));
  }
  Tensor hidden = backbone.forward(prompt.sequence, prompt.layout.attention_mask());
  out.prediction = head_g(gather_rows(hidden, prompt.layout.patch_positions), model.adapter.head_weight,
                          model.adapter.head_bias);
  return out;
}

FrozenBackbone rebuild_backbone(const Stage2Model& model) {
  FrozenBackbone backbone = init_backbone(model.backbone, model.templates);
  if (!model.backbone_sha256.empty() && backbone.weights_sha256() != model.backbone_sha256) {
    throw FormatError("rebuilt backbone does not match the checkpoint's weight hash");
  }
  return backbone;
}

Forecaster::Forecaster(Stage2Model model) : model_(std::move(model)), backbone_(rebuild_backbone(model_)) {}

Series Forecaster::predict(std::span<const double> window) const {
  Stage2Forward fw = stage2_forward(model_, backbone_, window);
  return revin_denormalize(fw.prediction.data(), fw.norm.state);
}

std::vector<Series> Forecaster::predict_batch(const std::vector<Series>& windows) const {
  std::vector<Series> out;
  out.reserve(windows.size());
  for (const Series& w : windows) out.push_back(predict(w));
  return out;
}

std::vector<double> Forecaster::mean_attention(const std::vector<Series>& windows) const {
  if (model_.mode != Stage2Mode::Attn) throw ConfigError("attention weights exist only in attn mode");
  std::vector<double> acc;
  for (const Series& w : windows) {
    Stage2Forward fw = stage2_forward(model_, backbone_, w);
    if (acc.empty()) acc.assign(fw.attention.size(), 0.0);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += fw.attention[i];
  }
  for (double& v : acc) v /= static_cast<double>(std::max<std::size_t>(windows.size(), 1));
  return acc;
}

VocabOverride VocabOverride::random(std::size_t vocab_size, std::size_t width, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "random-vocabulary"));
  Tensor words = normal_tensor(rng, {vocab_size, width}, Vocabulary::kInitStd, false);
  Tensor shared = normal_tensor(rng, {1, width}, Vocabulary::kInitStd, false);
  return {std::move(words), std::move(shared)};
}

Stage2Result train_stage2(const Stage1Checkpoint& stage1, const std::vector<WindowInstance>& windows,
                          const Stage2Config& cfg, const std::optional<VocabOverride>& vocab) {
  if (windows.empty()) throw InputError("train_stage2: empty dataset");
  const std::size_t n = stage1.params.vocab.size();
  const std::size_t d = stage1.params.vocab.width();
  cfg.validate(n, d);

  Stage2Model model;
  model.mode = cfg.mode;
  model.adapter = stage1.params.adapter.clone();
  if (vocab) {
    if (vocab->words.shape() != stage1.params.vocab.words().shape() ||
        vocab->shared.numel() != stage1.params.vocab.shared().numel()) {
      throw DimensionError("train_stage2: vocabulary override has the wrong shape");
    }
    model.words = vocab->words.detach();
    model.shared = vocab->shared.detach();
  } else {
    model.words = stage1.params.vocab.words().detach();
    model.shared = stage1.params.vocab.shared().detach();
  }
  model.lexicon = CoreLexicon::init(cfg.resolved_core_size(n), n, cfg.seed);
  model.attention = cfg.mode == Stage2Mode::Attn ? CrossAttnParams::init(d, cfg.heads, cfg.seed)
                                                 : CrossAttnParams{cfg.heads, Tensor{}, Tensor{}, Tensor{}};
  model.top_k = cfg.top_k;
  model.patch = stage1.config.patch;
  model.horizon = stage1.config.horizon;
  model.backbone = stage1.backbone;
  model.templates = stage1.params.vocab.templates();
  FrozenBackbone backbone = init_backbone(model.backbone, model.templates);
  model.backbone_sha256 = backbone.weights_sha256();
  if (!stage1.backbone_sha256.empty() && model.backbone_sha256 != stage1.backbone_sha256) {
    throw FormatError("train_stage2: rebuilt backbone differs from the stage-1 backbone");
  }

  for (const WindowInstance& w : windows) {
    if (w.lookback.size() != model.patch.lookback || w.target.size() != model.horizon) {
      throw DimensionError("train_stage2: window " + std::to_string(w.id) + " does not match lookback/horizon");
    }
  }

  Adam adam(model.trainable(), {.lr = cfg.lr});
  Stage2Result result;
  Rng order_rng(derive_seed(cfg.seed, "stage2.order"));
  std::vector<std::size_t> order(windows.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Tensor loss;
      for (std::size_t j = start; j < end; ++j) {
        const WindowInstance& w = windows[order[j]];
        Stage2Forward fw = stage2_forward(model, backbone, w.lookback);
        std::vector<double> y;
        for (double v : w.target) y.push_back((v - fw.norm.state.mean) / fw.norm.state.stddev);
        const std::size_t n = y.size();
        Tensor l = mse_loss(fw.prediction, Tensor::from({n}, std::move(y)));
        loss = j == start ? l : add(loss, l);
      }
      loss = scale(loss, 1.0 / static_cast<double>(end - start));
      backward(loss);
      adam.step();
      result.loss_trace.push_back(loss.item());
    }
  }
  if (backbone.weights_sha256() != model.backbone_sha256) throw ContractError("train_stage2: backbone weights changed");
  result.model = std::move(model);
  return result;
}

Stage2Result train_stage2(const std::filesystem::path& stage1_path, const std::vector<WindowInstance>& windows,
                          const Stage2Config& cfg) {
  if (!std::filesystem::exists(stage1_path)) {
    throw IoError("stage-1 checkpoint '" + stage1_path.string() + "' not found");
  }
  return train_stage2(Stage1Checkpoint::load(stage1_path), windows, cfg);
}

}  // namespace vitro
