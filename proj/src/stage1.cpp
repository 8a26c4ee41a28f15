// SPDX-License-Identifier: Apache-2.0
#include "vitro/stage1.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitro/error.hpp"

namespace vitro {

AdapterParams AdapterParams::init(std::size_t width, const PatchConfig& patch, std::size_t horizon,
                                  std::uint64_t seed) {
  const std::size_t patches = patch.patch_count();
  Rng rng(derive_seed(seed, "adapter"));
  auto fan_in = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
  AdapterParams p;
  p.patch_weight = normal_tensor(rng, {width, patch.patch_len}, fan_in(patch.patch_len), true);
  p.patch_bias = Tensor::zeros({width}, true);
  p.stats_weight = normal_tensor(rng, {width, StatsVector::kSize}, fan_in(StatsVector::kSize), true);
  p.stats_bias = Tensor::zeros({width}, true);
  p.head_weight = normal_tensor(rng, {horizon, patches * width}, fan_in(patches * width), true);
  p.head_bias = Tensor::zeros({horizon}, true);
  return p;
}

std::vector<Tensor> AdapterParams::tensors() const {
  return {patch_weight, patch_bias, stats_weight, stats_bias, head_weight, head_bias};
}

AdapterParams AdapterParams::clone() const {
  return {patch_weight.clone(), patch_bias.clone(), stats_weight.clone(),
          stats_bias.clone(),   head_weight.clone(), head_bias.clone()};
}

void AdapterParams::write(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "patch.weight", patch_weight);
  ckpt.add(prefix + "patch.bias", patch_bias);
  ckpt.add(prefix + "stats.weight", stats_weight);
  ckpt.add(prefix + "stats.bias", stats_bias);
  ckpt.add(prefix + "head.weight", head_weight);
  ckpt.add(prefix + "head.bias", head_bias);
}

AdapterParams AdapterParams::read(const Checkpoint& ckpt, const std::string& prefix) {
  return {ckpt.tensor(prefix + "patch.weight", true), ckpt.tensor(prefix + "patch.bias", true),
          ckpt.tensor(prefix + "stats.weight", true), ckpt.tensor(prefix + "stats.bias", true),
          ckpt.tensor(prefix + "head.weight", true),  ckpt.tensor(prefix + "head.bias", true)};
}

Tensor head_g(const Tensor& hidden_patches, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || weight.shape()[1] != hidden_patches.numel()) {
    throw DimensionError("head_g: weight " + shape_str(weight.shape()) + " does not match hidden states " +
                         shape_str(hidden_patches.shape()));
  }
  return linear(reshape(hidden_patches, {hidden_patches.numel()}), weight, bias);
}

void TrainRunConfig::validate() const {
  patch.validate();
  if (horizon < 1) throw ConfigError("train config: horizon must be >= 1");
  if (batch_size < 1) throw ConfigError("train config: batch size must be >= 1");
  if (lr < 0.0) throw ConfigError("train config: learning rate must be >= 0");
  if (templates.empty()) throw ConfigError("train config: no prompt templates");
  for (const std::string& t : templates) validate_template(t);
}

std::vector<Tensor> Stage1Params::trainable() const {
  auto out = adapter.tensors();
  out.push_back(vocab.words());
  out.push_back(vocab.shared());
  return out;
}

WindowForward stage1_forward(const WindowInstance& window, std::size_t template_id, const Stage1Params& params,
                             const FrozenBackbone& backbone, const PatchConfig& patch) {
  WindowForward out;
  out.norm = revin_normalize(window.lookback);
  Tensor patches = make_patches(out.norm.values, patch);
  Tensor embedded = embed_patches(patches, params.adapter.patch_weight, params.adapter.patch_bias);
  Tensor stats = stats_token(window.lookback, params.adapter.stats_weight, params.adapter.stats_bias);
  AssembledPrompt prompt = assemble_prompt(embedded, window.id, template_id, params.vocab, stats, backbone);
  Tensor hidden = backbone.forward(prompt.sequence, prompt.layout.attention_mask());
  Tensor at_patches = gather_rows(hidden, prompt.layout.patch_positions);
  out.prediction = head_g(at_patches, params.adapter.head_weight, params.adapter.head_bias);
  return out;
}

namespace {

Tensor normalized_target(const WindowInstance& w, const RevInState& state) {
  std::vector<double> y;
  y.reserve(w.target.size());
  for (double v : w.target) y.push_back((v - state.mean) / state.stddev);
  const std::size_t n = y.size();
  return Tensor::from({n}, std::move(y));
}

double stage1_step_impl(std::span<const WindowInstance> batch, std::span<const std::size_t> template_ids,
                        Stage1Params& params, Adam& adam, const FrozenBackbone& backbone, const PatchConfig& patch,
                        std::vector<std::size_t>* row_updates) {
  if (batch.empty()) throw InputError("stage1_step: empty batch");
  if (template_ids.size() != batch.size()) throw DimensionError("stage1_step: one template id per window required");
  for (const WindowInstance& w : batch) params.vocab.row_of(w.id);

  std::vector<Tensor> losses;
  losses.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    WindowForward fw = stage1_forward(batch[i], template_ids[i], params, backbone, patch);
    losses.push_back(mse_loss(fw.prediction, normalized_target(batch[i], fw.norm.state)));
  }
  Tensor loss = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) loss = add(loss, losses[i]);
  loss = scale(loss, 1.0 / static_cast<double>(losses.size()));
  backward(loss);
  if (row_updates) {
    const Tensor& words = params.vocab.words();
    const std::size_t d = words.shape()[1];
    auto grad = words.grad();
    for (std::size_t r = 0; r < words.shape()[0] && !grad.empty(); ++r) {
      const bool touched = std::any_of(grad.begin() + static_cast<std::ptrdiff_t>(r * d),
                                       grad.begin() + static_cast<std::ptrdiff_t>((r + 1) * d),
                                       [](double g) { return g != 0.0; });
      if (touched) ++(*row_updates)[r];
    }
  }
  // A template without {S} leaves s unreached; its gradient is zero.
  for (const Tensor& t : params.trainable()) t.node()->ensure_grad();
  adam.step();
  return loss.item();
}

}  // namespace

double stage1_step(std::span<const WindowInstance> batch, std::span<const std::size_t> template_ids,
                   Stage1Params& params, Adam& adam, const FrozenBackbone& backbone, const PatchConfig& patch) {
  return stage1_step_impl(batch, template_ids, params, adam, backbone, patch, nullptr);
}

Stage1Result train_stage1(const std::vector<WindowInstance>& windows, const TrainRunConfig& cfg,
                          const BackboneConfig& backbone_cfg) {
  cfg.validate();
  if (windows.empty()) throw InputError("train_stage1: empty dataset");
  for (const WindowInstance& w : windows) {
    if (w.lookback.size() != cfg.patch.lookback || w.target.size() != cfg.horizon) {
      throw DimensionError("train_stage1: window " + std::to_string(w.id) + " does not match lookback/horizon");
    }
  }
  FrozenBackbone backbone = init_backbone(backbone_cfg, cfg.templates);
  const std::string sha_before = backbone.weights_sha256();

  std::vector<WindowId> ids;
  for (const WindowInstance& w : windows) ids.push_back(w.id);
  Stage1Params params{AdapterParams::init(backbone.width(), cfg.patch, cfg.horizon, cfg.seed),
                      Vocabulary::create(ids, backbone.width(), cfg.seed, cfg.templates)};
  Adam adam(params.trainable(), {.lr = cfg.lr});

  Stage1Result result;
  result.row_updates.assign(windows.size(), 0);
  Rng order_rng(derive_seed(cfg.seed, "stage1.order"));
  Rng template_rng(derive_seed(cfg.seed, "stage1.templates"));
  std::uniform_int_distribution<std::size_t> pick_template(0, cfg.templates.size() - 1);
  std::vector<std::size_t> order(windows.size());
  std::vector<WindowInstance> batch;
  std::vector<std::size_t> template_ids;
  double last_epoch_loss = 0.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double epoch_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      template_ids.clear();
      for (std::size_t j = start; j < std::min(order.size(), start + cfg.batch_size); ++j) {
        batch.push_back(windows[order[j]]);
        template_ids.push_back(pick_template(template_rng));
      }
      const double loss =
          stage1_step_impl(batch, template_ids, params, adam, backbone, cfg.patch, &result.row_updates);
      result.loss_trace.push_back(loss);
      epoch_sum += loss;
      ++epoch_steps;
    }
    last_epoch_loss = epoch_sum / static_cast<double>(epoch_steps);
  }
  if (backbone.weights_sha256() != sha_before) throw ContractError("train_stage1: backbone weights changed");

  // Row update counters are indexed by vocabulary row, which is window order.
  result.checkpoint = Stage1Checkpoint{std::move(params), backbone_cfg, sha_before, cfg, last_epoch_loss};
  return result;
}

double smoothed_head(std::span<const double> trace, double fraction) {
  if (trace.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(trace.size())));
  return std::accumulate(trace.begin(), trace.begin() + static_cast<std::ptrdiff_t>(n), 0.0) / static_cast<double>(n);
}

double smoothed_tail(std::span<const double> trace, double fraction) {
  if (trace.empty()) return 0.0;
  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(trace.size())));
  return std::accumulate(trace.end() - static_cast<std::ptrdiff_t>(n), trace.end(), 0.0) / static_cast<double>(n);
}

void write_backbone_config(Checkpoint& ckpt, const BackboneConfig& cfg, const std::string& sha) {
  const std::vector<double> dims{static_cast<double>(cfg.width), static_cast<double>(cfg.heads),
                                 static_cast<double>(cfg.layers), static_cast<double>(cfg.max_seq)};
  ckpt.add("meta.backbone.dims", Shape{dims.size()}, dims);
  ckpt.add_u64("meta.backbone.seed", cfg.seed);
  ckpt.add_text("meta.backbone.sha256", sha);
}

BackboneConfig read_backbone_config(const Checkpoint& ckpt) {
  const auto& dims = ckpt.get("meta.backbone.dims").values;
  if (dims.size() != 4) throw FormatError("checkpoint: malformed meta.backbone.dims");
  BackboneConfig cfg;
  cfg.width = static_cast<std::size_t>(dims[0]);
  cfg.heads = static_cast<std::size_t>(dims[1]);
  cfg.layers = static_cast<std::size_t>(dims[2]);
  cfg.max_seq = static_cast<std::size_t>(dims[3]);
  cfg.seed = ckpt.u64("meta.backbone.seed");
  return cfg;
}

void write_patch_config(Checkpoint& ckpt, const PatchConfig& patch, std::size_t horizon) {
  const std::vector<double> v{static_cast<double>(patch.patch_len), static_cast<double>(patch.stride),
                              static_cast<double>(patch.lookback), static_cast<double>(horizon)};
  ckpt.add("meta.patch", Shape{v.size()}, v);
}

PatchConfig read_patch_config(const Checkpoint& ckpt, std::size_t* horizon) {
  const auto& v = ckpt.get("meta.patch").values;
  if (v.size() != 4) throw FormatError("checkpoint: malformed meta.patch");
  PatchConfig p{static_cast<std::size_t>(v[0]), static_cast<std::size_t>(v[1]), static_cast<std::size_t>(v[2])};
  if (horizon) *horizon = static_cast<std::size_t>(v[3]);
  return p;
}

Checkpoint Stage1Checkpoint::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.add_text("meta.kind", "stage1");
  write_backbone_config(ckpt, backbone, backbone_sha256);
  write_patch_config(ckpt, config.patch, config.horizon);
  const std::vector<double> train{static_cast<double>(config.epochs), static_cast<double>(config.batch_size),
                                  config.lr, static_cast<double>(config.log_every)};
  ckpt.add("meta.train", Shape{train.size()}, train);
  ckpt.add_u64("meta.train.seed", config.seed);
  ckpt.add("metrics.final_loss", Shape{}, std::vector<double>{final_loss});
  params.adapter.write(ckpt);
  params.vocab.write(ckpt);
  return ckpt;
}

Stage1Checkpoint Stage1Checkpoint::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.text("meta.kind") != "stage1") throw FormatError("checkpoint is not a stage-1 checkpoint");
  Stage1Checkpoint out{Stage1Params{AdapterParams::read(ckpt), Vocabulary::read(ckpt)}, read_backbone_config(ckpt),
                       ckpt.text("meta.backbone.sha256"), TrainRunConfig{}, ckpt.scalar("metrics.final_loss")};
  out.params.vocab.set_trainable(true);
  out.config.patch = read_patch_config(ckpt, &out.config.horizon);
  const auto& train = ckpt.get("meta.train").values;
  if (train.size() != 4) throw FormatError("checkpoint: malformed meta.train");
  out.config.epochs = static_cast<std::size_t>(train[0]);
  out.config.batch_size = static_cast<std::size_t>(train[1]);
  out.config.lr = train[2];
  out.config.log_every = static_cast<std::size_t>(train[3]);
  out.config.seed = ckpt.u64("meta.train.seed");
  out.config.templates = out.params.vocab.templates();
  return out;
}

}  // namespace vitro
