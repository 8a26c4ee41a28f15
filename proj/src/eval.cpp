// SPDX-License-Identifier: Apache-2.0
#include "vitro/eval.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "vitro/error.hpp"
#include "vitro/rng.hpp"

namespace vitro {

namespace {

void check_lengths(std::span<const double> pred, std::span<const double> target, const char* name) {
  if (pred.size() != target.size() || pred.empty()) {
    throw DimensionError(std::string(name) + ": prediction length " + std::to_string(pred.size()) +
                         " vs target length " + std::to_string(target.size()));
  }
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    std::string item = trim(s.substr(start, end - start));
    if (!item.empty()) out.push_back(std::move(item));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc{} || ptr != end) throw ConfigError("config: bad value '" + value + "' for key '" + key + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: bad boolean '" + value + "' for key '" + key + "'");
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + items[i];
  return out;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field size_field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<T>(k, v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(double RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<double>(k, v); },
          [member](const RunConfig& c) { return fmt_double(c.*member); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["data.source"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.source = v; },
                        [](const RunConfig& c) { return c.source; }};
    t["data.path"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.csv_path = v; },
                      [](const RunConfig& c) { return c.csv_path; }};
    t["data.columns"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.csv_columns = split_list(v); },
                         [](const RunConfig& c) { return join(c.csv_columns); }};
    t["data.generator"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.generator = v; },
                           [](const RunConfig& c) { return c.generator; }};
    t["data.channels"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.channels = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.synth.channels); }};
    t["data.length"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.length = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.synth.length); }};
    t["data.noise"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.synth.noise = parse_number<double>(k, v); },
        [](const RunConfig& c) { return fmt_double(c.synth.noise); }};
    t["data.components"] = {[](RunConfig& c, const std::string& k,
                               const std::string& v) { c.synth.components = parse_number<std::size_t>(k, v); },
                            [](const RunConfig& c) { return std::to_string(c.synth.components); }};
    t["data.stride"] = size_field(&RunConfig::window_stride);
    t["data.train_fraction"] = double_field(&RunConfig::train_fraction);
    t["data.val_fraction"] = double_field(&RunConfig::val_fraction);
    t["data.scale"] = {[](RunConfig& c, const std::string& k, const std::string& v) { c.scale = parse_bool(k, v); },
                       [](const RunConfig& c) { return std::string(c.scale ? "true" : "false"); }};
    t["window.lookback"] = size_field(&RunConfig::lookback);
    t["window.horizons"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                              c.horizons.clear();
                              for (const std::string& h : split_list(v)) c.horizons.push_back(parse_number<std::size_t>(k, h));
                            },
                            [](const RunConfig& c) {
                              std::vector<std::string> items;
                              for (std::size_t h : c.horizons) items.push_back(std::to_string(h));
                              return join(items);
                            }};
    t["patch.len"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.patch.patch_len = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.patch.patch_len); }};
    t["patch.stride"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.patch.stride = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.patch.stride); }};
    t["backbone.width"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.backbone.width = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.backbone.width); }};
    t["backbone.heads"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.backbone.heads = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.backbone.heads); }};
    t["backbone.layers"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.backbone.layers = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.backbone.layers); }};
    t["backbone.max_seq"] = {
        [](RunConfig& c, const std::string& k, const std::string& v) { c.backbone.max_seq = parse_number<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.backbone.max_seq); }};
    t["backbone.seed"] = {[](RunConfig& c, const std::string& k,
                             const std::string& v) { c.backbone.seed = parse_number<std::uint64_t>(k, v); },
                          [](const RunConfig& c) { return std::to_string(c.backbone.seed); }};
    t["stage1.epochs"] = size_field(&RunConfig::stage1_epochs);
    t["stage1.batch_size"] = size_field(&RunConfig::stage1_batch);
    t["stage1.lr"] = double_field(&RunConfig::stage1_lr);
    t["stage2.epochs"] = size_field(&RunConfig::stage2_epochs);
    t["stage2.batch_size"] = size_field(&RunConfig::stage2_batch);
    t["stage2.lr"] = double_field(&RunConfig::stage2_lr);
    t["stage2.core_size"] = size_field(&RunConfig::core_size);
    t["stage2.top_k"] = size_field(&RunConfig::top_k);
    t["stage2.heads"] = size_field(&RunConfig::attn_heads);
    t["mode"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.mode = parse_mode(v); },
                 [](const RunConfig& c) { return std::string(mode_name(c.mode)); }};
    t["seed"] = size_field(&RunConfig::seed);
    t["out"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.out = v; },
                [](const RunConfig& c) { return c.out; }};
    return t;
  }();
  return table;
}

template <typename F>
auto in_stage(const char* stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

HorizonMetrics average_rows(const std::vector<HorizonMetrics>& rows) {
  HorizonMetrics avg;
  for (const HorizonMetrics& r : rows) {
    avg.mse += r.mse;
    avg.mae += r.mae;
  }
  if (!rows.empty()) {
    avg.mse /= static_cast<double>(rows.size());
    avg.mae /= static_cast<double>(rows.size());
  }
  return avg;
}

void check_disjoint(const Vocabulary& vocab, const std::vector<WindowInstance>& test) {
  for (const WindowInstance& w : test) {
    if (vocab.contains(w.id)) throw ContractError("test window " + std::to_string(w.id) + " was seen in training");
  }
}

std::vector<Series> lookbacks(const std::vector<WindowInstance>& windows) {
  std::vector<Series> out;
  for (const WindowInstance& w : windows) out.push_back(w.lookback);
  return out;
}

}  // namespace

double metric_mse(std::span<const double> pred, std::span<const double> target) {
  check_lengths(pred, target, "metric_mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - target[i]) * (pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

double metric_mae(std::span<const double> pred, std::span<const double> target) {
  check_lengths(pred, target, "metric_mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig cfg;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    const std::string value = trim(std::string_view(t).substr(eq + 1));
    auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  if (source != "synthetic" && source != "csv") throw ConfigError("config: data.source must be synthetic or csv");
  if (source == "csv" && csv_path.empty()) throw ConfigError("config: data.path is required for csv sources");
  if (horizons.empty()) throw ConfigError("config: window.horizons is empty");
  for (std::size_t h : horizons) dataset_spec(h).validate();
  PatchConfig p = patch;
  p.lookback = lookback;
  p.validate();
  backbone.validate();
  if (stage1_batch < 1 || stage2_batch < 1) throw ConfigError("config: batch sizes must be >= 1");
}

DatasetSpec RunConfig::dataset_spec(std::size_t horizon) const {
  return {lookback, horizon, window_stride, train_fraction, val_fraction, scale};
}

TrainRunConfig RunConfig::stage1_config(std::size_t horizon) const {
  TrainRunConfig c;
  c.epochs = stage1_epochs;
  c.batch_size = stage1_batch;
  c.lr = stage1_lr;
  c.seed = seed;
  c.patch = patch;
  c.patch.lookback = lookback;
  c.horizon = horizon;
  return c;
}

Stage2Config RunConfig::stage2_config() const {
  Stage2Config c;
  c.mode = mode;
  c.epochs = stage2_epochs;
  c.batch_size = stage2_batch;
  c.lr = stage2_lr;
  c.seed = seed;
  c.core_size = core_size;
  c.top_k = top_k;
  c.heads = attn_heads;
  return c;
}

std::vector<Series> load_channels(const RunConfig& cfg) {
  if (cfg.source == "csv") return load_csv(cfg.csv_path, cfg.csv_columns);
  return synth_generate(cfg.generator, cfg.synth, derive_seed(cfg.seed, "data"));
}

HorizonMetrics MetricReport::average() const { return average_rows(rows); }

void MetricReport::write_csv(const std::filesystem::path& path) const {
  std::string text = "label,horizon,mse,mae\n";
  for (const HorizonMetrics& r : rows) {
    text += label + "," + std::to_string(r.horizon) + "," + fmt_double(r.mse) + "," + fmt_double(r.mae) + "\n";
  }
  const HorizonMetrics avg = average();
  text += label + ",avg," + fmt_double(avg.mse) + "," + fmt_double(avg.mae) + "\n";
  write_text(path, text);
}

HorizonMetrics evaluate_forecaster(const Forecaster& forecaster, const std::vector<WindowInstance>& windows,
                                   const StandardScaler& scaler) {
  if (windows.empty()) throw InputError("evaluate: no test windows");
  HorizonMetrics m;
  m.horizon = windows.front().target.size();
  for (const WindowInstance& w : windows) {
    const Series pred = scaler.inverse(w.channel, forecaster.predict(w.lookback));
    const Series truth = scaler.inverse(w.channel, w.target);
    m.mse += metric_mse(pred, truth);
    m.mae += metric_mae(pred, truth);
  }
  m.mse /= static_cast<double>(windows.size());
  m.mae /= static_cast<double>(windows.size());
  return m;
}

HorizonMetrics evaluate_naive(const std::vector<WindowInstance>& windows, const StandardScaler& scaler) {
  if (windows.empty()) throw InputError("evaluate: no test windows");
  HorizonMetrics m;
  m.horizon = windows.front().target.size();
  for (const WindowInstance& w : windows) {
    const Series pred = scaler.inverse(w.channel, Series(w.target.size(), w.lookback.back()));
    const Series truth = scaler.inverse(w.channel, w.target);
    m.mse += metric_mse(pred, truth);
    m.mae += metric_mae(pred, truth);
  }
  m.mse /= static_cast<double>(windows.size());
  m.mae /= static_cast<double>(windows.size());
  return m;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const double> trace) {
  std::string text = "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) text += std::to_string(i) + "," + fmt_double(trace[i]) + "\n";
  write_text(path, text);
}

void write_attention_csv(const std::filesystem::path& path, std::span<const double> weights, std::size_t heads,
                         std::size_t patches, std::size_t words) {
  if (weights.size() != heads * patches * words) throw DimensionError("attention export: weight count mismatch");
  std::string text = "head,word";
  for (std::size_t p = 0; p < patches; ++p) text += ",p_" + std::to_string(p);
  text += "\n";
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t w = 0; w < words; ++w) {
      text += std::to_string(h) + "," + std::to_string(w);
      for (std::size_t p = 0; p < patches; ++p) text += "," + fmt_double(weights[(h * patches + p) * words + w]);
      text += "\n";
    }
  }
  write_text(path, text);
}

PipelineResult run_pipeline(const RunConfig& cfg, const std::optional<std::filesystem::path>& out) {
  in_stage("config", [&] { cfg.validate(); });
  const std::vector<Series> channels = in_stage("data", [&] { return load_channels(cfg); });
  if (out) std::filesystem::create_directories(*out);

  PipelineResult result;
  result.report.label = std::string(mode_name(cfg.mode));
  for (std::size_t horizon : cfg.horizons) {
    const WindowedDataset data = in_stage("data", [&] { return build_dataset(channels, cfg.dataset_spec(horizon)); });
    HorizonRun run;
    run.horizon = horizon;

    Stage1Result s1 = in_stage("stage1", [&] { return train_stage1(data.train, cfg.stage1_config(horizon), cfg.backbone); });
    run.stage1_loss = s1.loss_trace;
    run.backbone_sha256 = s1.checkpoint.backbone_sha256;
    Stage2Result s2 = in_stage("stage2", [&] { return train_stage2(s1.checkpoint, data.train, cfg.stage2_config()); });
    run.stage2_loss = s2.loss_trace;

    const Forecaster forecaster = in_stage("eval", [&] { return Forecaster(s2.model); });
    HorizonMetrics metrics = in_stage("eval", [&] {
      check_disjoint(s1.checkpoint.params.vocab, data.test);
      return evaluate_forecaster(forecaster, data.test, data.scaler);
    });
    run.naive = in_stage("eval", [&] { return evaluate_naive(data.test, data.scaler); });
    result.report.rows.push_back(metrics);

    if (out) {
      in_stage("report", [&] {
        const std::filesystem::path dir = *out / ("h" + std::to_string(horizon));
        std::filesystem::create_directories(dir);
        s1.checkpoint.save(dir / "stage1.vitro");
        s2.model.save(dir / "stage2.vitro");
        write_loss_csv(dir / "loss_stage1.csv", run.stage1_loss);
        write_loss_csv(dir / "loss_stage2.csv", run.stage2_loss);
        export_embeddings(s1.checkpoint.params.vocab, dir / "vocab");
        std::vector<Series> forecasts = forecaster.predict_batch(lookbacks(data.test));
        for (std::size_t i = 0; i < forecasts.size(); ++i) {
          forecasts[i] = data.scaler.inverse(data.test[i].channel, forecasts[i]);
        }
        std::vector<std::string> header;
        for (std::size_t t = 1; t <= horizon; ++t) header.push_back("t+" + std::to_string(t));
        write_rows_csv(dir / "forecast.csv", header, forecasts);
        if (cfg.mode == Stage2Mode::Attn) {
          const std::vector<double> attn = forecaster.mean_attention(lookbacks(data.test));
          const std::size_t words = s2.model.lexicon.weight.shape()[0];
          const std::size_t heads = s2.model.attention.heads;
          write_attention_csv(dir / "attention.csv", attn, heads, attn.size() / (heads * words), words);
        }
      });
    }
    result.runs.push_back(std::move(run));
  }
  if (out) in_stage("report", [&] { result.report.write_csv(*out / "metrics.csv"); });
  return result;
}

void VocabComparison::write_csv(const std::filesystem::path& path) const {
  std::string text = "horizon,vitro_mse,random_mse,delta_mse,vitro_mae,random_mae,delta_mae\n";
  auto row = [&](const std::string& h, const HorizonMetrics& a, const HorizonMetrics& b) {
    text += h + "," + fmt_double(a.mse) + "," + fmt_double(b.mse) + "," + fmt_double(a.mse - b.mse) + "," +
            fmt_double(a.mae) + "," + fmt_double(b.mae) + "," + fmt_double(a.mae - b.mae) + "\n";
  };
  for (std::size_t i = 0; i < vitro.rows.size(); ++i) row(std::to_string(vitro.rows[i].horizon), vitro.rows[i], random.rows[i]);
  row("avg", vitro.average(), random.average());
  write_text(path, text);
}

VocabComparison compare_vocab(const RunConfig& cfg, const std::optional<std::filesystem::path>& out) {
  in_stage("config", [&] { cfg.validate(); });
  const std::vector<Series> channels = in_stage("data", [&] { return load_channels(cfg); });

  VocabComparison cmp;
  cmp.vitro.label = "vitro";
  cmp.random.label = "random";
  for (std::size_t horizon : cfg.horizons) {
    const WindowedDataset data = in_stage("data", [&] { return build_dataset(channels, cfg.dataset_spec(horizon)); });
    Stage1Result s1 = in_stage("stage1", [&] { return train_stage1(data.train, cfg.stage1_config(horizon), cfg.backbone); });
    const Vocabulary& vocab = s1.checkpoint.params.vocab;
    const VocabOverride random_vocab =
        VocabOverride::random(vocab.size(), vocab.width(), derive_seed(cfg.seed, "compare-vocab"));

    Stage2Result learned = in_stage("stage2", [&] { return train_stage2(s1.checkpoint, data.train, cfg.stage2_config()); });
    Stage2Result baseline =
        in_stage("stage2", [&] { return train_stage2(s1.checkpoint, data.train, cfg.stage2_config(), random_vocab); });
    if (learned.model.backbone_sha256 != baseline.model.backbone_sha256) {
      throw StageError("compare", "backbone differs between the two stage-2 runs");
    }
    cmp.backbone_sha256.push_back(learned.model.backbone_sha256);

    in_stage("eval", [&] {
      check_disjoint(vocab, data.test);
      cmp.vitro.rows.push_back(evaluate_forecaster(Forecaster(learned.model), data.test, data.scaler));
      cmp.random.rows.push_back(evaluate_forecaster(Forecaster(baseline.model), data.test, data.scaler));
    });
  }
  if (out) {
    in_stage("report", [&] {
      std::filesystem::create_directories(*out);
      cmp.write_csv(*out / "compare_vocab.csv");
      cmp.vitro.write_csv(*out / "metrics_vitro.csv");
      cmp.random.write_csv(*out / "metrics_random.csv");
    });
  }
  return cmp;
}

}  // namespace vitro
