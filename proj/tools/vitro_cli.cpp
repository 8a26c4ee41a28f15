// SPDX-License-Identifier: Apache-2.0
//
// vitro: command-line front end for training, forecasting and evaluation.
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "vitro/error.hpp"
#include "vitro/eval.hpp"

namespace fs = std::filesystem;
using namespace vitro;

namespace {

struct Common {
  std::string config;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool with_mode) {
  app->add_option("--config", c.config, "run configuration (key=value)")->check(CLI::ExistingFile);
  if (with_mode) app->add_option("--mode", c.mode, "stage-2 mode")->check(CLI::IsMember({"sim", "attn"}));
  app->add_option("--seed", c.seed, "override the configured seed");
  app->add_option("--out", c.out, "output directory");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  try {
    if (!c.config.empty()) cfg = RunConfig::load(c.config);
    if (!c.mode.empty()) cfg.mode = parse_mode(c.mode);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out.empty()) cfg.out = c.out;
    cfg.validate();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError("config", e.what());
  }
  return cfg;
}

void print_report(const MetricReport& r) {
  std::printf("%-8s %8s %14s %14s\n", "label", "horizon", "mse", "mae");
  for (const HorizonMetrics& m : r.rows) std::printf("%-8s %8zu %14.6f %14.6f\n", r.label.c_str(), m.horizon, m.mse, m.mae);
  const HorizonMetrics avg = r.average();
  std::printf("%-8s %8s %14.6f %14.6f\n", r.label.c_str(), "avg", avg.mse, avg.mae);
}

template <typename F>
void tagged(const char* stage, F&& fn) {
  try {
    fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage time-series vocabulary training and forecasting"};
  app.require_subcommand(1);

  Common s1c, s2c, evc, cmpc;
  std::size_t s1_horizon = 0, s2_horizon = 0;
  std::string s2_checkpoint, pred_checkpoint, pred_input, pred_out, exp_checkpoint, exp_out;

  auto* s1 = app.add_subcommand("train-stage1", "learn the vocabulary and adapters");
  add_common(s1, s1c, false);
  s1->add_option("--horizon", s1_horizon, "forecast horizon (default: first configured)");

  auto* s2 = app.add_subcommand("train-stage2", "train a forecaster on a stage-1 checkpoint");
  add_common(s2, s2c, true);
  s2->add_option("--checkpoint", s2_checkpoint, "stage-1 checkpoint")->required();
  s2->add_option("--horizon", s2_horizon, "forecast horizon (default: first configured)");

  auto* pred = app.add_subcommand("predict", "forecast windows with a stage-2 checkpoint");
  pred->add_option("--checkpoint", pred_checkpoint, "stage-2 checkpoint")->required();
  pred->add_option("--input", pred_input, "CSV, one lookback window per row")->required()->check(CLI::ExistingFile);
  pred->add_option("--out", pred_out, "forecast CSV path")->required();

  auto* ev = app.add_subcommand("eval", "run both stages and evaluate every horizon");
  add_common(ev, evc, true);

  auto* cmp = app.add_subcommand("compare-vocab", "learned vs random frozen vocabulary");
  add_common(cmp, cmpc, true);

  auto* exp = app.add_subcommand("export-embeddings", "write V and s from a stage-1 checkpoint");
  exp->add_option("--checkpoint", exp_checkpoint, "stage-1 checkpoint")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", exp_out, "output stem (writes <stem>.vitro, <stem>.csv and <stem>.shared.csv)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*s1) {
      const RunConfig cfg = resolve(s1c);
      const std::size_t horizon = s1_horizon ? s1_horizon : cfg.horizons.front();
      const fs::path out = cfg.out;
      std::vector<Series> channels;
      WindowedDataset data;
      tagged("data", [&] {
        channels = load_channels(cfg);
        data = build_dataset(channels, cfg.dataset_spec(horizon));
      });
      Stage1Result r;
      tagged("stage1", [&] { r = train_stage1(data.train, cfg.stage1_config(horizon), cfg.backbone); });
      tagged("report", [&] {
        fs::create_directories(out);
        r.checkpoint.save(out / "stage1.vitro");
        write_loss_csv(out / "loss_stage1.csv", r.loss_trace);
        export_embeddings(r.checkpoint.params.vocab, out / "vocab");
      });
      std::printf("stage1: %zu windows, %zu steps, final loss %.6f -> %s\n", data.train.size(), r.loss_trace.size(),
                  r.checkpoint.final_loss, (out / "stage1.vitro").string().c_str());
    } else if (*s2) {
      const RunConfig cfg = resolve(s2c);
      Stage1Checkpoint stage1;
      tagged("stage2", [&] {
        if (!fs::exists(s2_checkpoint)) throw IoError("stage-1 checkpoint '" + s2_checkpoint + "' not found");
        stage1 = Stage1Checkpoint::load(s2_checkpoint);
      });
      const std::size_t horizon = s2_horizon ? s2_horizon : stage1.config.horizon;
      const fs::path out = cfg.out;
      WindowedDataset data;
      tagged("data", [&] { data = build_dataset(load_channels(cfg), cfg.dataset_spec(horizon)); });
      Stage2Result r;
      tagged("stage2", [&] { r = train_stage2(stage1, data.train, cfg.stage2_config()); });
      HorizonMetrics m;
      tagged("eval", [&] { m = evaluate_forecaster(Forecaster(r.model), data.test, data.scaler); });
      tagged("report", [&] {
        fs::create_directories(out);
        r.model.save(out / "stage2.vitro");
        write_loss_csv(out / "loss_stage2.csv", r.loss_trace);
      });
      std::printf("stage2 (%s): test mse %.6f mae %.6f -> %s\n", std::string(mode_name(cfg.mode)).c_str(), m.mse, m.mae,
                  (out / "stage2.vitro").string().c_str());
    } else if (*pred) {
      std::optional<Forecaster> f;
      tagged("predict", [&] {
        if (!fs::exists(pred_checkpoint)) throw IoError("checkpoint '" + pred_checkpoint + "' not found");
        f.emplace(Forecaster::load(pred_checkpoint));
      });
      std::vector<Series> forecasts;
      tagged("predict", [&] { forecasts = f->predict_batch(read_rows_csv(pred_input)); });
      tagged("report", [&] {
        std::vector<std::string> header;
        for (std::size_t t = 1; t <= f->model().horizon; ++t) header.push_back("t+" + std::to_string(t));
        write_rows_csv(pred_out, header, forecasts);
      });
      std::printf("predict: %zu forecasts -> %s\n", forecasts.size(), pred_out.c_str());
    } else if (*ev) {
      const RunConfig cfg = resolve(evc);
      const PipelineResult r = run_pipeline(cfg, fs::path(cfg.out));
      print_report(r.report);
      for (const HorizonRun& h : r.runs) std::printf("naive    %8zu %14.6f %14.6f\n", h.horizon, h.naive.mse, h.naive.mae);
    } else if (*cmp) {
      const RunConfig cfg = resolve(cmpc);
      const VocabComparison r = compare_vocab(cfg, fs::path(cfg.out));
      print_report(r.vitro);
      print_report(r.random);
    } else if (*exp) {
      tagged("export", [&] {
        const Stage1Checkpoint ckpt = Stage1Checkpoint::load(exp_checkpoint);
        export_embeddings(ckpt.params.vocab, exp_out);
      });
      std::printf("export: %s.vitro, %s.csv, %s.shared.csv\n", exp_out.c_str(), exp_out.c_str(), exp_out.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
