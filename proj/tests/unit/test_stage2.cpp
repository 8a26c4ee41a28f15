// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "testing.hpp"
#include "vitro/data.hpp"
#include "vitro/error.hpp"
#include "vitro/stage2.hpp"

using namespace vitro;
using vitro::testing::bit_equal;
using vitro::testing::checksum;
using vitro::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

const BackboneConfig kSmallBackbone{8, 2, 1, 64, 3};

std::vector<WindowInstance> sine_windows(std::size_t count) {
  SynthParams p;
  p.channels = 1;
  p.length = 20 + count * 2;
  auto s = synth_generate("sines", p, 4);
  auto w = make_windows(s[0], 16, 4, 2);
  w.resize(std::min(w.size(), count));
  return w;
}

Stage1Checkpoint stage1_for(const std::vector<WindowInstance>& windows) {
  TrainRunConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  c.patch = {4, 4, 16};
  c.horizon = 4;
  c.seed = 2;
  return train_stage1(windows, c, kSmallBackbone).checkpoint;
}

Stage2Config small_stage2(Stage2Mode mode) {
  Stage2Config c;
  c.mode = mode;
  c.epochs = 3;
  c.batch_size = 4;
  c.lr = 1e-2;
  c.top_k = 3;
  c.heads = 2;
  return c;
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "vitro_test_stage2";
  fs::create_directories(dir);
  return dir / name;
}

// Plain-loop multi-head cross-attention.
std::vector<double> reference_cross_attention(const Tensor& e, const Tensor& c, const CrossAttnParams& p) {
  const std::size_t rows = e.rows(), keys = c.rows(), d = e.cols(), dh = d / p.heads;
  auto proj = [&](const Tensor& x, const Tensor& w) {
    std::vector<double> out(x.rows() * d, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t j = 0; j < d; ++j)
        for (std::size_t i = 0; i < d; ++i) out[r * d + j] += x.at(r, i) * w.at(i, j);
    return out;
  };
  const auto q = proj(e, p.query), k = proj(c, p.key), v = proj(c, p.value);
  std::vector<double> z(rows * d, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> s(keys);
      for (std::size_t m = 0; m < keys; ++m) {
        double dot = 0.0;
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) dot += q[r * d + j] * k[m * d + j];
        s[m] = dot / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double total = 0.0;
      for (double& x : s) total += (x = std::exp(x - mx));
      for (std::size_t m = 0; m < keys; ++m)
        for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) z[r * d + j] += s[m] / total * v[m * d + j];
    }
  }
  return z;
}

}  // namespace

TEST_CASE("mode names") {
  CHECK(parse_mode("sim") == Stage2Mode::Sim);
  CHECK(parse_mode("attn") == Stage2Mode::Attn);
  CHECK(mode_name(Stage2Mode::Attn) == "attn");
  CHECK_THROWS_AS(parse_mode("dense"), ConfigError);
}

TEST_CASE("core lexicon examples") {
  std::mt19937_64 rng(1);
  Tensor v = random_tensor(rng, {5, 4}, false);
  std::vector<double> sel(3 * 5, 0.0);
  for (std::size_t i = 0; i < 3; ++i) sel[i * 5 + i] = 1.0;
  Tensor c = core_lexicon(v, Tensor::from({3, 5}, sel), Tensor::zeros({3}));
  CHECK(bit_equal(c.data(), v.data().first(12)));

  Tensor b = Tensor::from({3}, {1.0, -2.0, 0.5});
  Tensor c0 = core_lexicon(v, Tensor::zeros({3, 5}), b);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(c0.at(r, j) == b.data()[r]);

  Tensor w = random_tensor(rng, {3, 5});
  Tensor bt = random_tensor(rng, {3});
  auto r = vitro::testing::gradcheck(
      [&] {
        std::mt19937_64 p(2);
        return vitro::testing::project(core_lexicon(v, w, bt), p);
      },
      {w, bt});
  CHECK(r.max_rel < 1e-4);

  CoreLexicon lex = CoreLexicon::init(8, 200, 3);
  double s2 = 0.0;
  for (double x : lex.weight.data()) s2 += x * x;
  CHECK(std::sqrt(s2 / 1600.0) == doctest::Approx(1.0 / std::sqrt(200.0)).epsilon(0.1));
  for (double x : lex.bias.data()) CHECK(x == 0.0);
}

TEST_CASE("top-k examples") {
  Tensor core = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor patches = Tensor::from({2, 2}, {2, 0, 0, -3});
  TopK t = cosine_topk(patches, core, 2);
  CHECK(std::vector<std::size_t>(t.row_indices(0).begin(), t.row_indices(0).end()) == std::vector<std::size_t>{0, 2});
  CHECK(t.row_scores(0)[0] == doctest::Approx(1.0));
  CHECK(t.row_scores(0)[1] == doctest::Approx(std::sqrt(0.5)));
  // Row 1 scores: 0, -1, -sqrt(0.5).
  CHECK(std::vector<std::size_t>(t.row_indices(1).begin(), t.row_indices(1).end()) == std::vector<std::size_t>{0, 2});

  CHECK_THROWS_AS(cosine_topk(patches, core, 3), ConfigError);
  CHECK_THROWS_AS(cosine_topk(patches, core, 0), ConfigError);
  CHECK_THROWS_AS(cosine_topk(Tensor::zeros({2, 3}), core, 1), DimensionError);
}

TEST_CASE("top-k matches a brute-force sort, including ties") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor patches = random_tensor(rng, {5, 6}, false);
    std::vector<double> cv(9 * 6);
    std::normal_distribution<double> n(0.0, 1.0);
    for (double& x : cv) x = n(rng);
    // Rows 4 and 7 duplicate row 1.
    for (std::size_t j = 0; j < 6; ++j) cv[4 * 6 + j] = cv[7 * 6 + j] = cv[1 * 6 + j];
    Tensor core = Tensor::from({9, 6}, cv);
    const std::size_t k = 1 + static_cast<std::size_t>(trial) % 8;
    TopK t = cosine_topk(patches, core, k);
    for (std::size_t r = 0; r < 5; ++r) {
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t m = 0; m < 9; ++m) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
          dot += patches.at(r, j) * core.at(m, j);
          na += patches.at(r, j) * patches.at(r, j);
          nb += core.at(m, j) * core.at(m, j);
        }
        all.emplace_back(-dot / std::sqrt(na * nb), m);
      }
      std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (std::abs(a.first - b.first) > 1e-12) return a.first < b.first;
        return a.second < b.second;
      });
      for (std::size_t j = 0; j < k; ++j) CHECK(t.row_indices(r)[j] == all[j].second);
    }
  }
}

TEST_CASE("top-k is invariant to positive rescaling") {
  std::mt19937_64 rng(8);
  Tensor patches = random_tensor(rng, {6, 4}, false);
  Tensor core = random_tensor(rng, {10, 4}, false);
  std::vector<double> ps(patches.data().begin(), patches.data().end()), cs(core.data().begin(), core.data().end());
  for (double& x : ps) x *= 3.5;
  for (double& x : cs) x *= 0.01;
  CHECK(cosine_topk(patches, core, 4).indices ==
        cosine_topk(Tensor::from({6, 4}, ps), Tensor::from({10, 4}, cs), 4).indices);
}

TEST_CASE("augmented embedding layout") {
  FrozenBackbone backbone = init_backbone(kSmallBackbone, default_templates());
  std::mt19937_64 rng(3);
  Tensor e = random_tensor(rng, {3, 8}, false);
  Tensor core = random_tensor(rng, {6, 8}, false);
  Tensor shared = random_tensor(rng, {1, 8}, false);
  Tensor stats = random_tensor(rng, {1, 8}, false);
  TopK sel = cosine_topk(e, core, 2);
  AssembledPrompt p = augment_embedding(e, core, sel, shared, stats, backbone);
  CHECK(p.layout.length == 3 * (1 + 2) + 2);
  CHECK(p.sequence.shape() == Shape{11, 8});
  CHECK(p.layout.patch_positions == std::vector<std::size_t>{0, 3, 6});

  Tensor pos = backbone.positions(11);
  for (std::size_t patch = 0; patch < 3; ++patch) {
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t row = patch * 3 + 1 + j, c = sel.row_indices(patch)[j];
      for (std::size_t col = 0; col < 8; ++col)
        CHECK(p.sequence.at(row, col) == doctest::Approx(core.at(c, col) + pos.at(row, col)).epsilon(1e-14));
    }
  }
  for (std::size_t col = 0; col < 8; ++col) {
    CHECK(p.sequence.at(9, col) == doctest::Approx(shared.at(0, col) + pos.at(9, col)).epsilon(1e-14));
    CHECK(p.sequence.at(10, col) == doctest::Approx(stats.at(0, col) + pos.at(10, col)).epsilon(1e-14));
  }

  TopK swapped = sel;
  std::swap(swapped.indices[0], swapped.indices[1]);
  AssembledPrompt q = augment_embedding(e, core, swapped, shared, stats, backbone);
  CHECK_FALSE(bit_equal(backbone.forward(q.sequence, q.layout.attention_mask()).data(),
                        backbone.forward(p.sequence, p.layout.attention_mask()).data()));

  TopK empty = sel;
  empty.k = 0;
  empty.indices.clear();
  empty.scores.clear();
  CHECK_THROWS_AS(augment_embedding(e, core, empty, shared, stats, backbone), ConfigError);
}

TEST_CASE("cross-attention against a plain-loop reference") {
  std::mt19937_64 rng(5);
  Tensor e = random_tensor(rng, {4, 8}, false);
  Tensor c = random_tensor(rng, {6, 8}, false);
  for (std::size_t heads : {1, 2, 4}) {
    CrossAttnParams p = CrossAttnParams::init(8, heads, 9);
    AttentionResult z = cross_attention(e, c, p);
    const auto ref = reference_cross_attention(e, c, p);
    REQUIRE(z.output.shape() == Shape{4, 8});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(z.output.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    REQUIRE(z.weights.size() == heads * 4 * 6);
    for (std::size_t row = 0; row < heads * 4; ++row) {
      const double total = std::accumulate(z.weights.begin() + row * 6, z.weights.begin() + (row + 1) * 6, 0.0);
      CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(cross_attention(e, c, CrossAttnParams::init(8, 3, 9)), ConfigError);
}

TEST_CASE("cross-attention with one core row copies its value row") {
  std::mt19937_64 rng(6);
  Tensor e = random_tensor(rng, {3, 8}, false);
  Tensor c = random_tensor(rng, {1, 8}, false);
  CrossAttnParams p = CrossAttnParams::init(8, 2, 1);
  Tensor v = matmul(c, p.value);
  Tensor z = cross_attention(e, c, p).output;
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(z.at(r, j) == doctest::Approx(v.at(0, j)).epsilon(1e-14));
}

TEST_CASE("cross-attention gradients") {
  std::mt19937_64 rng(10);
  Tensor e = random_tensor(rng, {3, 4});
  Tensor c = random_tensor(rng, {5, 4});
  CrossAttnParams p = CrossAttnParams::init(4, 2, 2);
  auto r = vitro::testing::gradcheck(
      [&] {
        std::mt19937_64 pr(3);
        return vitro::testing::project(cross_attention(e, c, p).output, pr);
      },
      {e, c, p.query, p.key, p.value});
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("stage-2 training freezes the vocabulary and the backbone") {
  const auto windows = sine_windows(20);
  const Stage1Checkpoint s1 = stage1_for(windows);
  for (Stage2Mode mode : {Stage2Mode::Sim, Stage2Mode::Attn}) {
    INFO(mode_name(mode));
    Stage2Config cfg = small_stage2(mode);
    Stage2Result a = train_stage2(s1, windows, cfg);
    CHECK(bit_equal(a.model.words.data(), s1.params.vocab.words().data()));
    CHECK(bit_equal(a.model.shared.data(), s1.params.vocab.shared().data()));
    CHECK_FALSE(a.model.words.trainable());
    CHECK_FALSE(a.model.shared.trainable());
    CHECK(a.model.backbone_sha256 == s1.backbone_sha256);
    CHECK(rebuild_backbone(a.model).weights_sha256() == s1.backbone_sha256);
    CHECK(a.model.trainable().size() == (mode == Stage2Mode::Sim ? 8u : 11u));
    CHECK(a.loss_trace.size() == cfg.epochs * 5);

    // The stage-1 adapter is the starting point, not shared state.
    CHECK(checksum(a.model.adapter.head_weight) != checksum(s1.params.adapter.head_weight));

    Stage2Result b = train_stage2(s1, windows, cfg);
    CHECK(bit_equal(a.loss_trace, b.loss_trace));
    CHECK(a.model.to_checkpoint().to_bytes() == b.model.to_checkpoint().to_bytes());
  }
}

TEST_CASE("stage-2 configuration and input errors") {
  const auto windows = sine_windows(20);
  const Stage1Checkpoint s1 = stage1_for(windows);
  Stage2Config cfg = small_stage2(Stage2Mode::Sim);
  CHECK(cfg.resolved_core_size(20) == 8);
  CHECK(cfg.resolved_core_size(400) == 25);
  CHECK(cfg.resolved_core_size(5) == 4);
  cfg.top_k = 8;
  CHECK_THROWS_AS(train_stage2(s1, windows, cfg), ConfigError);
  cfg = small_stage2(Stage2Mode::Attn);
  cfg.heads = 3;
  CHECK_THROWS_AS(train_stage2(s1, windows, cfg), ConfigError);
  cfg = small_stage2(Stage2Mode::Sim);
  CHECK_THROWS_AS(train_stage2(s1, {}, cfg), InputError);
  CHECK_THROWS_AS(train_stage2(scratch("absent.vitro"), windows, cfg), IoError);
}

TEST_CASE("forecaster inference") {
  const auto windows = sine_windows(20);
  const Stage1Checkpoint s1 = stage1_for(windows);
  for (Stage2Mode mode : {Stage2Mode::Sim, Stage2Mode::Attn}) {
    INFO(mode_name(mode));
    Stage2Result r = train_stage2(s1, windows, small_stage2(mode));
    const fs::path path = scratch(std::string("model_") + std::string(mode_name(mode)) + ".vitro");
    r.model.save(path);
    Forecaster f(r.model);
    Forecaster g = Forecaster::load(path);
    CHECK(g.model().to_checkpoint().to_bytes() == r.model.to_checkpoint().to_bytes());

    std::vector<Series> inputs;
    for (std::size_t i = 0; i < 5; ++i) inputs.push_back(windows[i].lookback);
    const auto copy = inputs;
    const auto batch = f.predict_batch(inputs);
    CHECK(inputs == copy);
    REQUIRE(batch.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      const Series one = f.predict(inputs[i]);
      CHECK(one.size() == 4);
      CHECK(bit_equal(one, batch[i]));
      CHECK(bit_equal(one, f.predict(inputs[i])));
      CHECK(bit_equal(one, g.predict(inputs[i])));
    }
    CHECK_THROWS_AS(f.predict(Series(15, 0.0)), InputError);

    if (mode == Stage2Mode::Sim) {
      CHECK_THROWS_AS(f.mean_attention(inputs), ConfigError);
    } else {
      const auto w = f.mean_attention(inputs);
      const std::size_t core = r.model.lexicon.weight.rows();
      REQUIRE(w.size() == 2 * r.model.patch.patch_count() * core);
      for (std::size_t row = 0; row < 2 * r.model.patch.patch_count(); ++row) {
        const double total = std::accumulate(w.begin() + row * core, w.begin() + (row + 1) * core, 0.0);
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("stage-2 overfits repeated windows") {
  Series base(20);
  for (std::size_t t = 0; t < 20; ++t) base[t] = std::sin(0.7 * static_cast<double>(t)) + 0.1 * static_cast<double>(t);
  std::vector<WindowInstance> windows;
  for (WindowId id = 0; id < 12; ++id)
    windows.push_back({id, 0, 0, Series(base.begin(), base.begin() + 16), Series(base.begin() + 16, base.end())});
  const Stage1Checkpoint s1 = stage1_for(windows);
  for (Stage2Mode mode : {Stage2Mode::Sim, Stage2Mode::Attn}) {
    INFO(mode_name(mode));
    Stage2Config cfg = small_stage2(mode);
    cfg.epochs = 40;
    Stage2Result r = train_stage2(s1, windows, cfg);
    Forecaster f(r.model);
    const Series y = f.predict(windows[0].lookback);
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(y[j] - windows[0].target[j]) < 0.05);
  }
}
