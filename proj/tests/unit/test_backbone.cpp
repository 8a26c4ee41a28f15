// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "testing.hpp"
#include "vitro/backbone.hpp"
#include "vitro/error.hpp"
#include "vitro/optim.hpp"
#include "vitro/vocabulary.hpp"

using namespace vitro;

namespace {

BackboneConfig small_config(std::uint64_t seed = 7) { return {16, 2, 2, 32, seed}; }

FrozenBackbone make(std::uint64_t seed = 7) { return init_backbone(small_config(seed), default_templates()); }

}  // namespace

TEST_CASE("tokenizer maps slots to markers and words to stable ids") {
  TemplateTokenizer tok(default_templates());
  CHECK(tok.id(TemplateTokenizer::kPatch) == 0);
  CHECK(tok.id(TemplateTokenizer::kPseudo) == 1);
  CHECK(tok.id(TemplateTokenizer::kShared) == 2);
  CHECK(tok.id(TemplateTokenizer::kStats) == 3);
  auto ids = tok.tokenize("The time series is {P} , The dataset is {S}");
  REQUIRE(ids.size() == 10);
  CHECK(ids[0] == ids[6]);
  CHECK(ids[4] == tok.id(TemplateTokenizer::kPseudo));
  CHECK(ids[9] == tok.id(TemplateTokenizer::kShared));
  CHECK(tok.word(ids[1]) == "time");
  CHECK_THROWS_AS(tok.tokenize("unknown words"), TokenizerError);
}

TEST_CASE("init is deterministic under the seed") {
  CHECK(make(7).weights_sha256() == make(7).weights_sha256());
  CHECK(make(7).weights_sha256() != make(8).weights_sha256());
}

TEST_CASE("weight draws have the configured spread") {
  FrozenBackbone b = init_backbone({64, 4, 3, 256, 1}, default_templates());
  double s = 0.0, s2 = 0.0;
  std::size_t n = 0;
  for (const auto& [name, t] : b.named_weights()) {
    if (name.find(".weight") == std::string::npos) continue;
    for (double v : t.data()) {
      s += v;
      s2 += v * v;
      ++n;
    }
    CHECK_FALSE(t.trainable());
  }
  REQUIRE(n >= 10000);
  const double mean = s / static_cast<double>(n);
  const double sd = std::sqrt(s2 / static_cast<double>(n) - mean * mean);
  CHECK(sd >= 0.015);
  CHECK(sd <= 0.025);
}

TEST_CASE("every backbone tensor is frozen") {
  for (const auto& [name, t] : make().named_weights()) {
    INFO(name);
    CHECK_FALSE(t.trainable());
  }
}

TEST_CASE("forward keeps the shape and is deterministic") {
  FrozenBackbone b = make();
  std::mt19937_64 rng(1);
  Tensor x = vitro::testing::random_tensor(rng, {9, 16}, false);
  Tensor y1 = b.forward(x), y2 = b.forward(x);
  CHECK(y1.shape() == x.shape());
  CHECK(vitro::testing::bit_equal(y1.data(), y2.data()));
  CHECK_THROWS_AS(b.forward(vitro::testing::random_tensor(rng, {33, 16}, false)), InputError);
  CHECK_THROWS_AS(b.forward(vitro::testing::random_tensor(rng, {4, 8}, false)), DimensionError);
}

TEST_CASE("causality: perturbing position t leaves earlier outputs bit-identical") {
  FrozenBackbone b = make();
  std::mt19937_64 rng(2);
  Tensor x = vitro::testing::random_tensor(rng, {8, 16}, false);
  Tensor base = b.forward(x);
  for (std::size_t t = 0; t < 8; ++t) {
    std::vector<double> v(x.data().begin(), x.data().end());
    for (std::size_t j = 0; j < 16; ++j) v[t * 16 + j] += 0.5;
    Tensor y = b.forward(Tensor::from({8, 16}, v));
    CHECK(vitro::testing::bit_equal(y.data().first(t * 16), base.data().first(t * 16)));
    CHECK_FALSE(vitro::testing::bit_equal(y.data().subspan(t * 16, 16), base.data().subspan(t * 16, 16)));
  }
}

TEST_CASE("weights are unchanged by optimizer steps on inputs") {
  FrozenBackbone b = make();
  const std::string before = b.weights_sha256();
  std::mt19937_64 rng(3);
  Tensor x = vitro::testing::random_tensor(rng, {5, 16});
  std::vector<Tensor> params{x};
  for (const auto& [name, t] : b.named_weights()) params.push_back(t);
  Adam adam(params, {.lr = 0.1});
  CHECK(adam.size() == 1);
  for (int i = 0; i < 20; ++i) {
    backward(sum(b.forward(x)));
    adam.step();
  }
  CHECK(b.weights_sha256() == before);
}

TEST_CASE("embed_text examples") {
  FrozenBackbone b = make();
  CHECK(b.embed_text({}).shape() == Shape{0, 16});
  const TokenId t = b.tokenizer().id("series");
  const std::vector<TokenId> twice{t, t};
  Tensor e = b.embed_text(twice);
  CHECK(vitro::testing::bit_equal(e.data().subspan(0, 16), e.data().subspan(16, 16)));
  Tensor table;
  for (const auto& [name, w] : b.named_weights())
    if (name == "backbone.token_table") table = w;
  CHECK(vitro::testing::bit_equal(e.data().subspan(0, 16), table.data().subspan(t * 16, 16)));
}

TEST_CASE("sinusoidal positions") {
  FrozenBackbone b = make();
  Tensor p = b.positions(5);
  CHECK(p.shape() == Shape{5, 16});
  for (std::size_t pos = 0; pos < 5; ++pos) {
    for (std::size_t i = 0; i < 8; ++i) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(i) / 16.0);
      CHECK(p.at(pos, 2 * i) == doctest::Approx(std::sin(angle)).epsilon(1e-12));
      CHECK(p.at(pos, 2 * i + 1) == doctest::Approx(std::cos(angle)).epsilon(1e-12));
    }
  }
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(BackboneConfig({10, 3, 1, 8, 1}).validate(), ConfigError);
  CHECK_THROWS_AS(BackboneConfig({8, 2, 0, 8, 1}).validate(), ConfigError);
}
