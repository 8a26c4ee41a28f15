// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "testing.hpp"
#include "vitro/error.hpp"
#include "vitro/preprocessing.hpp"

using namespace vitro;

TEST_CASE("revin_normalize examples") {
  auto c = revin_normalize(std::vector<double>{5, 5, 5, 5});
  for (double v : c.values) CHECK(v == 0.0);
  CHECK(c.state.mean == 5.0);
  CHECK(c.state.stddev == RevInState::kEps);

  auto two = revin_normalize(std::vector<double>{0, 2});
  CHECK(two.values[0] == doctest::Approx(-1.0));
  CHECK(two.values[1] == doctest::Approx(1.0));

  CHECK_THROWS_AS(revin_normalize(std::vector<double>{1}), InputError);
}

TEST_CASE("revin_denormalize examples") {
  CHECK(revin_denormalize(std::vector<double>{0}, {3.0, 2.0})[0] == 3.0);
  CHECK(revin_denormalize(std::vector<double>{1}, {0.0, 1.0})[0] == 1.0);
}

TEST_CASE("revin roundtrip on random series") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (int i = 0; i < 100; ++i) {
    const double level = u(rng), spread = std::abs(u(rng));
    std::vector<double> x(2 + i % 60);
    for (double& v : x) v = level + spread * n(rng);
    auto w = revin_normalize(x);
    auto back = revin_denormalize(w.values, w.state);
    double err = 0.0;
    for (std::size_t t = 0; t < x.size(); ++t) err = std::max(err, std::abs(back[t] - x[t]));
    CHECK(err < 1e-9);
  }
}

TEST_CASE("make_patches examples") {
  CHECK(PatchConfig{16, 8, 512}.patch_count() == 64);

  PatchConfig cfg{4, 1, 4};
  Tensor p = make_patches(std::vector<double>{1, 2, 3, 4}, cfg);
  CHECK(p.shape() == Shape{2, 4});
  CHECK(std::vector<double>(p.data().begin() + 4, p.data().end()) == std::vector<double>{2, 3, 4, 4});

  PatchConfig nonoverlap{8, 8, 8};
  CHECK(nonoverlap.patch_count() == 2);
  CHECK(make_patches(std::vector<double>(8, 1.0), nonoverlap).shape() == Shape{2, 8});

  CHECK_THROWS_AS(PatchConfig({0, 1, 4}).validate(), ConfigError);
  CHECK_THROWS_AS(PatchConfig({5, 1, 4}).validate(), ConfigError);
  CHECK_THROWS_AS(PatchConfig({2, 0, 4}).validate(), ConfigError);
}

TEST_CASE("patch count sweep against start-position enumeration") {
  for (std::size_t T = 2; T <= 64; ++T) {
    std::vector<double> x(T);
    for (std::size_t t = 0; t < T; ++t) x[t] = static_cast<double>(t);
    for (std::size_t lp = 1; lp <= T; ++lp) {
      for (std::size_t s = 1; s <= T; ++s) {
        PatchConfig cfg{lp, s, T};
        // Starts 0, s, 2s, ... whose patch fits inside the window padded by s steps.
        std::size_t starts = 0;
        for (std::size_t st = 0; st + lp <= T + s; st += s) ++starts;
        REQUIRE(cfg.patch_count() == starts);
        Tensor p = make_patches(x, cfg);
        REQUIRE(p.shape()[0] == starts);
        if (s <= lp) {
          std::vector<bool> seen(T, false);
          for (double v : p.data()) seen[static_cast<std::size_t>(v)] = true;
          REQUIRE(std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }));
        }
      }
    }
  }
}

TEST_CASE("embed_patches examples") {
  Tensor patches = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor e = embed_patches(patches, eye, Tensor::zeros({3}));
  CHECK(vitro::testing::bit_equal(e.data(), patches.data()));

  Tensor b = Tensor::from({2}, {7, -1});
  Tensor only_b = embed_patches(patches, Tensor::zeros({2, 3}), b);
  CHECK(std::vector<double>(only_b.data().begin(), only_b.data().end()) == std::vector<double>{7, -1, 7, -1});

  std::mt19937_64 rng(4);
  Tensor w = vitro::testing::random_tensor(rng, {5, 3});
  Tensor bias = vitro::testing::random_tensor(rng, {5});
  auto r = vitro::testing::gradcheck(
      [&] {
        std::mt19937_64 p(9);
        return vitro::testing::project(embed_patches(patches, w, bias), p);
      },
      {w, bias});
  CHECK(r.max_rel < 1e-4);
}

TEST_CASE("stats examples") {
  auto c = compute_stats(std::vector<double>{3, 3, 3, 3});
  CHECK(c.as_array() == std::array<double, 6>{3, 3, 3, 0, 3, 0});

  std::vector<double> ramp(10);
  for (std::size_t t = 0; t < 10; ++t) ramp[t] = static_cast<double>(t);
  auto r = compute_stats(ramp);
  CHECK(r.slope == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(r.mean == doctest::Approx(4.5));

  CHECK(compute_stats(std::vector<double>{1, 3, 2}).median == 2.0);
  CHECK(compute_stats(std::vector<double>{4, 1, 3, 2}).median == 2.5);
}

TEST_CASE("stats are ordered and computed on raw values") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(10.0, 3.0);
  for (int i = 0; i < 50; ++i) {
    std::vector<double> x(16);
    for (double& v : x) v = n(rng);
    auto s = compute_stats(x);
    CHECK(s.min <= s.median);
    CHECK(s.median <= s.max);
    CHECK(s.stddev >= 0.0);
    CHECK(s.as_array() != compute_stats(revin_normalize(x).values).as_array());
  }
}

TEST_CASE("stats_token shape and affine map") {
  std::vector<double> x{1, 2, 4, 8};
  Tensor w = Tensor::zeros({3, 6});
  Tensor b = Tensor::from({3}, {1, 2, 3});
  Tensor t = stats_token(x, w, b);
  CHECK(t.shape() == Shape{1, 3});
  CHECK(std::vector<double>(t.data().begin(), t.data().end()) == std::vector<double>{1, 2, 3});
}
