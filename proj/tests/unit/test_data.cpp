// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "doctest.h"
#include "testing.hpp"
#include "vitro/checkpoint.hpp"
#include "vitro/data.hpp"
#include "vitro/error.hpp"

using namespace vitro;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "vitro_test_data";
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path p = scratch(name);
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

// "VITRO1", version 1, record "a" = [1, -2], record "s" = 0.5 (rank 0).
const std::vector<std::uint8_t> kGolden = {
    'V', 'I', 'T', 'R', 'O', '1',                    // magic
    0x01, 0x00, 0x00, 0x00,                          // version
    0x01, 0x00, 0x00, 0x00, 'a',                     // name
    0x01,                                            // dtype f64
    0x01, 0x00, 0x00, 0x00,                          // rank
    0x02, 0x00, 0x00, 0x00,                          // dims
    0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xF0, 0x3F,  // 1.0
    0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xC0,  // -2.0
    0x01, 0x00, 0x00, 0x00, 's',                     // name
    0x01,                                            // dtype f64
    0x00, 0x00, 0x00, 0x00,                          // rank 0
    0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0xE0, 0x3F,  // 0.5
};

}  // namespace

TEST_CASE("make_windows examples") {
  std::vector<double> s(10);
  for (std::size_t t = 0; t < 10; ++t) s[t] = static_cast<double>(t);
  auto w = make_windows(s, 4, 2, 2);
  REQUIRE(w.size() == 3);
  CHECK(w[0].offset == 0);
  CHECK(w[1].offset == 2);
  CHECK(w[2].offset == 4);
  CHECK(w[0].id == 0);
  CHECK(w[2].id == 2);
  CHECK(w[0].target == std::vector<double>{4, 5});
  CHECK(w[2].lookback == std::vector<double>{4, 5, 6, 7});

  CHECK(make_windows(std::vector<double>(6, 1.0), 4, 2, 3).size() == 1);
  CHECK_THROWS_AS(make_windows(std::vector<double>(5, 1.0), 4, 2, 1), InputError);
}

TEST_CASE("stride-1 enumeration is exhaustive and non-duplicating") {
  std::vector<double> s(40);
  for (std::size_t t = 0; t < 40; ++t) s[t] = static_cast<double>(t);
  auto w = make_windows(s, 8, 3, 1, 100);
  REQUIRE(w.size() == 40 - 8 - 3 + 1);
  std::set<std::size_t> offsets;
  for (std::size_t i = 0; i < w.size(); ++i) {
    offsets.insert(w[i].offset);
    CHECK(w[i].id == 100 + i);
  }
  CHECK(offsets.size() == w.size());
  CHECK(*offsets.rbegin() == 29);
}

TEST_CASE("load_csv") {
  const auto p = write_file("ok.csv", "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n2020-01-03,5,6\n");
  auto m = load_csv(p);
  REQUIRE(m.size() == 2);
  CHECK(m[0] == std::vector<double>{1, 3, 5});
  CHECK(m[1] == std::vector<double>{2, 4, 6});
  CHECK(load_csv(p, {"b"}) == std::vector<Series>{{2, 4, 6}});

  CHECK_THROWS_AS(load_csv(write_file("empty.csv", "a,b\n")), InputError);
  CHECK_THROWS_AS(load_csv(write_file("ragged.csv", "a,b\n1,2\n3\n")), FormatError);
  try {
    load_csv(write_file("bad.csv", "a,b\n1,2\n3,x\n"));
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    const std::string what = e.what();
    CHECK(what.find("row 2") != std::string::npos);
    CHECK(what.find("col 2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_csv(scratch("missing.csv")), IoError);
  CHECK_THROWS_AS(load_csv(p, {"nope"}), LookupError);
}

TEST_CASE("emitted CSV parses back bit-equal") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1e3);
  std::vector<Series> cols(3, Series(25));
  for (Series& c : cols)
    for (double& v : c) v = n(rng);
  cols[1][3] = 1e-300;
  cols[2][7] = -0.0;
  const auto p = scratch("roundtrip.csv");
  write_csv(p, {"x", "y", "z"}, cols);
  auto back = load_csv(p);
  REQUIRE(back.size() == 3);
  for (std::size_t c = 0; c < 3; ++c) CHECK(vitro::testing::bit_equal(back[c], cols[c]));
}

TEST_CASE("synthetic generators") {
  SynthParams one;
  one.channels = 1;
  one.length = 200;
  one.noise = 0.0;
  one.sines = {{1.5, 0.03, 0.4}};
  auto s = synth_generate("sines", one, 1);
  for (std::size_t t = 0; t < one.length; ++t) {
    const double expected = 1.5 * std::sin(2.0 * std::numbers::pi * 0.03 * static_cast<double>(t) + 0.4);
    CHECK(std::abs(s[0][t] - expected) < 1e-12);
  }

  for (const char* name : {"sines", "trend", "arma-like"}) {
    CHECK(synth_generate(name, {}, 9) == synth_generate(name, {}, 9));
    CHECK(synth_generate(name, {}, 9) != synth_generate(name, {}, 10));
  }
  CHECK_THROWS_AS(synth_generate("walk", {}, 1), ConfigError);
}

TEST_CASE("synthetic noise has the configured spread") {
  SynthParams clean;
  clean.channels = 1;
  clean.length = 100000;
  clean.noise = 0.0;
  clean.sines = {{1.0, 0.01, 0.0}};
  SynthParams noisy = clean;
  noisy.noise = 0.3;
  auto a = synth_generate("sines", clean, 5), b = synth_generate("sines", noisy, 5);
  double s = 0.0, s2 = 0.0;
  for (std::size_t t = 0; t < clean.length; ++t) {
    const double e = b[0][t] - a[0][t];
    s += e;
    s2 += e * e;
  }
  const double n = static_cast<double>(clean.length);
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  CHECK(std::abs(sd - 0.3) < 0.03);
}

TEST_CASE("chronological splits, scaling and ids") {
  auto channels = synth_generate("trend", {2, 600, 0.1, 1, {}}, 3);
  DatasetSpec spec{32, 8, 4, 0.7, 0.1, true};
  auto ds = build_dataset(channels, spec);
  REQUIRE_FALSE(ds.train.empty());
  REQUIRE_FALSE(ds.val.empty());
  REQUIRE_FALSE(ds.test.empty());
  CHECK(ds.train_end == 420);
  CHECK(ds.val_end == 480);

  std::size_t max_train = 0, min_val = SIZE_MAX, max_val = 0, min_test = SIZE_MAX;
  for (const auto& w : ds.train) max_train = std::max(max_train, w.offset + 32 + 8 - 1);
  for (const auto& w : ds.val) {
    min_val = std::min(min_val, w.offset + 32);
    max_val = std::max(max_val, w.offset + 32 + 8 - 1);
  }
  for (const auto& w : ds.test) min_test = std::min(min_test, w.offset + 32);
  CHECK(max_train < ds.train_end);
  CHECK(max_train < min_val);
  CHECK(min_val >= ds.train_end);
  CHECK(max_val < min_test);
  CHECK(min_test >= ds.val_end);

  std::set<WindowId> ids;
  for (const auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& w : *split) CHECK(ids.insert(w.id).second);

  // Scaler statistics come from the train range only.
  for (std::size_t c = 0; c < 2; ++c) {
    double mu = 0.0;
    for (std::size_t t = 0; t < ds.train_end; ++t) mu += channels[c][t];
    mu /= static_cast<double>(ds.train_end);
    CHECK(ds.scaler.mean[c] == doctest::Approx(mu).epsilon(1e-12));
    const Series back = ds.scaler.inverse(c, ds.train[0].lookback);
    CHECK(back[0] == doctest::Approx(channels[c][ds.train[0].offset]).epsilon(1e-12));
    break;
  }
  CHECK_THROWS_AS(DatasetSpec({32, 8, 4, 0.9, 0.1, true}).validate(), ConfigError);
}

TEST_CASE("checkpoint golden bytes") {
  Checkpoint ckpt;
  ckpt.add("a", Shape{2}, std::vector<double>{1.0, -2.0});
  ckpt.add("s", Shape{}, std::vector<double>{0.5});
  CHECK(ckpt.to_bytes() == kGolden);

  Checkpoint back = Checkpoint::from_bytes(kGolden);
  REQUIRE(back.records().size() == 2);
  CHECK(back.get("a").values == std::vector<double>{1.0, -2.0});
  CHECK(back.get("s").dims.empty());
  CHECK(back.scalar("s") == 0.5);
}

TEST_CASE("checkpoint roundtrip through a file is bit-exact") {
  std::mt19937_64 rng(6);
  Checkpoint ckpt;
  ckpt.add("w", vitro::testing::random_tensor(rng, {3, 4}, false));
  ckpt.add("scalar", Tensor::scalar(-1.25));
  ckpt.add_text("name", "hello");
  ckpt.add_u64("seed", 0xDEADBEEFCAFEF00DULL);
  const auto p = scratch("ck.vitro");
  ckpt.save(p);
  Checkpoint back = Checkpoint::load(p);
  CHECK(back.to_bytes() == ckpt.to_bytes());
  CHECK(vitro::testing::bit_equal(back.get("w").values, ckpt.get("w").values));
  CHECK(back.tensor("scalar").rank() == 0);
  CHECK(back.text("name") == "hello");
  CHECK(back.u64("seed") == 0xDEADBEEFCAFEF00DULL);
  CHECK_THROWS_AS(Checkpoint::load(scratch("nope.vitro")), IoError);
}

TEST_CASE("checkpoint rejects malformed input") {
  auto bad_magic = kGolden;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(Checkpoint::from_bytes(bad_magic), FormatError);

  auto bad_version = kGolden;
  bad_version[6] = 2;
  CHECK_THROWS_WITH_AS(Checkpoint::from_bytes(bad_version), doctest::Contains("version"), FormatError);

  auto truncated = kGolden;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(Checkpoint::from_bytes(truncated), FormatError);

  auto bad_dtype = kGolden;
  bad_dtype[15] = 7;
  CHECK_THROWS_AS(Checkpoint::from_bytes(bad_dtype), FormatError);

  auto dup = kGolden;
  dup[43] = 'a';
  CHECK_THROWS_AS(Checkpoint::from_bytes(dup), FormatError);

  Checkpoint c;
  c.add("x", Shape{1}, std::vector<double>{1});
  CHECK_THROWS_AS(c.add("x", Shape{1}, std::vector<double>{1}), FormatError);
  CHECK_THROWS_AS(c.add("y", Shape{2}, std::vector<double>{1}), DimensionError);
}
