// SPDX-License-Identifier: Apache-2.0
#include "vitro/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "vitro/error.hpp"
#include "vitro/rng.hpp"

namespace vitro {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_double(const std::string& cell, double& out) {
  if (cell.empty()) return false;
  const char* begin = cell.data();
  const char* end = cell.data() + cell.size();
  if (*begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<WindowInstance> make_windows(std::span<const double> series, std::size_t lookback, std::size_t horizon,
                                         std::size_t stride, WindowId first_id, std::size_t channel) {
  if (lookback < 1 || horizon < 1 || stride < 1) {
    throw ConfigError("make_windows: lookback, horizon and stride must be >= 1");
  }
  if (series.size() < lookback + horizon) {
    throw InputError("make_windows: series of length " + std::to_string(series.size()) +
                     " is shorter than lookback + horizon = " + std::to_string(lookback + horizon));
  }
  std::vector<WindowInstance> out;
  for (std::size_t off = 0; off + lookback + horizon <= series.size(); off += stride) {
    WindowInstance w;
    w.id = first_id + out.size();
    w.channel = channel;
    w.offset = off;
    w.lookback.assign(series.begin() + static_cast<std::ptrdiff_t>(off),
                      series.begin() + static_cast<std::ptrdiff_t>(off + lookback));
    w.target.assign(series.begin() + static_cast<std::ptrdiff_t>(off + lookback),
                    series.begin() + static_cast<std::ptrdiff_t>(off + lookback + horizon));
    out.push_back(std::move(w));
  }
  return out;
}

CsvTable read_csv_table(const std::filesystem::path& path, const std::vector<std::string>& columns) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw InputError("CSV '" + path.string() + "' is empty");
  const std::vector<std::string> header = split_csv_line(line);

  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError("CSV '" + path.string() + "' line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    }
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw InputError("CSV '" + path.string() + "' has a header but no data rows");

  std::vector<std::size_t> selected;
  if (columns.empty()) {
    double ignored = 0.0;
    const bool leading_date = !parse_double(rows[0][0], ignored);
    for (std::size_t c = leading_date ? 1 : 0; c < header.size(); ++c) selected.push_back(c);
  } else {
    for (const std::string& name : columns) {
      auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) throw LookupError("CSV '" + path.string() + "' has no column '" + name + "'");
      selected.push_back(static_cast<std::size_t>(it - header.begin()));
    }
  }

  CsvTable table;
  for (std::size_t c : selected) {
    table.header.push_back(header[c]);
    Series col;
    col.reserve(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double v = 0.0;
      if (!parse_double(rows[r][c], v)) {
        throw ParseError("CSV '" + path.string() + "' row " + std::to_string(r + 1) + " col " + std::to_string(c + 1) +
                         ": cannot parse '" + rows[r][c] + "'");
      }
      col.push_back(v);
    }
    table.columns.push_back(std::move(col));
  }
  return table;
}

std::vector<Series> load_csv(const std::filesystem::path& path, const std::vector<std::string>& columns) {
  return read_csv_table(path, columns).columns;
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<Series>& columns) {
  if (header.size() != columns.size()) throw DimensionError("write_csv: header and column counts differ");
  const std::size_t n = columns.empty() ? 0 : columns[0].size();
  for (const Series& c : columns)
    if (c.size() != n) throw DimensionError("write_csv: ragged columns");
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << '\n';
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << format_double(columns[c][r]);
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_rows_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                    const std::vector<Series>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (std::size_t c = 0; c < header.size(); ++c) out << (c ? "," : "") << header[c];
  out << '\n';
  for (const Series& row : rows) {
    if (row.size() != header.size()) throw DimensionError("write_rows_csv: row width differs from header");
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << format_double(row[c]);
    out << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::vector<Series> read_rows_csv(const std::filesystem::path& path) {
  CsvTable table = read_csv_table(path);
  std::vector<Series> rows(table.columns.empty() ? 0 : table.columns[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (const Series& col : table.columns) rows[r].push_back(col[r]);
  return rows;
}

std::vector<Series> synth_generate(std::string_view name, const SynthParams& params, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synth." + std::string(name)));
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::vector<Series> out(params.channels, Series(params.length));

  if (name == "sines") {
    for (Series& ch : out) {
      std::vector<SineComponent> comps = params.sines;
      if (comps.empty()) {
        for (std::size_t j = 0; j < params.components; ++j) {
          const double period = 8.0 + 40.0 * unit(rng);
          comps.push_back({0.5 + unit(rng), 1.0 / period, two_pi * unit(rng)});
        }
      }
      for (std::size_t t = 0; t < params.length; ++t) {
        double v = 0.0;
        for (const SineComponent& c : comps)
          v += c.amplitude * std::sin(two_pi * c.frequency * static_cast<double>(t) + c.phase);
        ch[t] = v + (params.noise > 0.0 ? params.noise * noise(rng) : 0.0);
      }
    }
  } else if (name == "trend") {
    for (Series& ch : out) {
      const double offset = 2.0 * unit(rng) - 1.0;
      const double slope = (2.0 * unit(rng) - 1.0) * 4.0 / static_cast<double>(std::max<std::size_t>(params.length, 1));
      const double period = 12.0 + 36.0 * unit(rng);
      const double phase = two_pi * unit(rng);
      for (std::size_t t = 0; t < params.length; ++t) {
        const double tt = static_cast<double>(t);
        ch[t] = offset + slope * tt + 0.5 * std::sin(two_pi * tt / period + phase) +
                (params.noise > 0.0 ? params.noise * noise(rng) : 0.0);
      }
    }
  } else if (name == "arma-like") {
    constexpr double ar1 = 0.6, ar2 = -0.2, ma1 = 0.3;
    const double sigma = params.noise > 0.0 ? params.noise : 1.0;
    for (Series& ch : out) {
      double x1 = 0.0, x2 = 0.0, e1 = 0.0;
      for (std::size_t t = 0; t < params.length; ++t) {
        const double e = sigma * noise(rng);
        const double x = ar1 * x1 + ar2 * x2 + e + ma1 * e1;
        ch[t] = x;
        x2 = x1;
        x1 = x;
        e1 = e;
      }
    }
  } else {
    throw ConfigError("unknown synthetic generator '" + std::string(name) + "' (expected sines, trend, arma-like)");
  }
  return out;
}

StandardScaler StandardScaler::fit(const std::vector<Series>& channels, std::size_t end) {
  StandardScaler s;
  for (const Series& ch : channels) {
    const std::size_t n = std::min(end, ch.size());
    if (n == 0) throw InputError("scaler: empty fit range");
    double mu = 0.0;
    for (std::size_t t = 0; t < n; ++t) mu += ch[t];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t t = 0; t < n; ++t) var += (ch[t] - mu) * (ch[t] - mu);
    const double sd = std::sqrt(var / static_cast<double>(n));
    s.mean.push_back(mu);
    s.stddev.push_back(sd > 0.0 ? sd : 1.0);
  }
  return s;
}

std::vector<Series> StandardScaler::transform(const std::vector<Series>& channels) const {
  if (channels.size() != mean.size()) throw DimensionError("scaler: channel count differs from fit");
  std::vector<Series> out = channels;
  for (std::size_t c = 0; c < out.size(); ++c)
    for (double& v : out[c]) v = (v - mean[c]) / stddev[c];
  return out;
}

Series StandardScaler::inverse(std::size_t channel, std::span<const double> values) const {
  Series out(values.begin(), values.end());
  if (mean.empty()) return out;
  if (channel >= mean.size()) throw DimensionError("scaler: channel " + std::to_string(channel) + " was not fit");
  for (double& v : out) v = v * stddev[channel] + mean[channel];
  return out;
}

void DatasetSpec::validate() const {
  if (lookback < 2) throw ConfigError("dataset: lookback must be >= 2");
  if (horizon < 1 || stride < 1) throw ConfigError("dataset: horizon and stride must be >= 1");
  if (train_fraction <= 0.0 || val_fraction < 0.0 || train_fraction + val_fraction >= 1.0) {
    throw ConfigError("dataset: split fractions must satisfy 0 < train, 0 <= val, train + val < 1");
  }
}

WindowedDataset build_dataset(const std::vector<Series>& channels, const DatasetSpec& spec) {
  spec.validate();
  if (channels.empty()) throw InputError("dataset: no channels");
  const std::size_t length = channels[0].size();
  for (const Series& ch : channels)
    if (ch.size() != length) throw FormatError("dataset: channels have different lengths");

  WindowedDataset ds;
  ds.train_end = static_cast<std::size_t>(std::floor(static_cast<double>(length) * spec.train_fraction));
  ds.val_end = ds.train_end + static_cast<std::size_t>(std::floor(static_cast<double>(length) * spec.val_fraction));
  if (ds.train_end < spec.lookback + spec.horizon) {
    throw InputError("dataset: train split (" + std::to_string(ds.train_end) + " steps) shorter than lookback + horizon");
  }
  ds.scaler = spec.scale ? StandardScaler::fit(channels, ds.train_end) : StandardScaler{};
  const std::vector<Series> data = spec.scale ? ds.scaler.transform(channels) : channels;

  WindowId next = 0;
  // Windows whose targets fall in [target_begin, end).
  auto collect = [&](std::size_t target_begin, std::size_t end, std::vector<WindowInstance>& dst) {
    for (std::size_t c = 0; c < data.size(); ++c) {
      const std::size_t start = target_begin - spec.lookback;
      if (end < start || end - start < spec.lookback + spec.horizon) continue;
      std::span<const double> region(data[c].data() + start, end - start);
      for (WindowInstance& w : make_windows(region, spec.lookback, spec.horizon, spec.stride, next, c)) {
        w.offset += start;
        dst.push_back(std::move(w));
      }
      if (!dst.empty()) next = dst.back().id + 1;
    }
  };
  collect(spec.lookback, ds.train_end, ds.train);
  collect(ds.train_end, ds.val_end, ds.val);
  collect(ds.val_end, length, ds.test);
  return ds;
}

}  // namespace vitro
