#pragma once

// Limit-order-book day files, sliding-window samples, day-based splits,
// z-score normalisation and a synthetic generator for desk-scale runs.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mtabl/binary_io.hpp"
#include "mtabl/error.hpp"
#include "mtabl/matrix.hpp"
#include "mtabl/network.hpp"

namespace mtabl {

/// Number of leading feature rows used as model input (top-10 bid/ask
/// prices and volumes).
inline constexpr std::size_t lob_feature_count = 40;

/// Prediction horizons, in order events, of the trailing label rows.
inline constexpr std::array<std::size_t, 5> label_horizons{10, 20, 30, 50, 100};

/// One trading day: rows are dataset dimensions, columns are order events.
struct RawDayMatrix {
  Matrix values;
};

struct SeriesSample {
  Matrix x;               // features x T, oldest event first
  std::size_t label = 0;  // 0 up, 1 stationary, 2 down
  std::size_t day = 0;    // source day index

  friend bool operator==(const SeriesSample&, const SeriesSample&) = default;
};

struct NormalizationStats {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const { return mean.empty(); }
  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

struct Dataset {
  std::vector<SeriesSample> train;
  std::vector<SeriesSample> validation;
  std::vector<SeriesSample> test;
  NormalizationStats normalization;
  std::vector<std::string> files;
  std::size_t horizon = 10;
  std::size_t window = 10;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Which axis of the text grid holds the dataset dimensions.
enum class Orientation {
  feature_major,  // one row per dimension, one column per event
  event_major,    // one row per event
};

/// Receives non-fatal diagnostics; defaults to discarding them.
using WarningSink = std::function<void(const std::string&)>;

/// Parses a whitespace-separated numeric grid.
inline RawDayMatrix parse_day(std::istream& in, const std::string& name,
                              Orientation orientation = Orientation::feature_major) {
  std::vector<double> data;
  std::size_t cols = 0, rows = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t count = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (true) {
      while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
      if (p >= end) break;
      const char* tok = p;
      while (p < end && !std::isspace(static_cast<unsigned char>(*p))) ++p;
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(tok, p, v);
      if (ec != std::errc() || ptr != p) {
        throw FormatError(name + ": parse error at row " + std::to_string(line_no) + ", column " +
                          std::to_string(count + 1) + ": '" + std::string(tok, p) + "'");
      }
      data.push_back(v);
      ++count;
    }
    if (count == 0) continue;
    if (rows == 0) cols = count;
    else if (count != cols) {
      throw FormatError(name + ": ragged row " + std::to_string(line_no) + " has " +
                        std::to_string(count) + " values, expected " + std::to_string(cols));
    }
    ++rows;
  }
  if (rows == 0) throw FormatError(name + ": empty file");
  Matrix m(rows, cols, std::move(data));
  if (orientation == Orientation::event_major) m = transpose(m);
  return RawDayMatrix{std::move(m)};
}

inline RawDayMatrix load_day(const std::string& path,
                             Orientation orientation = Orientation::feature_major) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open day file '" + path + "'");
  return parse_day(in, path, orientation);
}

inline std::size_t horizon_index(std::size_t horizon) {
  for (std::size_t i = 0; i < label_horizons.size(); ++i)
    if (label_horizons[i] == horizon) return i;
  throw ConfigError("horizon " + std::to_string(horizon) + " is not one of 10, 20, 30, 50, 100");
}

/// Dataset annotation {1, 2, 3} = {up, stationary, down} to class {0, 1, 2}.
inline std::size_t class_from_annotation(double value) {
  static constexpr std::array<std::pair<double, std::size_t>, 3> table{
      {{1.0, 0}, {2.0, 1}, {3.0, 2}}};
  for (auto [annotation, cls] : table)
    if (value == annotation) return cls;
  throw DataError("unknown label annotation " + std::to_string(value));
}

/// N - T + 1 samples; sample i covers events i .. i+T-1 and carries the
/// horizon label of its newest event.
inline std::vector<SeriesSample> windowize(const RawDayMatrix& day, std::size_t window,
                                           std::size_t horizon, std::size_t day_index = 0,
                                           const WarningSink& warn = {}) {
  const Matrix& v = day.values;
  if (window == 0) throw ConfigError("window length must be positive");
  if (v.rows() < lob_feature_count + label_horizons.size()) {
    throw DataError("day has " + std::to_string(v.rows()) + " rows; need at least " +
                    std::to_string(lob_feature_count + label_horizons.size()));
  }
  const std::size_t label_row = v.rows() - label_horizons.size() + horizon_index(horizon);
  const std::size_t n = v.cols();
  std::vector<SeriesSample> out;
  if (n < window) {
    if (warn) {
      warn("day " + std::to_string(day_index) + " has " + std::to_string(n) +
           " events, fewer than window " + std::to_string(window) + "; no samples");
    }
    return out;
  }
  out.reserve(n - window + 1);
  for (std::size_t i = 0; i + window <= n; ++i) {
    Matrix x(lob_feature_count, window);
    for (std::size_t f = 0; f < lob_feature_count; ++f)
      for (std::size_t t = 0; t < window; ++t) x(f, t) = v(f, i + t);
    out.push_back({std::move(x), class_from_annotation(v(label_row, i + window - 1)), day_index});
  }
  return out;
}

/// Day counts per partition, assigned chronologically.
struct DaySplit {
  std::size_t train = 6;
  std::size_t validation = 1;
  std::size_t test = 3;
};

inline Dataset split_days(const std::vector<RawDayMatrix>& days, const DaySplit& split,
                          std::size_t window, std::size_t horizon, const WarningSink& warn = {}) {
  const std::size_t needed = split.train + split.validation + split.test;
  if (needed > days.size()) {
    throw ConfigError("split needs " + std::to_string(needed) + " days but only " +
                      std::to_string(days.size()) + " are available");
  }
  Dataset ds;
  ds.window = window;
  ds.horizon = horizon;
  for (std::size_t d = 0; d < needed; ++d) {
    auto samples = windowize(days[d], window, horizon, d, warn);
    auto& target = d < split.train                      ? ds.train
                   : d < split.train + split.validation ? ds.validation
                                                        : ds.test;
    target.insert(target.end(), std::make_move_iterator(samples.begin()),
                  std::make_move_iterator(samples.end()));
  }
  return ds;
}

inline Dataset split_days(const std::vector<std::string>& files, const DaySplit& split,
                          std::size_t window, std::size_t horizon,
                          Orientation orientation = Orientation::feature_major,
                          const WarningSink& warn = {}) {
  const std::size_t needed = split.train + split.validation + split.test;
  if (needed > files.size()) {
    throw ConfigError("split needs " + std::to_string(needed) + " day files but only " +
                      std::to_string(files.size()) + " were given");
  }
  std::vector<RawDayMatrix> days;
  for (std::size_t d = 0; d < needed; ++d) days.push_back(load_day(files[d], orientation));
  Dataset ds = split_days(days, split, window, horizon, warn);
  ds.files.assign(files.begin(), files.begin() + static_cast<std::ptrdiff_t>(needed));
  return ds;
}

inline constexpr double constant_feature_threshold = 1e-12;

/// Per-feature mean and population standard deviation over every event of
/// every training sample.
inline NormalizationStats compute_normalization(const std::vector<SeriesSample>& train) {
  if (train.empty()) throw DataError("normalization needs a non-empty training partition");
  const std::size_t rows = train.front().x.rows();
  NormalizationStats s;
  s.mean.assign(rows, 0.0);
  s.stddev.assign(rows, 0.0);
  double count = 0.0;
  for (const auto& smp : train) {
    if (smp.x.rows() != rows) throw DimensionError("training samples have differing feature counts");
    for (std::size_t r = 0; r < rows; ++r)
      for (double v : smp.x.row(r)) s.mean[r] += v;
    count += static_cast<double>(smp.x.cols());
  }
  for (double& m : s.mean) m /= count;
  for (const auto& smp : train)
    for (std::size_t r = 0; r < rows; ++r)
      for (double v : smp.x.row(r)) s.stddev[r] += (v - s.mean[r]) * (v - s.mean[r]);
  for (double& v : s.stddev) v = std::sqrt(v / count);
  return s;
}

/// z-score with the given statistics; near-constant features are only centred.
inline void apply_normalization(std::vector<SeriesSample>& samples, const NormalizationStats& s) {
  for (auto& smp : samples) {
    if (smp.x.rows() != s.mean.size()) throw DimensionError("sample does not match normalization stats");
    for (std::size_t r = 0; r < smp.x.rows(); ++r) {
      const double sd = s.stddev[r];
      for (double& v : smp.x.row(r)) {
        v -= s.mean[r];
        if (sd >= constant_feature_threshold) v /= sd;
      }
    }
  }
}

inline Dataset normalize(Dataset ds) {
  ds.normalization = compute_normalization(ds.train);
  apply_normalization(ds.train, ds.normalization);
  apply_normalization(ds.validation, ds.normalization);
  apply_normalization(ds.test, ds.normalization);
  return ds;
}

enum class SynthDifficulty {
  single,  // one pattern; its temporal position decides the class
  multi,   // three patterns; whether they co-occur as singletons, a pair or a triplet decides
};

inline SynthDifficulty synth_difficulty_from_string(std::string_view s) {
  if (s == "single") return SynthDifficulty::single;
  if (s == "multi") return SynthDifficulty::multi;
  throw ConfigError("unknown synthetic difficulty '" + std::string(s) + "'");
}

inline std::string_view to_string(SynthDifficulty d) {
  return d == SynthDifficulty::single ? "single" : "multi";
}

struct SynthSpec {
  std::size_t n_samples = 64;  // training samples
  std::size_t features = lob_feature_count;
  std::size_t window = 10;
  std::uint64_t seed = 0;
  SynthDifficulty difficulty = SynthDifficulty::single;
  std::size_t n_validation = 0;
  std::size_t n_test = 0;
  double noise = 0.5;
  double amplitude = 1.0;
};

/// The injected pattern vectors (entries +-amplitude), a pure function of
/// (features, seed).
inline std::vector<std::vector<double>> synth_patterns(std::size_t features, std::uint64_t seed,
                                                       double amplitude = 1.0) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  std::bernoulli_distribution coin(0.5);
  std::vector<std::vector<double>> out(3, std::vector<double>(features));
  for (auto& p : out)
    for (double& v : p) v = coin(rng) ? amplitude : -amplitude;
  return out;
}

/// Temporal position that carries the pattern for class c at difficulty "single".
inline std::size_t synth_single_position(std::size_t cls, std::size_t window) {
  return std::min(window - 1, static_cast<std::size_t>((2 * cls + 1) * window / 6));
}

namespace detail {

inline void inject(Matrix& x, std::size_t t, const std::vector<double>& pattern) {
  for (std::size_t f = 0; f < x.rows(); ++f) x(f, t) += pattern[f];
}

inline std::vector<SeriesSample> synth_partition(const SynthSpec& spec, std::size_t n,
                                                 std::size_t day,
                                                 const std::vector<std::vector<double>>& patterns,
                                                 std::mt19937_64& rng) {
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = i % num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> noise(0.0, spec.noise);
  std::vector<SeriesSample> out;
  out.reserve(n);
  std::vector<std::size_t> times(spec.window);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix x(spec.features, spec.window);
    for (double& v : x.data()) v = noise(rng);
    const std::size_t c = labels[i];
    if (spec.difficulty == SynthDifficulty::single) {
      inject(x, synth_single_position(c, spec.window), patterns[0]);
    } else {
      std::iota(times.begin(), times.end(), 0);
      std::shuffle(times.begin(), times.end(), rng);
      // class 0: three singletons; class 1: a pair and a singleton; class 2: a triplet
      if (c == 0) {
        for (std::size_t j = 0; j < 3; ++j) inject(x, times[j], patterns[j]);
      } else if (c == 1) {
        inject(x, times[0], patterns[0]);
        inject(x, times[0], patterns[1]);
        inject(x, times[1], patterns[2]);
      } else {
        for (std::size_t j = 0; j < 3; ++j) inject(x, times[0], patterns[j]);
      }
    }
    out.push_back({std::move(x), c, day});
  }
  return out;
}

}  // namespace detail

/// Deterministic per seed. Partitions are tagged as days 0, 1, 2.
inline Dataset synth_generate(const SynthSpec& spec) {
  if (spec.n_samples == 0 || spec.features == 0 || spec.window == 0) {
    throw ConfigError("synthetic dataset parameters must be positive");
  }
  if (spec.window < 3) throw ConfigError("synthetic dataset needs window >= 3");
  const auto patterns = synth_patterns(spec.features, spec.seed, spec.amplitude);
  std::mt19937_64 rng(spec.seed);
  Dataset ds;
  ds.window = spec.window;
  ds.train = detail::synth_partition(spec, spec.n_samples, 0, patterns, rng);
  ds.validation = detail::synth_partition(spec, spec.n_validation, 1, patterns, rng);
  ds.test = detail::synth_partition(spec, spec.n_test, 2, patterns, rng);
  return ds;
}

inline std::vector<std::size_t> labels_of(const std::vector<SeriesSample>& samples) {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

inline constexpr std::array<char, 8> dataset_magic{'M', 'T', 'A', 'B', 'L', 'D', 'S', '\0'};
inline constexpr std::uint32_t dataset_format_version = 1;

inline void save_dataset(std::ostream& os, const Dataset& ds) {
  using namespace binary;
  write_magic(os, dataset_magic, dataset_format_version);
  write_u64(os, ds.horizon);
  write_u64(os, ds.window);
  write_u64(os, ds.files.size());
  for (const auto& f : ds.files) write_string(os, f);
  write_u64(os, ds.normalization.mean.size());
  for (double v : ds.normalization.mean) write_le(os, v);
  for (double v : ds.normalization.stddev) write_le(os, v);
  for (const auto* part : {&ds.train, &ds.validation, &ds.test}) {
    write_u64(os, part->size());
    for (const auto& s : *part) {
      write_u64(os, s.label);
      write_u64(os, s.day);
      write_matrix(os, s.x);
    }
  }
}

inline Dataset load_dataset(std::istream& is) {
  using namespace binary;
  const auto version = read_magic(is, dataset_magic, "dataset cache");
  if (version != dataset_format_version) {
    throw FormatError("dataset cache version " + std::to_string(version) + " is not supported");
  }
  Dataset ds;
  ds.horizon = read_u64(is, "horizon");
  ds.window = read_u64(is, "window");
  const auto nfiles = read_u64(is, "file count");
  if (nfiles > (1u << 20)) throw FormatError("implausible file count in dataset cache");
  for (std::uint64_t i = 0; i < nfiles; ++i) ds.files.push_back(read_string(is, "file name"));
  const auto nstats = read_u64(is, "normalization size");
  if (nstats > (1u << 20)) throw FormatError("implausible normalization size in dataset cache");
  ds.normalization.mean.resize(nstats);
  ds.normalization.stddev.resize(nstats);
  for (double& v : ds.normalization.mean) v = read_le<double>(is, "normalization mean");
  for (double& v : ds.normalization.stddev) v = read_le<double>(is, "normalization stddev");
  for (auto* part : {&ds.train, &ds.validation, &ds.test}) {
    const auto n = read_u64(is, "sample count");
    if (n > (1ull << 32)) throw FormatError("implausible sample count in dataset cache");
    part->reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      SeriesSample s;
      s.label = read_u64(is, "label");
      if (s.label >= num_classes) throw FormatError("dataset cache holds an invalid label");
      s.day = read_u64(is, "day");
      s.x = read_matrix(is, "sample");
      part->push_back(std::move(s));
    }
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write dataset cache '" + path + "'");
  save_dataset(os, ds);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open dataset cache '" + path + "'");
  return load_dataset(is);
}

}  // namespace mtabl
