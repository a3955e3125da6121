#pragma once

// Flat, declarative run configuration. Keys of the JSON form match the long
// CLI flag names with dashes replaced by underscores, so a config file and
// a command line can be merged key by key.

#include <cstdint>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mtabl/data.hpp"
#include "mtabl/error.hpp"
#include "mtabl/network.hpp"
#include "mtabl/optim.hpp"

namespace mtabl {

inline std::string to_string(Orientation o) {
  return o == Orientation::feature_major ? "feature-major" : "event-major";
}

inline Orientation orientation_from_string(const std::string& s) {
  if (s == "feature-major") return Orientation::feature_major;
  if (s == "event-major") return Orientation::event_major;
  throw ConfigError("unknown orientation '" + s + "' (expected feature-major or event-major)");
}

inline std::string to_string(ClassWeighting w) {
  return w == ClassWeighting::uniform ? "uniform" : "inverse-frequency";
}

inline ClassWeighting class_weighting_from_string(const std::string& s) {
  if (s == "uniform") return ClassWeighting::uniform;
  if (s == "inverse-frequency") return ClassWeighting::inverse_frequency;
  throw ConfigError("unknown class weighting '" + s + "'");
}

enum class DataSource { none, directory, cache, synthetic };

struct RunConfig {
  Topology topology = Topology::A;
  LayerKind layer = LayerKind::mtabl;
  std::size_t heads = 3;
  bool freeze_diagonal = false;

  std::size_t horizon = 10;
  std::size_t window = 10;
  DataSource source = DataSource::none;
  std::string data_dir;
  std::string dataset_file;
  Orientation orientation = Orientation::feature_major;
  DaySplit split;

  std::size_t synth_samples = 600;
  std::size_t synth_validation = 300;
  std::size_t synth_test = 300;
  SynthDifficulty synth_difficulty = SynthDifficulty::multi;
  double synth_noise = 0.5;
  std::uint64_t synth_seed = 0;

  OptimConfig optim;
  std::size_t seeds = 1;
  std::uint64_t seed = 0;  // first training seed; run i uses seed + i
  std::string out = "mtabl_run";

  SynthSpec synth_spec() const {
    SynthSpec s;
    s.n_samples = synth_samples;
    s.n_validation = synth_validation;
    s.n_test = synth_test;
    s.features = lob_feature_count;
    s.window = window;
    s.seed = synth_seed;
    s.difficulty = synth_difficulty;
    s.noise = synth_noise;
    return s;
  }

  NetworkSpec network() const {
    return make_topology(topology, layer, layer == LayerKind::mtabl ? heads : 1, lob_feature_count,
                         window, std::nullopt, freeze_diagonal);
  }

  /// Checks everything that can be checked without touching data.
  void validate() const {
    if (heads < 1 || heads > max_heads)
      throw ConfigError("heads must lie in [1, " + std::to_string(max_heads) + "], got " +
                        std::to_string(heads));
    if (layer == LayerKind::bl) throw ConfigError("layer must be tabl or mtabl");
    (void)horizon_index(horizon);
    if (window == 0) throw ConfigError("window must be at least 1");
    if (seeds == 0) throw ConfigError("seeds must be at least 1");
    if (source == DataSource::none)
      throw ConfigError("no data source: pass --data DIR, --dataset FILE or --synth");
    if (source == DataSource::synthetic) {
      if (synth_samples == 0) throw ConfigError("synth_samples must be at least 1");
      if (window < 3) throw ConfigError("synthetic data needs window >= 3");
      if (!(synth_noise >= 0.0)) throw ConfigError("synth_noise must be non-negative");
    }
    if (split.train == 0 && source == DataSource::directory)
      throw ConfigError("split must give at least one training day");
    optim.validate();
    (void)network();
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["topology"] = to_string(c.topology);
  j["layer"] = std::string(to_string(c.layer));
  j["heads"] = c.heads;
  j["freeze_diagonal"] = c.freeze_diagonal;
  j["horizon"] = c.horizon;
  j["window"] = c.window;
  j["data"] = c.source == DataSource::directory ? nlohmann::json(c.data_dir) : nlohmann::json();
  j["dataset"] = c.source == DataSource::cache ? nlohmann::json(c.dataset_file) : nlohmann::json();
  j["synth"] = c.source == DataSource::synthetic;
  j["orientation"] = to_string(c.orientation);
  j["split"] = {c.split.train, c.split.validation, c.split.test};
  j["synth_samples"] = c.synth_samples;
  j["synth_validation"] = c.synth_validation;
  j["synth_test"] = c.synth_test;
  j["synth_difficulty"] = std::string(to_string(c.synth_difficulty));
  j["synth_noise"] = c.synth_noise;
  j["synth_seed"] = c.synth_seed;
  j["optimizer"] = to_string(c.optim.algorithm);
  j["lr"] = c.optim.learning_rate;
  j["beta1"] = c.optim.beta1;
  j["beta2"] = c.optim.beta2;
  j["epsilon"] = c.optim.epsilon;
  j["momentum"] = c.optim.momentum;
  j["batch_size"] = c.optim.batch_size;
  j["epochs"] = c.optim.max_epochs;
  j["patience"] = c.optim.patience;
  j["lr_decay"] = c.optim.lr_decay;
  j["class_weighting"] = to_string(c.optim.weighting);
  j["seeds"] = c.seeds;
  j["seed"] = c.seed;
  j["out"] = c.out;
  return j;
}

/// Applies every key present in `j` on top of `c`. Unknown keys are errors.
/// Naming one data source (data, dataset, synth=true) replaces the others.
inline RunConfig merge_config(RunConfig c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  std::size_t sources = 0;
  for (const char* k : {"data", "dataset"})
    if (j.contains(k) && !j.at(k).is_null()) ++sources;
  if (j.contains("synth") && j.at("synth").is_boolean() && j.at("synth").get<bool>()) ++sources;
  if (sources > 1) throw ConfigError("give only one of data, dataset and synth");

  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "topology") c.topology = topology_from_string(v.get<std::string>());
      else if (key == "layer") c.layer = layer_kind_from_string(v.get<std::string>());
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "freeze_diagonal") c.freeze_diagonal = v.get<bool>();
      else if (key == "horizon") c.horizon = v.get<std::size_t>();
      else if (key == "window") c.window = v.get<std::size_t>();
      else if (key == "data") {
        if (!v.is_null()) {
          c.source = DataSource::directory;
          c.data_dir = v.get<std::string>();
        }
      } else if (key == "dataset") {
        if (!v.is_null()) {
          c.source = DataSource::cache;
          c.dataset_file = v.get<std::string>();
        }
      } else if (key == "synth") {
        if (v.get<bool>()) c.source = DataSource::synthetic;
        else if (c.source == DataSource::synthetic) c.source = DataSource::none;
      } else if (key == "orientation") c.orientation = orientation_from_string(v.get<std::string>());
      else if (key == "split") {
        const auto s = v.get<std::vector<std::size_t>>();
        if (s.size() != 3) throw ConfigError("split needs three day counts");
        c.split = {s[0], s[1], s[2]};
      } else if (key == "synth_samples") c.synth_samples = v.get<std::size_t>();
      else if (key == "synth_validation") c.synth_validation = v.get<std::size_t>();
      else if (key == "synth_test") c.synth_test = v.get<std::size_t>();
      else if (key == "synth_difficulty") c.synth_difficulty = synth_difficulty_from_string(v.get<std::string>());
      else if (key == "synth_noise") c.synth_noise = v.get<double>();
      else if (key == "synth_seed") c.synth_seed = v.get<std::uint64_t>();
      else if (key == "optimizer") c.optim.algorithm = algorithm_from_string(v.get<std::string>());
      else if (key == "lr") c.optim.learning_rate = v.get<double>();
      else if (key == "beta1") c.optim.beta1 = v.get<double>();
      else if (key == "beta2") c.optim.beta2 = v.get<double>();
      else if (key == "epsilon") c.optim.epsilon = v.get<double>();
      else if (key == "momentum") c.optim.momentum = v.get<double>();
      else if (key == "batch_size") c.optim.batch_size = v.get<std::size_t>();
      else if (key == "epochs") c.optim.max_epochs = v.get<std::size_t>();
      else if (key == "patience") c.optim.patience = v.get<std::size_t>();
      else if (key == "lr_decay") c.optim.lr_decay = v.get<double>();
      else if (key == "class_weighting") c.optim.weighting = class_weighting_from_string(v.get<std::string>());
      else if (key == "seeds") c.seeds = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "out") c.out = v.get<std::string>();
      else throw ConfigError("unknown configuration key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("configuration key '" + key + "': " + e.what());
    }
  }
  return c;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("configuration file '" + path + "': " + e.what());
  }
}

}  // namespace mtabl
