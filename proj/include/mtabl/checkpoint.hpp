#pragma once

// Model checkpoint: magic + format version, the network spec and free-form
// metadata as JSON text, every parameter block with a (rows, cols) header
// and little-endian float64 payload, then the normalization statistics.

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "mtabl/binary_io.hpp"
#include "mtabl/data.hpp"
#include "mtabl/error.hpp"
#include "mtabl/network.hpp"

namespace mtabl {

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers()) {
    layers.push_back({{"kind", std::string(to_string(l.kind))},
                      {"out_rows", l.out_rows},
                      {"out_cols", l.out_cols},
                      {"heads", l.heads},
                      {"activation", std::string(to_string(l.activation))},
                      {"freeze_attention_diagonal", l.freeze_attention_diagonal}});
  }
  return {{"input_rows", spec.input_rows()}, {"input_cols", spec.input_cols()}, {"layers", layers}};
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  try {
    std::vector<LayerSpec> layers;
    for (const auto& l : j.at("layers")) {
      LayerSpec ls;
      ls.kind = layer_kind_from_string(l.at("kind").get<std::string>());
      ls.out_rows = l.at("out_rows").get<std::size_t>();
      ls.out_cols = l.at("out_cols").get<std::size_t>();
      ls.heads = l.value("heads", std::size_t{1});
      ls.activation = activation_from_string(l.at("activation").get<std::string>());
      ls.freeze_attention_diagonal = l.value("freeze_attention_diagonal", false);
      layers.push_back(ls);
    }
    return NetworkSpec(j.at("input_rows").get<std::size_t>(), j.at("input_cols").get<std::size_t>(),
                       std::move(layers));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid network spec: ") + e.what());
  }
}

struct Checkpoint {
  NetworkSpec spec;
  NetworkParams params;
  NormalizationStats normalization;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr std::array<char, 8> checkpoint_magic{'M', 'T', 'A', 'B', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_format_version = 1;

inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
  using namespace binary;
  check_params(ck.spec, ck.params);
  write_magic(os, checkpoint_magic, checkpoint_format_version);
  write_string(os, to_json(ck.spec).dump());
  write_string(os, ck.metadata.dump());
  write_u64(os, ck.params.size());
  for (const auto& layer : ck.params) {
    const auto blocks = param_blocks(layer);
    write_u64(os, blocks.size());
    for (const auto& b : blocks) {
      write_string(os, b.name);
      write_u64(os, b.values.size() / b.cols);
      write_u64(os, b.cols);
      for (double v : b.values) write_le(os, v);
    }
  }
  write_u64(os, ck.normalization.mean.size());
  for (double v : ck.normalization.mean) write_le(os, v);
  for (double v : ck.normalization.stddev) write_le(os, v);
}

inline Checkpoint load_checkpoint(std::istream& is) {
  using namespace binary;
  const auto version = read_magic(is, checkpoint_magic, "checkpoint");
  if (version != checkpoint_format_version) {
    throw FormatError("checkpoint format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(checkpoint_format_version) + ")");
  }
  nlohmann::json spec_json, meta;
  try {
    spec_json = nlohmann::json::parse(read_string(is, "network spec"));
    meta = nlohmann::json::parse(read_string(is, "metadata"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
  }
  NetworkSpec spec = [&] {
    try {
      return network_spec_from_json(spec_json);
    } catch (const ConfigError& e) {
      throw FormatError(std::string("corrupt checkpoint spec: ") + e.what());
    }
  }();
  // Materialise the layout from the spec, then overwrite every value.
  NetworkParams params = init_params(spec, 0);
  if (read_u64(is, "layer count") != params.size()) throw FormatError("checkpoint layer count mismatch");
  for (auto& layer : params) {
    auto blocks = param_blocks(layer);
    if (read_u64(is, "block count") != blocks.size()) throw FormatError("checkpoint block count mismatch");
    for (auto& b : blocks) {
      const auto name = read_string(is, "block name", 256);
      const auto rows = read_u64(is, "block rows");
      const auto cols = read_u64(is, "block cols");
      if (name != b.name || cols != b.cols || rows * cols != b.values.size()) {
        throw FormatError("checkpoint block '" + name + "' does not match spec block '" + b.name + "'");
      }
      for (double& v : b.values) v = read_le<double>(is, "block payload");
    }
  }
  NormalizationStats norm;
  const auto n = read_u64(is, "normalization size");
  if (n > (1u << 20)) throw FormatError("implausible normalization size in checkpoint");
  norm.mean.resize(n);
  norm.stddev.resize(n);
  for (double& v : norm.mean) v = read_le<double>(is, "normalization mean");
  for (double& v : norm.stddev) v = read_le<double>(is, "normalization stddev");
  return Checkpoint{std::move(spec), std::move(params), std::move(norm), std::move(meta)};
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint '" + path + "'");
  save_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace mtabl
