#pragma once

// Network checkpoint files.
//
// Layout: an 8-byte little-endian header length N, N bytes of JSON header,
// then every parameter as a little-endian IEEE-754 double in the order of
// flatten_parameters (per layer: weights row-major, then bias).
//
// The header carries the format tag "archforge-net-v1", the topology kind,
// per-layer shapes, activations and freeze flags, the parameter count and a
// free-form seed lineage object.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "archforge/errors.hpp"
#include "archforge/network.hpp"

namespace archforge {

inline constexpr const char* kCheckpointFormat = "archforge-net-v1";

namespace detail {

inline void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline nlohmann::ordered_json layer_json(const DenseLayer& l, bool head) {
  nlohmann::ordered_json j;
  j["fan_in"] = l.fan_in();
  j["fan_out"] = l.fan_out();
  j["activation"] = head ? "softmax" : std::string(to_string(l.activation));
  j["frozen"] = l.frozen;
  return j;
}

inline DenseLayer layer_from_json(const nlohmann::ordered_json& j, bool head) {
  const auto fan_in = j.at("fan_in").get<Eigen::Index>();
  const auto fan_out = j.at("fan_out").get<Eigen::Index>();
  if (fan_in < 1 || fan_out < 1) throw DataError("checkpoint: layer dimensions must be >= 1");
  DenseLayer l(fan_in, fan_out, head ? Activation::tanh : parse_activation(j.at("activation").get<std::string>()));
  l.frozen = j.at("frozen").get<bool>();
  return l;
}

template <FeedforwardNetwork Net>
std::vector<std::uint8_t> encode_checkpoint(const Net& net, const char* kind, const nlohmann::ordered_json& lineage) {
  nlohmann::ordered_json h;
  h["format"] = kCheckpointFormat;
  h["kind"] = kind;
  h["input_dim"] = net.input_dim();
  h["output_dim"] = net.output_dim();
  const auto layers = net.parameter_layers();
  nlohmann::ordered_json shapes = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < layers.size(); ++i) shapes.push_back(layer_json(*layers[i], i + 1 == layers.size()));
  h["layers"] = shapes;
  h["parameter_count"] = net.parameter_count();
  h["seed_lineage"] = lineage;

  const std::string header = h.dump();
  std::vector<std::uint8_t> out;
  out.reserve(8 + header.size() + 8 * net.parameter_count());
  put_u64_le(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  const Vector flat = flatten_parameters(net);
  for (Eigen::Index i = 0; i < flat.size(); ++i) put_u64_le(out, std::bit_cast<std::uint64_t>(flat(i)));
  return out;
}

struct DecodedCheckpoint {
  nlohmann::ordered_json header;
  std::vector<DenseLayer> layers;  // head / output layer last
  Vector parameters;
};

inline DecodedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const char* kind) {
  if (bytes.size() < 8) throw TruncatedError("checkpoint: missing header length");
  const std::uint64_t n = get_u64_le(bytes.data());
  if (n > bytes.size() - 8) throw TruncatedError("checkpoint: header runs past end of file");
  DecodedCheckpoint d;
  try {
    d.header = nlohmann::ordered_json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(n));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: unreadable header: ") + e.what());
  }
  if (!d.header.is_object() || d.header.value("format", "") != kCheckpointFormat)
    throw BadMagicError("checkpoint: format tag is not " + std::string(kCheckpointFormat));
  if (d.header.value("kind", "") != kind)
    throw DataError("checkpoint: holds a " + d.header.value("kind", std::string("?")) + " network, expected " + kind);
  try {
    const auto& shapes = d.header.at("layers");
    if (!shapes.is_array() || shapes.empty()) throw DataError("checkpoint: no layers");
    for (std::size_t i = 0; i < shapes.size(); ++i) d.layers.push_back(layer_from_json(shapes[i], i + 1 == shapes.size()));
    std::size_t count = 0;
    for (const auto& l : d.layers) count += l.parameter_count();
    if (count != d.header.at("parameter_count").get<std::size_t>())
      throw DataError("checkpoint: parameter_count disagrees with the layer shapes");
    const std::size_t blob = bytes.size() - 8 - static_cast<std::size_t>(n);
    if (blob < 8 * count) throw TruncatedError("checkpoint: parameter blob is truncated");
    if (blob > 8 * count) throw DataError("checkpoint: trailing bytes after the parameter blob");
    d.parameters.resize(static_cast<Eigen::Index>(count));
    const std::uint8_t* p = bytes.data() + 8 + n;
    for (std::size_t i = 0; i < count; ++i) d.parameters(static_cast<Eigen::Index>(i)) = std::bit_cast<double>(get_u64_le(p + 8 * i));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header: ") + e.what());
  } catch (const ContractViolation& e) {
    throw DataError(std::string("checkpoint: inconsistent topology: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return d;
}

inline std::vector<std::uint8_t> read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_all(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f.flush()) throw Error("write failed for " + path.string());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const LayeredNetwork& net, const nlohmann::ordered_json& lineage = {}) {
  return detail::encode_checkpoint(net, "layered", lineage);
}

inline std::vector<std::uint8_t> encode_checkpoint(const CascadeNetwork& net, const nlohmann::ordered_json& lineage = {}) {
  return detail::encode_checkpoint(net, "cascade", lineage);
}

inline LayeredNetwork decode_layered_checkpoint(const std::vector<std::uint8_t>& bytes) {
  auto d = detail::decode_checkpoint(bytes, "layered");
  try {
    LayeredNetwork net(d.header.at("input_dim").get<Eigen::Index>(), {}, d.header.at("output_dim").get<Eigen::Index>());
    for (std::size_t i = 0; i + 1 < d.layers.size(); ++i) net.push_hidden(d.layers[i]);
    net.set_head(d.layers.back());
    assign_parameters(net, d.parameters);
    return net;
  } catch (const ContractViolation& e) {
    throw DataError(std::string("checkpoint: inconsistent topology: ") + e.what());
  }
}

inline CascadeNetwork decode_cascade_checkpoint(const std::vector<std::uint8_t>& bytes) {
  auto d = detail::decode_checkpoint(bytes, "cascade");
  try {
    CascadeNetwork net(d.header.at("input_dim").get<Eigen::Index>(), d.header.at("output_dim").get<Eigen::Index>());
    Eigen::Index features = net.input_dim();
    for (std::size_t i = 0; i + 1 < d.layers.size(); ++i) {
      features += d.layers[i].fan_out();
      net.insert_block(d.layers[i], DenseLayer(features, net.output_dim(), Activation::tanh));
    }
    net.set_output(d.layers.back());
    assign_parameters(net, d.parameters);
    return net;
  } catch (const ContractViolation& e) {
    throw DataError(std::string("checkpoint: inconsistent topology: ") + e.what());
  }
}

template <FeedforwardNetwork Net>
void save_checkpoint(const std::filesystem::path& path, const Net& net, const nlohmann::ordered_json& lineage = {}) {
  detail::write_all(path, encode_checkpoint(net, lineage));
}

inline LayeredNetwork load_layered_checkpoint(const std::filesystem::path& path) {
  return decode_layered_checkpoint(detail::read_all(path));
}

inline CascadeNetwork load_cascade_checkpoint(const std::filesystem::path& path) {
  return decode_cascade_checkpoint(detail::read_all(path));
}

}  // namespace archforge
