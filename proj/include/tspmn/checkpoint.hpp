// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file layout (all integers and floats little-endian):
//   "TSPM" | u32 version | u32 header_bytes | header (UTF-8 JSON)
//   | f32 parameter arrays in visit_model_tensors order, row-major
//   | [f32 first moments, f32 second moments, same order]   (if has_optimizer)
// The header records the model config, vocabulary and dictionary digests,
// training step, RNG state (seed, epoch), tensor shapes and whether optimizer
// moments follow.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "tspmn/error.hpp"
#include "tspmn/optim.hpp"
#include "tspmn/random.hpp"

namespace tspmn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'T', 'S', 'P', 'M'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::string vocab_digest;
  std::string dictionary_digest;
  std::string phase;  // "init", "pretrain" or "finetune"
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::int64_t epoch = 0;
  ModelParams<float> params;
  std::optional<OptState<float>> optimizer;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"layers", c.layers},     {"heads", c.heads},   {"hidden", c.hidden},
          {"ffn", c.ffn},           {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
          {"segment_types", c.segment_types}, {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.segment_types = j.at("segment_types").get<int>();
  c.dropout = j.at("dropout").get<double>();
  validate(c);
  return c;
}

namespace detail {

template <typename P>
void write_arrays(std::string& out, const P& params) {
  for_each_tensor(params, [&](const std::string&, const auto& t) {
    const auto bytes = static_cast<std::size_t>(t.size()) * sizeof(float);
    const auto* p = reinterpret_cast<const char*>(t.data());
    out.append(p, bytes);
  });
}

template <typename P>
void read_arrays(const std::string& in, std::size_t& pos, P& params) {
  for_each_tensor(params, [&](const std::string& name, auto& t) {
    const auto bytes = static_cast<std::size_t>(t.size()) * sizeof(float);
    if (pos + bytes > in.size()) throw DataError("checkpoint truncated in tensor " + name);
    std::memcpy(t.data(), in.data() + pos, bytes);
    pos += bytes;
  });
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json tensors = nlohmann::json::array();
  for_each_tensor(ck.params, [&](const std::string& name, const auto& t) {
    tensors.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  });
  nlohmann::json header{{"format_version", kCheckpointVersion},
                        {"config", to_json(ck.config)},
                        {"vocab_digest", ck.vocab_digest},
                        {"dictionary_digest", ck.dictionary_digest},
                        {"phase", ck.phase},
                        {"step", ck.step},
                        {"rng", {{"seed", ck.seed}, {"epoch", ck.epoch}}},
                        {"tensors", std::move(tensors)},
                        {"has_optimizer", ck.optimizer.has_value()},
                        {"optimizer_step", ck.optimizer ? ck.optimizer->step : 0}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  const auto hlen = static_cast<std::uint32_t>(h.size());
  out.append(reinterpret_cast<const char*>(&version), 4);
  out.append(reinterpret_cast<const char*>(&hlen), 4);
  out += h;
  detail::write_arrays(out, ck.params);
  if (ck.optimizer) {
    detail::write_arrays(out, ck.optimizer->m);
    detail::write_arrays(out, ck.optimizer->v);
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw DataError("not a checkpoint file (bad magic)");
  std::uint32_t version = 0, hlen = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 4);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  if (12 + static_cast<std::size_t>(hlen) > bytes.size()) throw DataError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(12, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(header.at("config"));
    ck.vocab_digest = header.at("vocab_digest").get<std::string>();
    ck.dictionary_digest = header.at("dictionary_digest").get<std::string>();
    ck.phase = header.at("phase").get<std::string>();
    ck.step = header.at("step").get<std::int64_t>();
    ck.seed = header.at("rng").at("seed").get<std::uint64_t>();
    ck.epoch = header.at("rng").at("epoch").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  ck.params = init_params<float>(ck.config, 0);
  std::size_t idx = 0;
  const auto& tensors = header.at("tensors");
  for_each_tensor(ck.params, [&](const std::string& name, const auto& t) {
    if (idx >= tensors.size() || tensors[idx].at("name") != name || tensors[idx].at("rows") != t.rows() ||
        tensors[idx].at("cols") != t.cols())
      throw DataError("checkpoint tensor table does not match config at " + name);
    ++idx;
  });
  std::size_t pos = 12 + hlen;
  detail::read_arrays(bytes, pos, ck.params);
  if (header.at("has_optimizer").get<bool>()) {
    OptState<float> opt = init_opt_state(ck.params);
    detail::read_arrays(bytes, pos, opt.m);
    detail::read_arrays(bytes, pos, opt.v);
    opt.step = header.at("optimizer_step").get<std::int64_t>();
    ck.optimizer = std::move(opt);
  }
  if (pos != bytes.size()) throw DataError("checkpoint has trailing bytes");
  return ck;
}

inline std::string bytes_digest(const std::string& bytes) {
  std::ostringstream os;
  os << std::hex << fnv1a(bytes);
  return os.str();
}

inline std::string checkpoint_digest(const Checkpoint& ck) { return bytes_digest(serialize_checkpoint(ck)); }

/// Writes to a temporary sibling and renames it into place.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp.string());
    const std::string bytes = serialize_checkpoint(ck);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace tspmn
