#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <system_error>

#include <json.hpp>
#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/io/digest.hpp"
#include "refsr/io/png.hpp"
#include "refsr/model/config.hpp"
#include "refsr/model/refsr_model.hpp"

namespace refsr::io {

// Layout: 8-byte magic, u64 little-endian header length, JSON header, then
// raw float32 tensor data at the offsets listed in the header.
inline constexpr char kCheckpointMagic[8] = {'R', 'S', 'R', 'C', 'K', 'P', 'T', '1'};

struct CheckpointInfo {
  model::ModelConfig config;
  std::string config_digest;
  std::string digest;  // sha256 of the whole file
  nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline std::map<std::string, torch::Tensor> named_state(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (auto& kv : m.named_parameters()) out[kv.key()] = kv.value();
  for (auto& kv : m.named_buffers()) out[kv.key()] = kv.value();
  return out;
}

inline void put_u64(std::string& s, uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64(const std::string& s, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

/// Serialize a model into checkpoint bytes.
inline std::string checkpoint_bytes(model::RefSRModel& m, const nlohmann::json& meta) {
  nlohmann::json header;
  header["format"] = 1;
  header["config"] = m->config;
  header["config_digest"] = m->config.digest();
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();
  std::string payload;
  for (auto& [name, t] : detail::named_state(*m)) {
    auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
    const size_t n = c.numel() * sizeof(float);
    header["tensors"].push_back({{"name", name}, {"shape", c.sizes().vec()}, {"offset", static_cast<uint64_t>(payload.size())}});
    payload.append(reinterpret_cast<const char*>(c.data_ptr<float>()), n);
  }
  const auto h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, h.size());
  out += h;
  out += payload;
  return out;
}

/// Writes to a sibling temp file and renames, so a failed write never leaves
/// a truncated checkpoint behind.
inline std::string save_checkpoint(const std::filesystem::path& path, model::RefSRModel& m,
                                   const nlohmann::json& meta = nlohmann::json::object()) {
  const auto bytes = checkpoint_bytes(m, meta);
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  return sha256_hex(bytes);
}

struct ParsedCheckpoint {
  CheckpointInfo info;
  nlohmann::json tensors;
  size_t payload_at = 0;
  std::string bytes;
};

inline ParsedCheckpoint parse_checkpoint(std::string bytes) {
  ParsedCheckpoint p;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file (bad magic)");
  const uint64_t hlen = detail::get_u64(bytes, 8);
  if (16 + hlen > bytes.size()) throw IoError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
    p.info.config = header.at("config").get<model::ModelConfig>();
    p.info.config_digest = header.at("config_digest").get<std::string>();
    p.info.meta = header.value("meta", nlohmann::json::object());
    p.tensors = header.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint header unreadable: ") + e.what());
  }
  if (p.info.config.digest() != p.info.config_digest) throw IoError("checkpoint config digest mismatch");
  p.payload_at = 16 + hlen;
  p.info.digest = sha256_hex(bytes);
  p.bytes = std::move(bytes);
  return p;
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path)).info;
}

/// Copy checkpoint tensors into an existing model. Every model tensor must be
/// present with a matching shape and no extras may remain.
inline void load_state(model::RefSRModel& m, const ParsedCheckpoint& p) {
  torch::NoGradGuard no_grad;
  auto state = detail::named_state(*m);
  size_t matched = 0;
  for (const auto& rec : p.tensors) {
    const auto name = rec.at("name").get<std::string>();
    const auto shape = rec.at("shape").get<std::vector<int64_t>>();
    const auto offset = rec.at("offset").get<size_t>();
    auto it = state.find(name);
    if (it == state.end()) throw ShapeError("checkpoint tensor '" + name + "' has no counterpart in the model");
    if (it->second.sizes() != torch::IntArrayRef(shape))
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_str(torch::empty(shape)) +
                       ", model expects " + shape_str(it->second));
    const size_t n = it->second.numel() * sizeof(float);
    if (p.payload_at + offset + n > p.bytes.size()) throw IoError("checkpoint payload truncated at " + name);
    auto src = torch::empty(shape, torch::kFloat32);
    std::memcpy(src.data_ptr<float>(), p.bytes.data() + p.payload_at + offset, n);
    it->second.copy_(src);
    ++matched;
  }
  if (matched != state.size()) throw ShapeError("checkpoint is missing model tensors");
}

struct LoadedModel {
  model::RefSRModel model{nullptr};
  CheckpointInfo info;
};

inline LoadedModel load_checkpoint(const std::filesystem::path& path) {
  auto p = parse_checkpoint(read_file(path));
  LoadedModel out;
  try {
    out.model = model::RefSRModel(p.info.config);
  } catch (const ConfigError& e) {
    throw ShapeError(std::string("checkpoint config rejected: ") + e.what());
  }
  load_state(out.model, p);
  out.model->eval();
  out.info = std::move(p.info);
  return out;
}

}  // namespace refsr::io
