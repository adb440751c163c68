#pragma once

// Checkpoint format: one human-readable JSON header line, then binary blobs
// [u32 name_len][name][u32 rank][i64 dims...][f32 data...] per parameter in
// name order. The header carries a sha256 of the blob section; loads verify
// it, so truncation or corruption is rejected rather than yielding garbage
// weights. No timestamps anywhere: identical inputs produce identical bytes.

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "vistill/io/sha256.hpp"
#include "vistill/nn/encoder.hpp"

namespace vistill::io {

using json = nlohmann::json;

constexpr int kCheckpointVersion = 1;

inline json encoder_config_json(const nn::EncoderConfig& c) {
  return json{{"family", nn::family_name(c.family)},
              {"width", c.width},
              {"depth", c.depth},
              {"patch_size", c.patch_size},
              {"heads", c.heads},
              {"feature_dim", c.feature_dim},
              {"input_resolution", c.input_resolution},
              {"groups", c.groups},
              {"param_budget_tag", c.param_budget_tag}};
}

inline nn::EncoderConfig encoder_config_from_json(const json& j) {
  nn::EncoderConfig c;
  c.family = nn::family_from(j.at("family").get<std::string>());
  c.width = j.at("width").get<int64_t>();
  c.depth = j.at("depth").get<int64_t>();
  c.patch_size = j.at("patch_size").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.feature_dim = j.at("feature_dim").get<int64_t>();
  c.input_resolution = j.at("input_resolution").get<int64_t>();
  c.groups = j.at("groups").get<int64_t>();
  c.param_budget_tag = j.at("param_budget_tag").get<std::string>();
  return c;
}

namespace detail {

inline void blob_append(std::string& out, const std::string& name, const Tensor<float>& t) {
  auto put_u32 = [&](uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  put_u32(static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(static_cast<uint32_t>(t.shape.size()));
  for (int64_t d : t.shape) out.append(reinterpret_cast<const char*>(&d), 8);
  out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
}

}  // namespace detail

/// sha256 over the serialized parameter blobs; used both as the checkpoint
/// fingerprint and for frozenness checks (teacher bytes before == after).
inline std::string params_sha256(const std::map<std::string, Var<float>>& params) {
  std::string blob;
  for (const auto& [name, v] : params) detail::blob_append(blob, name, *v);
  return sha256_hex(blob);
}

inline void save_checkpoint(const std::string& path, const std::string& kind, const json& config,
                            const std::map<std::string, Var<float>>& params, const json& meta = json::object()) {
  std::string blob;
  for (const auto& [name, v] : params) detail::blob_append(blob, name, *v);
  json header{{"format_version", kCheckpointVersion},
              {"kind", kind},
              {"config", config},
              {"param_count", params.size()},
              {"blob_bytes", blob.size()},
              {"fingerprint", sha256_hex(blob)},
              {"meta", meta}};
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  f << header.dump() << "\n";
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) throw IoError("checkpoint: write failed for " + path);
}

struct Checkpoint {
  int version = 0;
  std::string kind;
  json config;
  json meta;
  std::map<std::string, Var<float>> params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(f, header_line)) throw IoError("checkpoint: missing header in " + path);
  json header;
  try {
    header = json::parse(header_line);
  } catch (const json::exception& e) {
    throw IoError("checkpoint: corrupt header in " + path + ": " + e.what());
  }
  Checkpoint ck;
  ck.version = header.at("format_version").get<int>();
  if (ck.version != kCheckpointVersion)
    throw IoError("checkpoint: format version " + std::to_string(ck.version) + " needs migration (expected " +
                  std::to_string(kCheckpointVersion) + ")");
  ck.kind = header.at("kind").get<std::string>();
  ck.config = header.at("config");
  ck.meta = header.at("meta");
  const size_t blob_bytes = header.at("blob_bytes").get<size_t>();
  std::string blob(blob_bytes, '\0');
  f.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
  if (static_cast<size_t>(f.gcount()) != blob_bytes)
    throw IoError("checkpoint: corruption detected in " + path + " (truncated blob section)");
  if (sha256_hex(blob) != header.at("fingerprint").get<std::string>())
    throw IoError("checkpoint: corruption detected in " + path + " (fingerprint mismatch)");

  const size_t n_params = header.at("param_count").get<size_t>();
  size_t off = 0;
  auto get_u32 = [&]() {
    if (off + 4 > blob.size()) throw IoError("checkpoint: corruption in " + path + " (blob underrun)");
    uint32_t v;
    std::memcpy(&v, blob.data() + off, 4);
    off += 4;
    return v;
  };
  for (size_t i = 0; i < n_params; ++i) {
    const uint32_t name_len = get_u32();
    if (off + name_len > blob.size()) throw IoError("checkpoint: corruption in " + path);
    std::string name = blob.substr(off, name_len);
    off += name_len;
    const uint32_t rank = get_u32();
    Dims shape(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      if (off + 8 > blob.size()) throw IoError("checkpoint: corruption in " + path);
      std::memcpy(&shape[d], blob.data() + off, 8);
      off += 8;
    }
    const size_t count = static_cast<size_t>(numel(shape));
    if (off + count * 4 > blob.size()) throw IoError("checkpoint: corruption in " + path);
    std::vector<float> data(count);
    std::memcpy(data.data(), blob.data() + off, count * 4);
    off += count * 4;
    if (ck.params.count(name)) throw IoError("checkpoint: duplicate parameter '" + name + "' in " + path);
    ck.params.emplace(name, make_var<float>(std::move(shape), std::move(data)));
  }
  return ck;
}

inline void save_encoder(const std::string& path, const nn::Encoder<float>& enc,
                         const json& meta = json::object()) {
  save_checkpoint(path, "encoder", encoder_config_json(enc.config), enc.params, meta);
}

inline nn::Encoder<float> load_encoder_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "encoder") throw IoError("checkpoint kind '" + ck.kind + "' is not an encoder");
  nn::Encoder<float> enc;
  enc.config = encoder_config_from_json(ck.config);
  enc.config.validate();
  auto expected = nn::build_encoder<float>(enc.config, 0);
  for (const auto& [name, v] : expected.params) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw IoError("checkpoint missing parameter '" + name + "'");
    if (it->second->shape != v->shape)
      throw IoError("checkpoint parameter '" + name + "' has shape " + dims_str(it->second->shape) + ", expected " +
                    dims_str(v->shape));
  }
  if (ck.params.size() != expected.params.size()) throw IoError("checkpoint has extra parameters");
  enc.params = ck.params;
  for (auto& [name, v] : enc.params) v->requires_grad = true;
  return enc;
}

inline nn::Encoder<float> load_encoder(const std::string& path) {
  return load_encoder_checkpoint(load_checkpoint(path));
}

}  // namespace vistill::io
