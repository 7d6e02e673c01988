#pragma once

// Versioned binary checkpoints. Layout (all integers little-endian):
//   magic "G2C1" | version u32 | desc_len u32 | descriptor JSON |
//   n_tensors u32 | { name_len u32, name, rank u32, dims i32*, f32 payload }* |
//   opt_flag u8 | [ n_opt u32, same record format ] | crc32 u32
// The descriptor carries the architecture (all build arguments) plus training
// metadata; loading verifies magic, version, checksum and the architecture
// before materializing any tensor. Writes are atomic (temp file + rename).

#include <zlib.h>

#include <cstring>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "g2c/classifier.hpp"
#include "g2c/generator.hpp"
#include "g2c/png_io.hpp"  // read_file / write_file_atomic
#include "g2c/tensor.hpp"

namespace g2c {

struct CheckpointError : std::runtime_error {
  enum class Kind { BadHeader, BadVersion, Truncated, ChecksumMismatch, ArchMismatch };
  Kind kind;
  CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct Checkpoint {
  nlohmann::json descriptor;
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Tensor> optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  out.push_back(static_cast<unsigned char>(v));
  out.push_back(static_cast<unsigned char>(v >> 8));
  out.push_back(static_cast<unsigned char>(v >> 16));
  out.push_back(static_cast<unsigned char>(v >> 24));
}

inline void put_bytes(std::vector<unsigned char>& out, const void* p, std::size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  out.insert(out.end(), b, b + n);
}

inline void put_tensor_records(std::vector<unsigned char>& out,
                               const std::map<std::string, Tensor>& tensors) {
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    put_bytes(out, name.data(), name.size());
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) {
      const std::int32_t di = d;
      put_bytes(out, &di, 4);
    }
    put_bytes(out, t.data(), static_cast<std::size_t>(t.numel()) * sizeof(float));
  }
}

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size())
      throw CheckpointError(CheckpointError::Kind::Truncated, "checkpoint payload truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = bytes[pos] | (bytes[pos + 1] << 8) | (bytes[pos + 2] << 16) |
                      (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
    pos += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(&bytes[pos]), n);
    pos += n;
    return s;
  }
  std::map<std::string, Tensor> tensor_records() {
    std::map<std::string, Tensor> out;
    const std::uint32_t count = u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::string name = str(u32());
      const std::uint32_t rank = u32();
      if (rank > 8)
        throw CheckpointError(CheckpointError::Kind::Truncated, "implausible tensor rank");
      std::vector<int> shape;
      std::int64_t numel = 1;
      for (std::uint32_t d = 0; d < rank; ++d) {
        need(4);
        std::int32_t di;
        std::memcpy(&di, &bytes[pos], 4);
        pos += 4;
        if (di <= 0)
          throw CheckpointError(CheckpointError::Kind::Truncated, "non-positive dimension");
        shape.push_back(di);
        numel *= di;
      }
      need(static_cast<std::size_t>(numel) * sizeof(float));
      std::vector<float> data(static_cast<std::size_t>(numel));
      std::memcpy(data.data(), &bytes[pos], data.size() * sizeof(float));
      pos += data.size() * sizeof(float);
      out.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
    return out;
  }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::vector<unsigned char> out;
  detail::put_bytes(out, "G2C1", 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string desc = ckpt.descriptor.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(desc.size()));
  detail::put_bytes(out, desc.data(), desc.size());
  detail::put_tensor_records(out, ckpt.tensors);
  out.push_back(ckpt.optimizer.empty() ? 0 : 1);
  if (!ckpt.optimizer.empty()) detail::put_tensor_records(out, ckpt.optimizer);
  const std::uint32_t crc =
      static_cast<std::uint32_t>(crc32(0, out.data(), static_cast<uInt>(out.size())));
  detail::put_u32(out, crc);
  write_file_atomic(path, out);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<unsigned char> bytes = read_file(path);
  if (bytes.size() < 13 || std::memcmp(bytes.data(), "G2C1", 4) != 0)
    throw CheckpointError(CheckpointError::Kind::BadHeader,
                          "not a G2C checkpoint (bad magic): " + path);
  const std::uint32_t stored_crc = bytes[bytes.size() - 4] | (bytes[bytes.size() - 3] << 8) |
                                   (bytes[bytes.size() - 2] << 16) |
                                   (static_cast<std::uint32_t>(bytes[bytes.size() - 1]) << 24);
  const std::uint32_t actual_crc = static_cast<std::uint32_t>(
      crc32(0, bytes.data(), static_cast<uInt>(bytes.size() - 4)));
  if (stored_crc != actual_crc)
    throw CheckpointError(CheckpointError::Kind::ChecksumMismatch,
                          "checkpoint checksum mismatch: " + path);

  detail::Reader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::BadVersion,
                          "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const std::string desc = r.str(r.u32());
  ckpt.descriptor = nlohmann::json::parse(desc, nullptr, false);
  if (ckpt.descriptor.is_discarded())
    throw CheckpointError(CheckpointError::Kind::BadHeader, "unparseable checkpoint descriptor");
  ckpt.tensors = r.tensor_records();
  r.need(1);
  const bool has_opt = bytes[r.pos++] != 0;
  if (has_opt) ckpt.optimizer = r.tensor_records();
  return ckpt;
}

// ---------------------------------------------------------------------------
// Descriptor construction and architecture validation
// ---------------------------------------------------------------------------

inline nlohmann::json generator_descriptor(const GeneratorParams& g) {
  return {{"kind", "generator"},
          {"image_size", g.image_size},
          {"channels_base", g.channels_base},
          {"source_stain", g.source_stain},
          {"target_stain", g.target_stain},
          {"res_blocks", static_cast<int>(g.res.size())}};
}

inline nlohmann::json classifier_descriptor(const ClassifierConfig& c) {
  return {{"kind", "classifier"},   {"num_stains", c.num_stains},
          {"num_classes", c.num_classes}, {"channels_base", c.channels_base},
          {"attention", c.attention_enabled}, {"reduction", c.reduction},
          {"pool_per_stage", c.pool_per_stage}};
}

inline void require_matching_arch(const nlohmann::json& expected, const nlohmann::json& actual,
                                  const std::string& what) {
  for (auto it = expected.begin(); it != expected.end(); ++it) {
    if (!actual.contains(it.key()) || actual[it.key()] != it.value())
      throw CheckpointError(
          CheckpointError::Kind::ArchMismatch,
          what + " architecture mismatch on '" + it.key() + "': expected " + it.value().dump() +
              ", checkpoint has " +
              (actual.contains(it.key()) ? actual[it.key()].dump() : std::string("nothing")));
  }
}

inline void fill_params_from(const std::map<std::string, Tensor>& tensors, const ParamRefs& refs,
                             const std::string& prefix, const std::string& what) {
  for (const ParamRef& r : refs) {
    auto it = tensors.find(prefix + r.name);
    if (it == tensors.end())
      throw CheckpointError(CheckpointError::Kind::ArchMismatch,
                            what + ": checkpoint is missing tensor '" + prefix + r.name + "'");
    if (it->second.shape() != r.tensor->shape())
      throw CheckpointError(CheckpointError::Kind::ArchMismatch,
                            what + ": tensor '" + prefix + r.name + "' has shape " +
                                shape_str(it->second.shape()) + ", model expects " +
                                shape_str(r.tensor->shape()));
    *r.tensor = it->second;
  }
}

inline void collect_params(std::map<std::string, Tensor>& out, const ParamRefs& refs,
                           const std::string& prefix) {
  for (const ParamRef& r : refs) out.emplace(prefix + r.name, *r.tensor);
}

}  // namespace g2c
