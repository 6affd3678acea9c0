#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "xrag/config.hpp"
#include "xrag/errors.hpp"
#include "xrag/tensor.hpp"

namespace xrag {

// Binary model file: magic "XRAG", format version, the architecture config,
// then a table of named tensors. All integers and floats are written
// little-endian byte by byte, so files are portable and round-trip
// bit-exactly.
namespace ckpt {

constexpr char kMagic[4] = {'X', 'R', 'A', 'G'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_i32(std::ostream& out, std::int32_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
}

inline void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i)
    out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::istream& in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const int c = in.get();
    if (c == EOF) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint32_t>(c & 0xff) << (8 * i);
  }
  return v;
}

inline std::int32_t get_i32(std::istream& in) {
  return static_cast<std::int32_t>(get_u32(in));
}

inline double get_f64(std::istream& in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw CheckpointError("truncated checkpoint");
    bits |= static_cast<std::uint64_t>(c & 0xff) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

inline void put_config(std::ostream& out, const ModelConfig& c) {
  put_i32(out, c.vocab_size);
  put_i32(out, c.d_model);
  put_i32(out, c.n_layers);
  put_u32(out, static_cast<std::uint32_t>(c.moe_layers.size()));
  for (int l : c.moe_layers) put_i32(out, l);
  put_i32(out, c.n_experts);
  put_i32(out, c.k_experts);
  put_i32(out, c.d_ff);
  put_i32(out, c.max_seq_len);
  put_i32(out, c.n_heads);
  put_i32(out, c.k_docs);
  put_f64(out, c.gate_threshold);
  put_f64(out, c.alpha_lb);
  put_f64(out, c.lambda_ret);
  put_u32(out, c.router_noise ? 1 : 0);
  put_f64(out, c.router_noise_std);
}

inline ModelConfig get_config(std::istream& in) {
  ModelConfig c;
  c.vocab_size = get_i32(in);
  c.d_model = get_i32(in);
  c.n_layers = get_i32(in);
  const std::uint32_t n_moe = get_u32(in);
  if (n_moe > 1u << 16) throw CheckpointError("implausible moe layer count");
  c.moe_layers.clear();
  for (std::uint32_t i = 0; i < n_moe; ++i)
    c.moe_layers.push_back(get_i32(in));
  c.n_experts = get_i32(in);
  c.k_experts = get_i32(in);
  c.d_ff = get_i32(in);
  c.max_seq_len = get_i32(in);
  c.n_heads = get_i32(in);
  c.k_docs = get_i32(in);
  c.gate_threshold = get_f64(in);
  c.alpha_lb = get_f64(in);
  c.lambda_ret = get_f64(in);
  c.router_noise = get_u32(in) != 0;
  c.router_noise_std = get_f64(in);
  return c;
}

}  // namespace ckpt

struct TensorRecord {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
};

struct Checkpoint {
  ModelConfig config;
  std::vector<TensorRecord> tensors;

  static Checkpoint capture(
      const ModelConfig& cfg,
      const std::vector<std::pair<std::string, Tensor>>& params) {
    Checkpoint c;
    c.config = cfg;
    for (const auto& [name, t] : params)
      c.tensors.push_back({name, t.rows(), t.cols(), t.value()});
    return c;
  }

  // Copies stored values into live tensors by name. Every stored tensor
  // must find a target of matching shape and vice versa.
  void restore(const std::vector<std::pair<std::string, Tensor>>& params)
      const {
    if (params.size() != tensors.size())
      throw CheckpointError("checkpoint holds " +
                            std::to_string(tensors.size()) +
                            " tensors, model expects " +
                            std::to_string(params.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      const auto& rec = tensors[i];
      const auto& [name, t] = params[i];
      if (rec.name != name)
        throw CheckpointError("tensor " + std::to_string(i) + " is '" +
                              rec.name + "', expected '" + name + "'");
      if (rec.rows != t.rows() || rec.cols != t.cols())
        throw CheckpointError("tensor '" + rec.name + "' is " +
                              std::to_string(rec.rows) + "x" +
                              std::to_string(rec.cols) + ", expected " +
                              std::to_string(t.rows()) + "x" +
                              std::to_string(t.cols()));
      t.node()->value = rec.data;
    }
  }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(ckpt::kMagic, 4);
    ckpt::put_u32(out, ckpt::kVersion);
    ckpt::put_config(out, config);
    ckpt::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& rec : tensors) {
      ckpt::put_u32(out, static_cast<std::uint32_t>(rec.name.size()));
      out.write(rec.name.data(),
                static_cast<std::streamsize>(rec.name.size()));
      ckpt::put_u32(out, 2);  // rank
      ckpt::put_u32(out, static_cast<std::uint32_t>(rec.rows));
      ckpt::put_u32(out, static_cast<std::uint32_t>(rec.cols));
      for (double v : rec.data) ckpt::put_f64(out, v);
    }
    if (!out) throw IoError("write failed: " + path);
  }

  static Checkpoint read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::string(magic, 4) != std::string(ckpt::kMagic, 4))
      throw CheckpointError("bad magic in " + path);
    const std::uint32_t version = ckpt::get_u32(in);
    if (version != ckpt::kVersion)
      throw CheckpointError("unsupported checkpoint version " +
                            std::to_string(version));
    Checkpoint c;
    c.config = ckpt::get_config(in);
    const std::uint32_t count = ckpt::get_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
      TensorRecord rec;
      const std::uint32_t name_len = ckpt::get_u32(in);
      if (name_len > 4096) throw CheckpointError("implausible name length");
      rec.name.resize(name_len);
      in.read(rec.name.data(), name_len);
      if (in.gcount() != static_cast<std::streamsize>(name_len))
        throw CheckpointError("truncated checkpoint");
      const std::uint32_t rank = ckpt::get_u32(in);
      if (rank != 2)
        throw CheckpointError("tensor '" + rec.name + "' has rank " +
                              std::to_string(rank) + ", expected 2");
      rec.rows = static_cast<int>(ckpt::get_u32(in));
      rec.cols = static_cast<int>(ckpt::get_u32(in));
      if (rec.rows <= 0 || rec.cols <= 0)
        throw CheckpointError("tensor '" + rec.name + "' has empty shape");
      rec.data.resize(static_cast<std::size_t>(rec.rows) * rec.cols);
      for (auto& v : rec.data) v = ckpt::get_f64(in);
      c.tensors.push_back(std::move(rec));
    }
    return c;
  }
};

// FNV-1a over the file's bytes; used to prove a checkpoint was untouched.
inline std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file for hashing: " + path);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
    if (!in) break;
  }
  return h;
}

}  // namespace xrag
