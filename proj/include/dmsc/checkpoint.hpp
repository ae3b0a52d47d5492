#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmsc/config.hpp"

namespace dmsc {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout (little-endian host order):
//   magic[8] "DMSCCKPT", u32 version,
//   u64 config length, config text,
//   u32 tensor count, then per tensor: u32 name length, name, u32 rank,
//   u64 dims[rank], f64 payload.
inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'M', 'S', 'C', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  RunConfig config;
  std::size_t n_vars = 0;
  std::map<std::string, Tensor> tensors;
};

namespace detail {

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError(std::string("truncated checkpoint (") + what + ")");
  return v;
}

inline std::string get_string(std::istream& in, std::size_t n, const char* what) {
  if (n > (1u << 26)) throw CheckpointError(std::string("implausible ") + what + " length");
  std::string s(n, '\0');
  if (n && !in.read(s.data(), static_cast<std::streamsize>(n)))
    throw CheckpointError(std::string("truncated checkpoint (") + what + ")");
  return s;
}

}  // namespace detail

/// Writes parameters, scale-weight memory, normalization statistics and the
/// config echo.
inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const Model& model,
                            const Standardizer& stats) {
  std::map<std::string, Tensor> tensors;
  for (const auto& p : model.parameters()) tensors[p.name] = p.tensor;
  const auto hist = model.history();
  if (!hist.empty()) tensors["state.w_hist"] = Tensor({hist.size()}, hist);
  tensors["state.norm_mean"] = Tensor({stats.mean.size()}, stats.mean);
  tensors["state.norm_std"] = Tensor({stats.std.size()}, stats.std);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put(out, kCheckpointVersion);
  const std::string text = to_text(cfg) + "\n[checkpoint]\nn_vars = " + std::to_string(model.config().n_vars) + "\n";
  detail::put(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::put(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw CheckpointError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw CheckpointError("'" + path.string() + "' is not a checkpoint (bad magic)");
  const auto version = detail::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get<std::uint64_t>(in, "config length");
  std::string text = detail::get_string(in, len, "config");
  // Split off the checkpoint-only section before parsing the run config.
  Checkpoint ck;
  const auto pos = text.find("\n[checkpoint]\n");
  if (pos == std::string::npos) throw CheckpointError("checkpoint config lacks variable count");
  ck.n_vars = std::stoul(text.substr(text.find('=', pos) + 1));
  try {
    ck.config = parse_config_text(text.substr(0, pos));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  const auto count = detail::get<std::uint32_t>(in, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = detail::get_string(in, detail::get<std::uint32_t>(in, "name length"), "name");
    const auto rank = detail::get<std::uint32_t>(in, "rank");
    if (rank > 8) throw CheckpointError("implausible rank for '" + name + "'");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(detail::get<std::uint64_t>(in, "dims"));
    Tensor t(shape);
    if (t.size() > (1u << 28)) throw CheckpointError("implausible size for '" + name + "'");
    if (!in.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double))))
      throw CheckpointError("truncated payload for '" + name + "'");
    ck.tensors[name] = t;
  }
  return ck;
}

/// Rebuilds the model described by a checkpoint and loads its values.
inline Model restore_model(const Checkpoint& ck) {
  Rng rng(0);
  Model model(resolve_model(ck.config, ck.n_vars), rng);
  for (auto& p : model.parameters()) {
    const auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw CheckpointError("checkpoint is missing parameter '" + p.name + "'");
    if (it->second.shape() != p.tensor.shape())
      throw CheckpointError("parameter '" + p.name + "' has shape " + to_string(it->second.shape()) + ", model expects " +
                            to_string(p.tensor.shape()));
    Tensor dst = p.tensor;
    std::copy(it->second.data().begin(), it->second.data().end(), dst.data().begin());
  }
  if (model.routed()) {
    const auto it = ck.tensors.find("state.w_hist");
    if (it == ck.tensors.end()) throw CheckpointError("checkpoint is missing the scale-weight memory");
    model.set_history({it->second.data().begin(), it->second.data().end()});
  }
  return model;
}

}  // namespace dmsc
