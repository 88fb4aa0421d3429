#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cmdgoal/nn/tensor.hpp"

namespace cmdgoal {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind { kPdpc, kSinglePoint, kUnimodal, kMdn, kNonParam, kGrounding };

std::string_view to_string(ModelKind k) noexcept;
/// Accepts both "single_point" and "single-point" spellings.
ModelKind parse_model_kind(std::string_view s);

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  ModelKind model_kind = ModelKind::kPdpc;
  nlohmann::json config;
  std::vector<NamedArray> parameters;
  std::uint64_t rng_seed = 0;
  int epoch = 0;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// Container layout (all integers little-endian):
///   8 bytes   magic "CMDGCKPT"
///   u32       format version
///   u64       header length L
///   L bytes   JSON header {model_kind, config, rng_seed, epoch, arrays:[{name, shape}]}
///   f32 x N   array payloads in header order
///   u64       FNV-1a hash of every byte above
void save_checkpoint(const Checkpoint& c, const std::string& path);

/// Throws IoError, VersionMismatch, or CorruptCheckpoint (truncation, bad
/// hash, payload/shape disagreement).
Checkpoint load_checkpoint(const std::string& path);

/// Packs a flat parameter vector according to `layout`.
std::vector<NamedArray> pack_parameters(const nn::ParamLayout& layout, const std::vector<float>& flat);
/// Inverse of pack_parameters; throws ShapeMismatch if names or shapes differ.
std::vector<float> unpack_parameters(const nn::ParamLayout& layout, const std::vector<NamedArray>& arrays);

}  // namespace cmdgoal
