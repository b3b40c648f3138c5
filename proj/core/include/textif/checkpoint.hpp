#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "textif/fusion_net.hpp"
#include "textif/params.hpp"

namespace textif {

/// Single-file model archive:
///   "TXIFCKPT" | u32 version | u32 n | n bytes of config JSON |
///   u32 count | count x { u32 name_len | name | u32 rank | rank x u32 dims |
///   float32 data }. All integers and floats are little-endian.
/// Loading validates every name and shape against the inventory derived
/// from the stored config.
struct Checkpoint {
  NetConfig config;
  ParamStore params;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const NetConfig& cfg, const ParamStore& params);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const NetConfig& cfg,
                     const ParamStore& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// The store as it reads back from a checkpoint (values rounded to float32).
ParamStore round_to_float32(const ParamStore& params);

}  // namespace textif
