#pragma once

// Binary weight files.
//
//   "RGSW"                      magic, 4 bytes
//   u32 version                 currently 1
//   u32 n_pairs, then per pair: u32 len + name bytes, u32 len + value bytes
//                               (ModelConfig fields and real_bits as text)
//   u32 n_tensors, then per tensor:
//     u32 len + name bytes, u32 rank, u64 dims[rank],
//     payload: product(dims) little-endian IEEE-754 values of real_bits width
//
// All integers are little-endian.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "raglab/model.h"

namespace raglab {

inline constexpr std::uint32_t kWeightsVersion = 1;

std::vector<std::uint8_t> encode_weights(const ModelWeights& weights);
// Throws FormatError on magic/version mismatch, truncation, or tensors whose
// shapes disagree with the config header.
ModelWeights decode_weights(std::span<const std::uint8_t> bytes);

void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);

}  // namespace raglab
