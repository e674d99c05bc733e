#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "dfba/model.hpp"

namespace dfba {

inline constexpr std::uint16_t kModelFormatVersion = 1;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Container layout (all integers and floats little-endian):
//   "DFBA"                      magic
//   u16 version
//   u32 n, then n x (u32 klen, key, u32 vlen, value)   UTF-8 metadata
//   u32 num_classes, u32 rank, rank x u32              input shape
//   u32 layer count, then per layer: u8 tag + payload
//     1 Dense   u32 in, u32 out, f32[out*in] W, f32[out] b
//     2 Conv2D  u32 out, u32 in, u32 kh, u32 kw, f32[...] W, f32[out] b
//     3 ReLU    4 MaxPool2D (u32 window = 2)   5 Flatten
// Metadata always carries "name", "seed" and "provenance"; ModelInfo::extra
// entries follow in key order.
std::vector<std::uint8_t> serialize(const Model& model);
Model deserialize(std::span<const std::uint8_t> bytes);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

} // namespace dfba
