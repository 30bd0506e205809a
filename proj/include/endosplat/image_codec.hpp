// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/scene.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace endosplat {

/// 8-bit PNG of a 1- or 3-channel [0,1] image (values clamped and rounded).
std::vector<std::uint8_t> encode_png(const Image& image);
/// Decodes 8/16-bit gray, RGB or RGBA PNG into a [0,1] image (alpha dropped).
Image decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_jpeg(const Image& image, int quality = 85);

Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

}  // namespace endosplat
