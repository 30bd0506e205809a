// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/scene.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace endosplat {

// Cloud container (.gsc): one JSON header line
//   {"magic":"GSC1","count":N,"sh_degree":d}
// followed by little-endian float32 blocks: positions N*3, rotations N*4
// (w,x,y,z), scales N*3, opacities N, sh N*3*(d+1)^2. Values are rounded to
// float32 on save; load(save(x)) is bit-exact for float-representable clouds.

std::vector<std::uint8_t> encode_cloud(const GaussianCloud& cloud);
GaussianCloud decode_cloud(std::span<const std::uint8_t> bytes);
void save_cloud(const GaussianCloud& cloud, const std::filesystem::path& path);
GaussianCloud load_cloud(const std::filesystem::path& path);

/// Portable float map, little-endian (scale header -1.0). 1 channel ("Pf") or 3 ("PF").
void write_pfm(const Image& image, const std::filesystem::path& path);
Image read_pfm(const std::filesystem::path& path);

/// PLY point cloud with x,y,z,red,green,blue; ascii or binary_little_endian.
PointCloud read_ply(const std::filesystem::path& path);
void write_ply(const PointCloud& points, const std::filesystem::path& path, bool binary = true);

/// Scene bundle directory: cameras.json, PNG images, PFM depth maps,
/// optional points3d.ply and splits.json.
SceneBundle load_scene(const std::filesystem::path& dir);
void save_scene(const SceneBundle& bundle, const std::filesystem::path& dir);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace endosplat
