#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dino4d/geometry.hpp"

namespace dino4d {

// Flat little-endian blobs referenced from JSON manifests.
void write_f32(const std::string& path, const std::vector<double>& values);
void write_f64(const std::string& path, const std::vector<double>& values);
void write_u8(const std::string& path, const std::vector<std::uint8_t>& values);
std::vector<double> read_f32(const std::string& path, std::size_t expected);
std::vector<double> read_f64(const std::string& path, std::size_t expected);
std::vector<std::uint8_t> read_u8(const std::string& path, std::size_t expected);

std::vector<double> flatten_points(const std::vector<Vec3>& pts);
std::vector<Vec3> unflatten_points(const std::vector<double>& flat);

/// ASCII PLY with one valid point per line.
void export_ply(const Pointmap& pm, const std::string& path);

void write_pgm(const Image& img, const std::string& path);

}  // namespace dino4d
