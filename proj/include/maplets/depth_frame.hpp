#pragma once

// Pinhole depth frames and their flat binary file format:
//
//   u32 width, u32 height, f32 fx, f32 fy, f32 cx, f32 cy,
//   width * height f32 depths (row-major, meters, NaN = no return)
//
// All fields little-endian.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <vector>

#include <Eigen/Core>

#include "maplets/binary_io.hpp"
#include "maplets/errors.hpp"

namespace maplets {

struct Intrinsics {
  float fx = 0.0F;
  float fy = 0.0F;
  float cx = 0.0F;
  float cy = 0.0F;

  /// Unnormalized ray through pixel (u, v) with unit z component.
  Eigen::Vector3d ray(double u, double v) const {
    return {(u - cx) / static_cast<double>(fx), (v - cy) / static_cast<double>(fy), 1.0};
  }
};

struct DepthFrame {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  Intrinsics intrinsics;
  std::vector<float> depth;

  DepthFrame() = default;
  DepthFrame(std::uint32_t w, std::uint32_t h, Intrinsics k)
      : width(w), height(h), intrinsics(k),
        depth(static_cast<std::size_t>(w) * h, std::numeric_limits<float>::quiet_NaN()) {}

  float at(std::uint32_t u, std::uint32_t v) const {
    return depth[static_cast<std::size_t>(v) * width + u];
  }
  float& at(std::uint32_t u, std::uint32_t v) {
    return depth[static_cast<std::size_t>(v) * width + u];
  }
  bool valid(std::uint32_t u, std::uint32_t v) const { return std::isfinite(at(u, v)); }

  /// Back-projected point of pixel (u, v) in the sensor frame (z forward).
  Eigen::Vector3d point(std::uint32_t u, std::uint32_t v) const {
    return intrinsics.ray(u, v) * static_cast<double>(at(u, v));
  }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (float z : depth) n += std::isfinite(z) ? 1 : 0;
    return n;
  }

  /// Throws FormatError when the frame violates its invariants.
  void validate() const {
    if (depth.size() != static_cast<std::size_t>(width) * height) {
      throw FormatError("depth array length does not match width * height");
    }
    for (float z : depth) {
      if (!std::isnan(z) && !(z > 0.0F && std::isfinite(z))) {
        throw FormatError("depth values must be positive or NaN");
      }
    }
  }
};

/// Serialized size of a raw point cloud (three f32 per valid point).
inline constexpr std::size_t kRawPointBytes = 12;

inline std::vector<std::uint8_t> encode_depth_frame(const DepthFrame& frame) {
  ByteWriter w;
  w.u32(frame.width);
  w.u32(frame.height);
  w.f32(frame.intrinsics.fx);
  w.f32(frame.intrinsics.fy);
  w.f32(frame.intrinsics.cx);
  w.f32(frame.intrinsics.cy);
  for (float z : frame.depth) w.f32(z);
  return std::move(w).take();
}

inline DepthFrame decode_depth_frame(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  DepthFrame frame;
  frame.width = r.u32();
  frame.height = r.u32();
  frame.intrinsics = {r.f32(), r.f32(), r.f32(), r.f32()};
  const std::size_t n = static_cast<std::size_t>(frame.width) * frame.height;
  if (r.remaining() != n * 4) throw FormatError("depth payload size mismatch");
  frame.depth.resize(n);
  for (float& z : frame.depth) z = r.f32();
  frame.validate();
  return frame;
}

inline void write_depth_frame(const std::filesystem::path& path, const DepthFrame& frame) {
  const auto bytes = encode_depth_frame(frame);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline DepthFrame read_depth_frame(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_depth_frame(bytes);
}

}  // namespace maplets
