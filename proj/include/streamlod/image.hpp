#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace streamlod {

/// Interleaved H x W x C image of doubles, row-major.
class Image {
 public:
  Image() = default;
  Image(int width, int height, int channels = 3, double fill = 0.0)
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, fill) {
    if (width < 0 || height < 0 || channels < 1) throw std::invalid_argument("bad image shape");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int x, int y, int c) { return data_[index(x, y, c)]; }
  double at(int x, int y, int c) const { return data_[index(x, y, c)]; }

  std::span<double> pixels() { return data_; }
  std::span<const double> pixels() const { return data_; }

  bool same_shape(const Image& o) const {
    return width_ == o.width_ && height_ == o.height_ && channels_ == o.channels_;
  }
  bool operator==(const Image& o) const = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 3;
  std::vector<double> data_;
};

/// 8-bit PNG, values clamped to [0,1] and rounded.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

/// Raw dump: "SLIM" magic, u32 width, height, channels, then little-endian f32
/// values in planar (channel-major) order.
void write_f32(const std::filesystem::path& path, const Image& img);
Image read_f32(const std::filesystem::path& path);

}  // namespace streamlod
