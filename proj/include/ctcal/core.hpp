#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "ctcal/error.hpp"

namespace ctcal {

// Units carried by an ImageGrid. Score marks dimensionless per-pixel fields
// (conformity scores, interval sizes, log maps); only HU and Normalized
// grids represent images in the CT intensity spaces.
enum class Units : std::uint8_t { HU, Normalized, Score };

const char* units_name(Units u);

/// One H x W scalar field, row-major, 32-bit floats.
class ImageGrid {
 public:
  ImageGrid() = default;

  ImageGrid(int height, int width, Units units, float fill = 0.0f)
      : height_(height), width_(width), units_(units) {
    check_dims(height, width);
    values_.assign(static_cast<std::size_t>(height) * width, fill);
  }

  static ImageGrid from_values(int height, int width, Units units,
                               std::vector<float> values) {
    check_dims(height, width);
    if (values.size() != static_cast<std::size_t>(height) * width)
      raise(ErrorCode::InvalidArgument, "value count does not match dimensions");
    ImageGrid g;
    g.height_ = height;
    g.width_ = width;
    g.units_ = units;
    g.values_ = std::move(values);
    return g;
  }

  int height() const { return height_; }
  int width() const { return width_; }
  Units units() const { return units_; }
  void set_units(Units u) { units_ = u; }
  std::size_t size() const { return values_.size(); }

  float at(int i, int j) const { return values_[idx(i, j)]; }
  float& at(int i, int j) { return values_[idx(i, j)]; }
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * width_ + j;
  }

  const float* data() const { return values_.data(); }
  float* data() { return values_.data(); }
  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

  bool same_shape(const ImageGrid& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }

  // Enforces the type invariants: finite everywhere, and [-1,1] when
  // Normalized. Called at trust boundaries (file readers, C API input).
  void validate() const;

 private:
  static void check_dims(int height, int width) {
    if (height < 1 || width < 1)
      raise(ErrorCode::InvalidArgument, "grid dimensions must be >= 1");
  }

  int height_ = 0;
  int width_ = 0;
  Units units_ = Units::HU;
  std::vector<float> values_;
};

/// {0,1} field with the same shape rules as ImageGrid.
class BinaryMask {
 public:
  BinaryMask() = default;

  BinaryMask(int height, int width, std::uint8_t fill = 0)
      : height_(height), width_(width) {
    if (height < 1 || width < 1)
      raise(ErrorCode::InvalidArgument, "mask dimensions must be >= 1");
    bits_.assign(static_cast<std::size_t>(height) * width, fill ? 1 : 0);
  }

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return bits_.size(); }

  std::uint8_t at(int i, int j) const { return bits_[idx(i, j)]; }
  std::uint8_t& at(int i, int j) { return bits_[idx(i, j)]; }
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * width_ + j;
  }

  const std::uint8_t* data() const { return bits_.data(); }
  std::uint8_t* data() { return bits_.data(); }
  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::vector<std::uint8_t>& bits() { return bits_; }

  bool same_shape(const BinaryMask& other) const {
    return height_ == other.height_ && width_ == other.width_;
  }
  bool same_shape(const ImageGrid& grid) const {
    return height_ == grid.height() && width_ == grid.width();
  }

  std::size_t count() const;

  bool operator==(const BinaryMask& other) const {
    return height_ == other.height_ && width_ == other.width_ &&
           bits_ == other.bits_;
  }

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// The pair (bone mask, body mask) extracted from a planning CT.
struct SegmentationPrior {
  BinaryMask bone;
  BinaryMask body;

  // bone and body must share a shape and satisfy bone subset-of body.
  void validate() const;
};

/// HU window mapped linearly onto [-1, 1].
struct NormalizationSpec {
  float hu_min = -1000.0f;
  float hu_max = 2000.0f;

  void validate() const {
    if (!(hu_min < hu_max))
      raise(ErrorCode::InvalidArgument, "normalization window requires hu_min < hu_max");
  }
  float half_range() const { return 0.5f * (hu_max - hu_min); }
};

// v -> clamp(2*(v - hu_min)/(hu_max - hu_min) - 1, -1, 1)
ImageGrid normalize(const ImageGrid& grid, const NormalizationSpec& spec);

// v -> hu_min + (v + 1)*(hu_max - hu_min)/2
ImageGrid denormalize(const ImageGrid& grid, const NormalizationSpec& spec);

// Centered out_h x out_w window; offset = floor((dim - out)/2) per axis.
ImageGrid crop_center(const ImageGrid& grid, int out_h, int out_w);
BinaryMask crop_center(const BinaryMask& mask, int out_h, int out_w);

}  // namespace ctcal
