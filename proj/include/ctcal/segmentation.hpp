#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ctcal/core.hpp"

namespace ctcal {

/// Structuring element for binary morphology.
struct MorphKernel {
  enum class Shape { Cross3, Square3, Disk };

  Shape shape = Shape::Disk;
  int radius = 1;  // disk only

  static MorphKernel cross3() { return {Shape::Cross3, 1}; }
  static MorphKernel square3() { return {Shape::Square3, 1}; }
  static MorphKernel disk(int r);

  // (di, dj) footprint offsets, raster order.
  std::vector<std::pair<int, int>> offsets() const;

  std::string to_string() const;
  static MorphKernel parse(const std::string& text);
};

struct BodySegConfig {
  float threshold_hu = -300.0f;
  double min_component_frac = 0.01;
  MorphKernel closing_kernel = MorphKernel::disk(3);

  void validate() const;
};

struct BoneSegConfig {
  float high_hu = 350.0f;
  float medium_hu = 150.0f;
  float low_hu = 100.0f;
  MorphKernel bridge_kernel = MorphKernel::disk(2);
  bool include_low_connected = true;
  int min_component_px = 20;

  void validate() const;
};

// bit = 1 iff lo <= value <= hi. Thresholds are in the grid's units; for a
// normalized grid with HU thresholds, pass the window so they can be mapped
// (UnitMismatch otherwise).
BinaryMask threshold(const ImageGrid& grid, float lo, float hi,
                     const std::optional<NormalizationSpec>& spec = std::nullopt);

// Minkowski dilation/erosion; out-of-image neighborhood reads as background.
BinaryMask dilate(const BinaryMask& mask, const MorphKernel& k);
BinaryMask erode(const BinaryMask& mask, const MorphKernel& k);

// Background components (4-connectivity) not touching the border become 1.
BinaryMask fill_holes(const BinaryMask& mask);

struct ComponentLabels {
  std::vector<std::int32_t> labels;  // 0 = background, components 1..n
  std::vector<std::size_t> sizes;    // sizes[k] = size of component k+1
  int height = 0;
  int width = 0;
};

// Deterministic raster-scan labeling: component 1 owns the first foreground
// pixel encountered, and so on.
ComponentLabels connected_components(const BinaryMask& mask, int connectivity);

// threshold(>= threshold_hu) -> drop 8-conn components below
// min_component_frac*H*W -> keep largest -> fill holes -> morphological
// closing, then a final hole-fill/largest-component cleanup so the output is
// always a single component without enclosed background.
BinaryMask extract_body_mask(const ImageGrid& pct, const BodySegConfig& cfg,
                             const std::optional<NormalizationSpec>& spec = std::nullopt);

// Multi-threshold classification inside the body: high band, medium band
// bridged by dilating the high band, optionally low band pixels whose
// low/bone component touches the bridged bone, minus small components.
BinaryMask extract_bone_mask(const ImageGrid& pct, const BinaryMask& body,
                             const BoneSegConfig& cfg,
                             const std::optional<NormalizationSpec>& spec = std::nullopt);

SegmentationPrior build_prior(const ImageGrid& pct, const BodySegConfig& body_cfg,
                              const BoneSegConfig& bone_cfg,
                              const std::optional<NormalizationSpec>& spec = std::nullopt);

}  // namespace ctcal
