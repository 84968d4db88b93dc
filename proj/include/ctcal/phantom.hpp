#pragma once

#include <cstdint>
#include <utility>

#include "ctcal/core.hpp"

namespace ctcal {

/// Procedural anatomy stand-in: an elliptical body with ring-shaped bone
/// structures, air pockets, and low-frequency soft-tissue texture.
struct PhantomSpec {
  int height = 128;
  int width = 128;
  double body_axis_i = 0.82;      // fractional semi-axis, rows
  double body_axis_j = 0.88;      // fractional semi-axis, columns
  double body_axis_jitter = 0.06; // per-slice relative spread of the axes
  int n_bone_rings = 3;
  float bone_hu_lo = 300.0f;
  float bone_hu_hi = 1200.0f;
  float soft_hu_lo = -80.0f;
  float soft_hu_hi = 80.0f;
  int n_air_pockets = 4;
  float texture_scale_hu = 30.0f;

  void validate() const;
};

struct PhantomSlice {
  ImageGrid ct;          // HU
  BinaryMask body_truth;
  BinaryMask bone_truth;
};

/// CBCT degradation model: noise, radial cupping bias, streaks, circular
/// field-of-view truncation, and a small rigid misregistration shift.
struct DegradationSpec {
  float noise_sigma_hu = 25.0f;
  float cupping_amp_hu = 80.0f;
  int n_streaks = 4;
  float streak_amp_hu = 60.0f;
  double fov_radius_frac = 0.95;  // fraction of the half-diagonal; 1.0 disables
  int misreg_max_px = 2;

  void validate() const;
};

struct PerturbationLevel {
  int level = 0;  // 0..4

  void validate() const;
};

struct AffineParams {
  double rotation_deg = 0.0;
  double translate_frac_i = 0.0;  // fraction of height
  double translate_frac_j = 0.0;  // fraction of width
  double scale = 1.0;
};

PhantomSlice generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

ImageGrid degrade_to_cbct(const ImageGrid& ct, const DegradationSpec& spec,
                          std::uint64_t seed);

// Level l draws rotation ~ U(-m, m) degrees, translation ~ U(-m, m) * dim,
// scale ~ U(1-m, 1+m) with m = (l/4) * (15 deg, 0.15, 0.15). Level 0 is the
// exact identity (no resampling).
AffineParams draw_affine_params(const PerturbationLevel& lvl, std::uint64_t seed);

BinaryMask apply_affine_perturbation(const BinaryMask& mask,
                                     const PerturbationLevel& lvl,
                                     std::uint64_t seed);
ImageGrid apply_affine_perturbation(const ImageGrid& grid,
                                    const PerturbationLevel& lvl,
                                    std::uint64_t seed);

// Unit-variance Gaussian field smoothed to the given correlation length.
// Shared by the degradation model and the ensemble sampler.
ImageGrid correlated_noise_field(int height, int width, double correlation_len_px,
                                 std::uint64_t seed);

}  // namespace ctcal
