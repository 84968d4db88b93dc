#pragma once

#include <string>
#include <vector>

#include "ctcal/conformal.hpp"
#include "ctcal/core.hpp"
#include "ctcal/metrics.hpp"
#include "ctcal/phantom.hpp"
#include "ctcal/segmentation.hpp"
#include "ctcal/translate.hpp"

namespace ctcal {

/// Resolved run configuration. Precedence: CLI flag > config file > default.
/// The canonical JSON form (sorted keys) is hashed into every calibration
/// artifact so mixed-provenance runs fail closed.
struct RunConfig {
  double alpha = 0.1;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware default
  TranslateMode mode = TranslateMode::CbctSeg;
  NormalizationSpec normalization;
  BodySegConfig body_seg;
  BoneSegConfig bone_seg;
  PhantomSpec phantom;
  DegradationSpec degradation;
  SamplerConfig sampler;
  int lut_knots = 33;
  float bone_blend = 0.5f;
  int lut_body_erode_px = 3;
  int soft_smooth_px = 1;
  float air_repair_hu = -500.0f;
  int air_opening_px = 2;
  double crc_b = 1.0;
  double crc_q_lo = 0.05;
  double crc_q_hi = 0.95;
  bool crc_pixel_level_loss = false;
  EvalMaskPolicy eval_mask_policy = EvalMaskPolicy::Body;
  std::vector<float> bins = {-200.0f, 150.0f, 350.0f};  // HU cut points
  bool clip_interval_size = true;
  bool interval_size_hu = false;

  void validate() const;

  // translator config assembled from the segmentation sections
  TranslatorConfig translator() const;
  StratificationBins stratification() const { return StratificationBins{bins}; }

  std::string canonical_json() const;
  std::string digest_hex() const;

  // Overlays a JSON document onto this config; unknown keys are rejected.
  void apply_json_text(const std::string& text, const std::string& origin);

  // Dotted-path override for CLI flags, e.g. ("sampler.k", "32").
  void set_key(const std::string& dotted_key, const std::string& value);

  static RunConfig load(const std::string& path);
};

}  // namespace ctcal
