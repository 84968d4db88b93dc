#pragma once

#include <cstdint>
#include <vector>

#include "ctcal/core.hpp"
#include "ctcal/segmentation.hpp"

namespace ctcal {

// The three input settings the translation stubs support: intensity-only,
// prior-only, and the combination.
enum class TranslateMode { Cbct, Seg, CbctSeg };

const char* translate_mode_name(TranslateMode mode);
TranslateMode parse_translate_mode(const std::string& text);

struct TranslatorConfig {
  int lut_knots = 33;
  float bone_blend = 0.5f;
  // prior-conditioned LUT fits pool only body pixels, eroded by this radius
  // so misregistered boundary air cannot contaminate the quantile match
  int lut_body_erode_px = 3;
  // C+SEG soft-tissue handling: the prior lets the stub smooth noise within
  // known soft tissue without blurring across bone or air boundaries, and
  // air-valued slivers inside the body (too thin to survive a morphological
  // opening) are misregistration artifacts and get inpainted, while solid
  // air regions pass through
  int soft_smooth_px = 1;
  float air_repair_hu = -500.0f;
  int air_opening_px = 2;
  BodySegConfig body_seg;  // used when calibration priors must be derived
  BoneSegConfig bone_seg;

  void validate() const;
};

/// One calibration example for fitting a translator. The prior is optional;
/// when absent it is derived from the CT.
struct TranslatorCalSlice {
  const ImageGrid* cbct = nullptr;             // HU
  const ImageGrid* ct = nullptr;               // HU
  const SegmentationPrior* prior = nullptr;
};

/// Fitted stand-in for a neural CBCT-to-CT backbone: a monotone quantile-
/// matching intensity LUT plus per-region fill levels, and the mean absolute
/// residual field on the fit slices.
struct TranslatorModel {
  TranslateMode mode = TranslateMode::Cbct;
  std::vector<float> lut_x;  // monotone knots, HU
  std::vector<float> lut_y;
  float soft_fill_hu = 0.0f;
  float bone_fill_hu = 0.0f;
  float bone_blend = 0.5f;
  int soft_smooth_px = 1;
  float air_repair_hu = -500.0f;
  int air_opening_px = 2;
  ImageGrid residual_hu;     // Score units, mean |sct - ct| per pixel

  float apply_lut(float v) const;
};

TranslatorModel fit_translator(const std::vector<TranslatorCalSlice>& cal,
                               TranslateMode mode, const TranslatorConfig& cfg);

ImageGrid translate_with(const TranslatorModel& model, const ImageGrid* cbct,
                         const SegmentationPrior* prior);

// Convenience form: fit on cal, apply once.
ImageGrid translate(const ImageGrid* cbct, const SegmentationPrior* prior,
                    TranslateMode mode,
                    const std::vector<TranslatorCalSlice>& cal,
                    const TranslatorConfig& cfg);

struct SamplerConfig {
  int k = 16;
  double noise_sigma = 0.03;       // normalized intensity units
  double correlation_len_px = 8.0;
  double residual_gain = 1.0;      // spread scaling toward high-residual pixels
  std::uint64_t seed = 0;

  void validate() const;
};

// K stochastic synthetic-CT samples in normalized units: the deterministic
// translation plus correlated Gaussian fields whose per-pixel spread grows
// with the translator's calibration residual.
std::vector<ImageGrid> sample_ensemble(const TranslatorModel& model,
                                       const ImageGrid* cbct,
                                       const SegmentationPrior* prior,
                                       const SamplerConfig& cfg,
                                       const NormalizationSpec& norm);

}  // namespace ctcal
