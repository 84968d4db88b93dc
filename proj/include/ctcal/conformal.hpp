#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ctcal/core.hpp"

namespace ctcal {

/// Per-pixel [lower, upper] bound grids.
struct IntervalField {
  ImageGrid lower;
  ImageGrid upper;

  void validate() const;
};

enum class EvalMaskPolicy : std::uint8_t { Body = 0, Full = 1 };

// Score value recorded at saturated pixels: the largest possible absolute
// error in normalized space, so prediction degrades to the full [-1, 1]
// range through ordinary clipping.
inline constexpr float kSaturatedScore = 2.0f;

/// Fitted split-conformal artifact: one conformal quantile per pixel.
struct ScpCalibration {
  ImageGrid qhat;  // Score units; kSaturatedScore when saturated
  double alpha = 0.1;
  int n_c = 0;
  double n_p = 1.0;  // n_c / patients
  int patients = 1;
  bool adjusted = false;
  bool saturated = false;
  EvalMaskPolicy eval_mask_policy = EvalMaskPolicy::Body;
  NormalizationSpec norm;
  std::string config_json;  // resolved run config, canonical form
};

/// Fitted conformal-risk-control artifact: one additive bound adjustment.
struct CrcCalibration {
  double lambda_hat = 0.0;
  double alpha = 0.1;
  double b = 1.0;
  int n_c = 0;
  double n_p = 1.0;
  int patients = 1;
  bool adjusted = false;
  double q_lo = 0.05;
  double q_hi = 0.95;
  EvalMaskPolicy eval_mask_policy = EvalMaskPolicy::Body;
  NormalizationSpec norm;
  std::string config_json;
};

// S = |sct - ct| per pixel.
ImageGrid conformity_scores(const ImageGrid& sct, const ImageGrid& ct);

struct ScpRank {
  int rank = 0;  // 1-based order statistic
  bool saturated = false;
};

// rank = ceil((1-alpha)*(n_c+1)) or, adjusted, ceil((1-alpha)*(n_c+n_p));
// saturated when the rank exceeds n_c.
ScpRank scp_rank(int n_c, double n_p, double alpha, bool adjusted);

struct ScpOptions {
  double alpha = 0.1;
  bool adjusted = false;
  int patients = 1;
  EvalMaskPolicy eval_mask_policy = EvalMaskPolicy::Body;
  NormalizationSpec norm;
  int threads = 0;          // 0 = hardware default
  int chunk_pixels = 8192;  // pixel-column chunk for the selection buffer
};

// Per-pixel k-th order statistic over the calibration scores. Pairs are
// (sct, ct) in normalized units.
ScpCalibration calibrate_pw_scp(
    const std::vector<std::pair<const ImageGrid*, const ImageGrid*>>& cal,
    const ScpOptions& opts);

// Same computation on precomputed score grids.
ScpCalibration calibrate_pw_scp_scores(const std::vector<const ImageGrid*>& scores,
                                       const ScpOptions& opts);

// Streaming form: the provider is called once per index, in order, and the
// scores are buffered internally in a chunked column layout.
ScpCalibration calibrate_pw_scp_stream(const std::function<ImageGrid(int)>& provider,
                                       int n_c, const ScpOptions& opts);

// lower = max(sct - qhat, -1), upper = min(sct + qhat, 1).
IntervalField predict_scp(const ImageGrid& sct, const ScpCalibration& calib);

// Per-pixel empirical quantiles of K sample grids at levels q_lo < q_hi;
// (0, 1) selects the per-pixel minimum and maximum.
IntervalField heuristic_bounds(const std::vector<ImageGrid>& samples,
                               double q_lo, double q_hi);
IntervalField heuristic_bounds(const std::vector<const ImageGrid*>& samples,
                               double q_lo, double q_hi);

// Fraction of mask pixels outside [lower - lambda, upper + lambda].
double miscoverage_risk(const IntervalField& bounds, const ImageGrid& ct,
                        const BinaryMask& mask, double lambda);

struct CrcCalSlice {
  const IntervalField* bounds = nullptr;
  const ImageGrid* ct = nullptr;
  const BinaryMask* mask = nullptr;
};

struct CrcOptions {
  double alpha = 0.1;
  double b = 1.0;
  bool adjusted = false;
  int patients = 1;
  double q_lo = 0.05;
  double q_hi = 0.95;
  EvalMaskPolicy eval_mask_policy = EvalMaskPolicy::Body;
  // default: one image is one exchangeable unit (per-image miscoverage
  // fraction); the flag switches to pooling all pixels equally
  bool pixel_level_loss = false;
  NormalizationSpec norm;
};

// Exact infimum over the finite candidate set {0} union {positive per-pixel
// deficits}: the guaranteed-risk condition is a right-continuous
// nonincreasing step function of lambda, so the infimum is attained at a
// candidate.
CrcCalibration calibrate_pw_crc(const std::vector<CrcCalSlice>& cal,
                                const CrcOptions& opts);

// lower = max(l - lambda_hat, -1), upper = min(u + lambda_hat, 1).
IntervalField predict_crc(const IntervalField& bounds, const CrcCalibration& calib);

}  // namespace ctcal
