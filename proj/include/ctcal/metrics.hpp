#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctcal/conformal.hpp"
#include "ctcal/core.hpp"

namespace ctcal {

/// Intensity cut points partitioning ground-truth pixels into G groups.
struct StratificationBins {
  std::vector<float> edges;  // strictly increasing; G = edges.size() + 1

  void validate() const;
  std::size_t group_of(float value) const;
  std::size_t group_count() const { return edges.size() + 1; }
};

/// Per-slice evaluation results. HU fields are reported through the recorded
/// normalization window.
struct MetricsReport {
  std::string patient_id;
  int slice_index = 0;
  double mae_hu = 0.0;
  std::optional<double> soft_mae_hu;  // empty soft mask reported, not NaN
  double dice_body = 0.0;
  double dice_bone = 0.0;
  std::optional<double> marginal_coverage;
  std::optional<double> stratified_coverage_error;
  std::optional<double> mean_interval_size;
  std::optional<double> marginal_coverage_adj;
  std::optional<double> stratified_coverage_error_adj;
  std::optional<double> mean_interval_size_adj;
  std::vector<double> group_coverage;  // nonempty-group coverages, bin order
  std::size_t mask_pixels = 0;
};

// Mean |sct - ct| over mask pixels. Normalized inputs are converted to HU via
// the window; HU inputs pass through.
double masked_mae(const ImageGrid& sct, const ImageGrid& ct, const BinaryMask& mask,
                  const std::optional<NormalizationSpec>& spec = std::nullopt);

// (body intersect predicted-body) minus (bone union predicted-bone).
BinaryMask soft_mask(const BinaryMask& m_body, const BinaryMask& mhat_body,
                     const BinaryMask& m_bone, const BinaryMask& mhat_bone);

// Soft-tissue-weighted MAE; EmptySoftMask when the weight mass is zero.
double soft_mae(const ImageGrid& sct, const ImageGrid& ct,
                const BinaryMask& m_body, const BinaryMask& mhat_body,
                const BinaryMask& m_bone, const BinaryMask& mhat_bone,
                const std::optional<NormalizationSpec>& spec = std::nullopt);

// 2|p ^ q| / (|p| + |q|); both-empty pairs score 1.0.
double dice(const BinaryMask& p, const BinaryMask& q);

// Fraction of mask pixels with lower <= ct <= upper (closed interval).
double marginal_coverage(const IntervalField& intervals, const ImageGrid& ct,
                         const BinaryMask& mask);

// Mean |(1 - alpha) - Cov(g)| over nonempty groups.
double stratified_coverage_error(const IntervalField& intervals, const ImageGrid& ct,
                                 const BinaryMask& mask, const StratificationBins& bins,
                                 double alpha,
                                 std::vector<double>* group_coverage_out = nullptr);

// Mean of (upper - lower) over mask pixels; optionally reported in HU.
double mean_interval_size(const IntervalField& intervals, const BinaryMask& mask,
                          const std::optional<NormalizationSpec>& to_hu = std::nullopt);

// log(size + 1) per pixel, natural log, size in the requested units.
ImageGrid uncertainty_map(const IntervalField& intervals, Units units,
                          const std::optional<NormalizationSpec>& spec = std::nullopt);

// CSV serialization; the column order is stable and documented in README.
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& report);
MetricsReport aggregate_reports(const std::vector<MetricsReport>& reports);

}  // namespace ctcal
