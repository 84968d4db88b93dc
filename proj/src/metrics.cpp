#include "ctcal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace ctcal {

namespace {

void check_shapes(const ImageGrid& a, const ImageGrid& b) {
  if (!a.same_shape(b)) raise(ErrorCode::ShapeMismatch, "grid shapes differ");
  if (a.units() != b.units()) raise(ErrorCode::UnitMismatch, "grid units differ");
}

// factor converting a per-pixel difference to HU
double hu_factor(const ImageGrid& grid, const std::optional<NormalizationSpec>& spec) {
  if (grid.units() == Units::HU) return 1.0;
  if (grid.units() == Units::Normalized) {
    if (!spec)
      raise(ErrorCode::UnitMismatch,
            "normalized inputs need a normalization window for HU reporting");
    spec->validate();
    return static_cast<double>(spec->half_range());
  }
  raise(ErrorCode::UnitMismatch, "expected an HU or normalized grid");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string();
}

}  // namespace

void StratificationBins::validate() const {
  if (edges.empty())
    raise(ErrorCode::ConfigError, "stratification needs at least one edge");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i - 1] < edges[i]))
      raise(ErrorCode::ConfigError, "stratification edges must be strictly increasing");
}

std::size_t StratificationBins::group_of(float value) const {
  const auto it = std::upper_bound(edges.begin(), edges.end(), value);
  return static_cast<std::size_t>(it - edges.begin());
}

double masked_mae(const ImageGrid& sct, const ImageGrid& ct, const BinaryMask& mask,
                  const std::optional<NormalizationSpec>& spec) {
  check_shapes(sct, ct);
  if (!mask.same_shape(ct)) raise(ErrorCode::ShapeMismatch, "mask shape differs");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < ct.size(); ++p) {
    if (!mask.bits()[p]) continue;
    acc += std::abs(static_cast<double>(sct.values()[p]) - ct.values()[p]);
    ++n;
  }
  if (n == 0) raise(ErrorCode::EmptyMask, "MAE mask is empty");
  return acc / static_cast<double>(n) * hu_factor(ct, spec);
}

BinaryMask soft_mask(const BinaryMask& m_body, const BinaryMask& mhat_body,
                     const BinaryMask& m_bone, const BinaryMask& mhat_bone) {
  if (!m_body.same_shape(mhat_body) || !m_body.same_shape(m_bone) ||
      !m_body.same_shape(mhat_bone))
    raise(ErrorCode::ShapeMismatch, "soft mask inputs have different shapes");
  BinaryMask out(m_body.height(), m_body.width());
  for (std::size_t p = 0; p < out.size(); ++p)
    out.bits()[p] = (m_body.bits()[p] && mhat_body.bits()[p] &&
                     !m_bone.bits()[p] && !mhat_bone.bits()[p])
                        ? 1
                        : 0;
  return out;
}

double soft_mae(const ImageGrid& sct, const ImageGrid& ct,
                const BinaryMask& m_body, const BinaryMask& mhat_body,
                const BinaryMask& m_bone, const BinaryMask& mhat_bone,
                const std::optional<NormalizationSpec>& spec) {
  check_shapes(sct, ct);
  const BinaryMask soft = soft_mask(m_body, mhat_body, m_bone, mhat_bone);
  if (!soft.same_shape(ct)) raise(ErrorCode::ShapeMismatch, "mask shape differs");
  const std::size_t mass = soft.count();
  if (mass == 0) raise(ErrorCode::EmptySoftMask, "soft mask has zero weight");
  double acc = 0.0;
  for (std::size_t p = 0; p < ct.size(); ++p)
    if (soft.bits()[p])
      acc += std::abs(static_cast<double>(sct.values()[p]) - ct.values()[p]);
  return acc / static_cast<double>(mass) * hu_factor(ct, spec);
}

double dice(const BinaryMask& p, const BinaryMask& q) {
  if (!p.same_shape(q)) raise(ErrorCode::ShapeMismatch, "dice inputs differ in shape");
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += (p.bits()[i] & q.bits()[i]);
    total += p.bits()[i] + q.bits()[i];
  }
  if (total == 0) return 1.0;  // both empty: perfect agreement
  return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

double marginal_coverage(const IntervalField& intervals, const ImageGrid& ct,
                         const BinaryMask& mask) {
  if (!intervals.lower.same_shape(ct))
    raise(ErrorCode::ShapeMismatch, "interval shape differs from ct");
  if (!mask.same_shape(ct)) raise(ErrorCode::ShapeMismatch, "mask shape differs");
  std::size_t n = 0, covered = 0;
  for (std::size_t p = 0; p < ct.size(); ++p) {
    if (!mask.bits()[p]) continue;
    ++n;
    const float y = ct.values()[p];
    if (intervals.lower.values()[p] <= y && y <= intervals.upper.values()[p])
      ++covered;
  }
  if (n == 0) raise(ErrorCode::EmptyMask, "coverage mask is empty");
  return static_cast<double>(covered) / static_cast<double>(n);
}

double stratified_coverage_error(const IntervalField& intervals, const ImageGrid& ct,
                                 const BinaryMask& mask, const StratificationBins& bins,
                                 double alpha,
                                 std::vector<double>* group_coverage_out) {
  bins.validate();
  if (!intervals.lower.same_shape(ct))
    raise(ErrorCode::ShapeMismatch, "interval shape differs from ct");
  if (!mask.same_shape(ct)) raise(ErrorCode::ShapeMismatch, "mask shape differs");
  const std::size_t groups = bins.group_count();
  std::vector<std::size_t> total(groups, 0), covered(groups, 0);
  std::size_t in_mask = 0;
  for (std::size_t p = 0; p < ct.size(); ++p) {
    if (!mask.bits()[p]) continue;
    ++in_mask;
    const float y = ct.values()[p];
    const std::size_t g = bins.group_of(y);
    ++total[g];
    if (intervals.lower.values()[p] <= y && y <= intervals.upper.values()[p])
      ++covered[g];
  }
  if (in_mask == 0) raise(ErrorCode::EmptyMask, "coverage mask is empty");

  if (group_coverage_out) {
    group_coverage_out->assign(groups, std::nan(""));
  }
  double err = 0.0;
  std::size_t nonempty = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    if (total[g] == 0) continue;
    const double cov = static_cast<double>(covered[g]) / static_cast<double>(total[g]);
    if (group_coverage_out) (*group_coverage_out)[g] = cov;
    err += std::abs((1.0 - alpha) - cov);
    ++nonempty;
  }
  if (nonempty == 0) raise(ErrorCode::AllGroupsEmpty, "all stratification groups empty");
  return err / static_cast<double>(nonempty);
}

double mean_interval_size(const IntervalField& intervals, const BinaryMask& mask,
                          const std::optional<NormalizationSpec>& to_hu) {
  if (!mask.same_shape(intervals.lower))
    raise(ErrorCode::ShapeMismatch, "mask shape differs from intervals");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < intervals.lower.size(); ++p) {
    if (!mask.bits()[p]) continue;
    acc += static_cast<double>(intervals.upper.values()[p]) -
           intervals.lower.values()[p];
    ++n;
  }
  if (n == 0) raise(ErrorCode::EmptyMask, "interval size mask is empty");
  double size = acc / static_cast<double>(n);
  if (to_hu && intervals.lower.units() == Units::Normalized) {
    to_hu->validate();
    size *= to_hu->half_range();
  }
  return size;
}

ImageGrid uncertainty_map(const IntervalField& intervals, Units units,
                          const std::optional<NormalizationSpec>& spec) {
  double factor = 1.0;
  if (units == Units::HU && intervals.lower.units() == Units::Normalized) {
    if (!spec)
      raise(ErrorCode::UnitMismatch,
            "HU uncertainty map from normalized intervals needs a window");
    spec->validate();
    factor = spec->half_range();
  }
  ImageGrid out(intervals.lower.height(), intervals.lower.width(), Units::Score);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const double size = (static_cast<double>(intervals.upper.values()[p]) -
                         intervals.lower.values()[p]) *
                        factor;
    out.values()[p] = static_cast<float>(std::log1p(size));
  }
  return out;
}

std::string metrics_csv_header() {
  return "patient_id,slice_index,mae_hu,soft_mae_hu,dice_body,dice_bone,"
         "mcov_base,mcov_adj,pcov_base,pcov_adj,size_base,size_adj";
}

std::string metrics_csv_row(const MetricsReport& r) {
  std::string row = r.patient_id;
  row += ',';
  row += std::to_string(r.slice_index);
  row += ',';
  row += fmt(r.mae_hu);
  row += ',';
  row += fmt_opt(r.soft_mae_hu);
  row += ',';
  row += fmt(r.dice_body);
  row += ',';
  row += fmt(r.dice_bone);
  row += ',';
  row += fmt_opt(r.marginal_coverage);
  row += ',';
  row += fmt_opt(r.marginal_coverage_adj);
  row += ',';
  row += fmt_opt(r.stratified_coverage_error);
  row += ',';
  row += fmt_opt(r.stratified_coverage_error_adj);
  row += ',';
  row += fmt_opt(r.mean_interval_size);
  row += ',';
  row += fmt_opt(r.mean_interval_size_adj);
  return row;
}

MetricsReport aggregate_reports(const std::vector<MetricsReport>& reports) {
  MetricsReport agg;
  agg.patient_id = "aggregate";
  agg.slice_index = -1;
  if (reports.empty()) return agg;

  double mae = 0.0, dice_body = 0.0, dice_bone = 0.0;
  for (const auto& r : reports) {
    mae += r.mae_hu;
    dice_body += r.dice_body;
    dice_bone += r.dice_bone;
    agg.mask_pixels += r.mask_pixels;
  }
  const double n = static_cast<double>(reports.size());
  agg.mae_hu = mae / n;
  agg.dice_body = dice_body / n;
  agg.dice_bone = dice_bone / n;

  auto mean_opt = [&](std::optional<double> MetricsReport::* field) {
    double acc = 0.0;
    std::size_t k = 0;
    for (const auto& r : reports)
      if (r.*field) {
        acc += *(r.*field);
        ++k;
      }
    return k ? std::optional<double>(acc / static_cast<double>(k)) : std::nullopt;
  };
  agg.soft_mae_hu = mean_opt(&MetricsReport::soft_mae_hu);
  agg.marginal_coverage = mean_opt(&MetricsReport::marginal_coverage);
  agg.stratified_coverage_error = mean_opt(&MetricsReport::stratified_coverage_error);
  agg.mean_interval_size = mean_opt(&MetricsReport::mean_interval_size);
  agg.marginal_coverage_adj = mean_opt(&MetricsReport::marginal_coverage_adj);
  agg.stratified_coverage_error_adj =
      mean_opt(&MetricsReport::stratified_coverage_error_adj);
  agg.mean_interval_size_adj = mean_opt(&MetricsReport::mean_interval_size_adj);
  return agg;
}

}  // namespace ctcal
