#include "ctcal/core.hpp"

#include <algorithm>
#include <cmath>

namespace ctcal {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::CropTooLarge: return "CropTooLarge";
    case ErrorCode::UnitMismatch: return "UnitMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::EmptyBody: return "EmptyBody";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptySoftMask: return "EmptySoftMask";
    case ErrorCode::AllGroupsEmpty: return "AllGroupsEmpty";
    case ErrorCode::EmptyCalibration: return "EmptyCalibration";
    case ErrorCode::Saturated: return "Saturated";
    case ErrorCode::Infeasible: return "Infeasible";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::ModeInputMissing: return "ModeInputMissing";
    case ErrorCode::SpecInfeasible: return "SpecInfeasible";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadUnits: return "BadUnits";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::DuplicateRecord: return "DuplicateRecord";
    case ErrorCode::MissingPair: return "MissingPair";
    case ErrorCode::BadRole: return "BadRole";
    case ErrorCode::BadNiftiMagic: return "BadNiftiMagic";
    case ErrorCode::UnsupportedDatatype: return "UnsupportedDatatype";
    case ErrorCode::CompressedInput: return "CompressedInput";
    case ErrorCode::DigestMismatch: return "DigestMismatch";
    case ErrorCode::MethodMismatch: return "MethodMismatch";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

const char* units_name(Units u) {
  switch (u) {
    case Units::HU: return "HU";
    case Units::Normalized: return "normalized";
    case Units::Score: return "score";
  }
  return "unknown";
}

void ImageGrid::validate() const {
  if (height_ < 1 || width_ < 1)
    raise(ErrorCode::InvalidArgument, "grid dimensions must be >= 1");
  for (float v : values_) {
    if (!std::isfinite(v))
      raise(ErrorCode::FormatError, "grid contains non-finite values");
    if (units_ == Units::Normalized && (v < -1.0f || v > 1.0f))
      raise(ErrorCode::FormatError, "normalized grid value outside [-1, 1]");
  }
}

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (std::uint8_t b : bits_) n += b;
  return n;
}

void SegmentationPrior::validate() const {
  if (!bone.same_shape(body))
    raise(ErrorCode::ShapeMismatch, "prior bone/body shapes differ");
  for (std::size_t i = 0; i < bone.size(); ++i) {
    if (bone.bits()[i] && !body.bits()[i])
      raise(ErrorCode::InvalidArgument, "prior has bone pixel outside body");
  }
}

ImageGrid normalize(const ImageGrid& grid, const NormalizationSpec& spec) {
  spec.validate();
  if (grid.units() != Units::HU)
    raise(ErrorCode::UnitMismatch, "normalize expects an HU grid");
  ImageGrid out(grid.height(), grid.width(), Units::Normalized);
  // double arithmetic keeps the round trip within one float ulp
  const double lo = spec.hu_min;
  const double scale = 2.0 / (static_cast<double>(spec.hu_max) - spec.hu_min);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double v = (grid.values()[i] - lo) * scale - 1.0;
    out.values()[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
  }
  return out;
}

ImageGrid denormalize(const ImageGrid& grid, const NormalizationSpec& spec) {
  spec.validate();
  if (grid.units() != Units::Normalized)
    raise(ErrorCode::UnitMismatch, "denormalize expects a normalized grid");
  ImageGrid out(grid.height(), grid.width(), Units::HU);
  const double lo = spec.hu_min;
  const double half = (static_cast<double>(spec.hu_max) - spec.hu_min) / 2.0;
  for (std::size_t i = 0; i < grid.size(); ++i)
    out.values()[i] = static_cast<float>(lo + (grid.values()[i] + 1.0) * half);
  return out;
}

namespace {

template <typename T>
T crop_center_impl(const T& in, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1)
    raise(ErrorCode::InvalidArgument, "crop size must be >= 1");
  if (out_h > in.height() || out_w > in.width())
    raise(ErrorCode::CropTooLarge, "crop larger than input");
  const int off_i = (in.height() - out_h) / 2;
  const int off_j = (in.width() - out_w) / 2;
  T out = [&] {
    if constexpr (std::is_same_v<T, ImageGrid>)
      return ImageGrid(out_h, out_w, in.units());
    else
      return BinaryMask(out_h, out_w);
  }();
  for (int i = 0; i < out_h; ++i)
    for (int j = 0; j < out_w; ++j)
      out.at(i, j) = in.at(i + off_i, j + off_j);
  return out;
}

}  // namespace

ImageGrid crop_center(const ImageGrid& grid, int out_h, int out_w) {
  return crop_center_impl(grid, out_h, out_w);
}

BinaryMask crop_center(const BinaryMask& mask, int out_h, int out_w) {
  return crop_center_impl(mask, out_h, out_w);
}

}  // namespace ctcal
