#include "ctcal/segmentation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace ctcal {

MorphKernel MorphKernel::disk(int r) {
  if (r < 1) raise(ErrorCode::InvalidArgument, "disk radius must be >= 1");
  return {Shape::Disk, r};
}

std::vector<std::pair<int, int>> MorphKernel::offsets() const {
  std::vector<std::pair<int, int>> out;
  switch (shape) {
    case Shape::Cross3:
      out = {{-1, 0}, {0, -1}, {0, 0}, {0, 1}, {1, 0}};
      break;
    case Shape::Square3:
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) out.emplace_back(di, dj);
      break;
    case Shape::Disk:
      for (int di = -radius; di <= radius; ++di)
        for (int dj = -radius; dj <= radius; ++dj)
          if (di * di + dj * dj <= radius * radius) out.emplace_back(di, dj);
      break;
  }
  return out;
}

std::string MorphKernel::to_string() const {
  switch (shape) {
    case Shape::Cross3: return "cross3";
    case Shape::Square3: return "square3";
    case Shape::Disk: return "disk" + std::to_string(radius);
  }
  return "disk1";
}

MorphKernel MorphKernel::parse(const std::string& text) {
  if (text == "cross3") return cross3();
  if (text == "square3") return square3();
  if (text.rfind("disk", 0) == 0 && text.size() > 4) {
    const std::string num = text.substr(4);
    for (char c : num)
      if (!std::isdigit(static_cast<unsigned char>(c)))
        raise(ErrorCode::ConfigError, "bad kernel spec: " + text);
    return disk(std::stoi(num));
  }
  raise(ErrorCode::ConfigError, "bad kernel spec: " + text);
}

void BodySegConfig::validate() const {
  if (!(min_component_frac > 0.0 && min_component_frac < 1.0))
    raise(ErrorCode::ConfigError, "min_component_frac must be in (0, 1)");
}

void BoneSegConfig::validate() const {
  if (!(low_hu < medium_hu && medium_hu < high_hu))
    raise(ErrorCode::ConfigError, "bone thresholds require low < medium < high");
  if (min_component_px < 0)
    raise(ErrorCode::ConfigError, "min_component_px must be >= 0");
}

namespace {

// Maps HU-space thresholds into the grid's units when needed. Thresholds at
// the +-inf sentinels pass through untouched.
float resolve_threshold(float t, const ImageGrid& grid,
                        const std::optional<NormalizationSpec>& spec) {
  if (grid.units() == Units::HU || grid.units() == Units::Score) return t;
  if (!spec)
    raise(ErrorCode::UnitMismatch,
          "HU thresholds against a normalized grid require a normalization window");
  if (!std::isfinite(t)) return t;
  spec->validate();
  // unclamped linear map; grid values are within [-1,1] anyway
  return 2.0f * (t - spec->hu_min) / (spec->hu_max - spec->hu_min) - 1.0f;
}

BinaryMask band(const ImageGrid& grid, float lo, float hi, bool hi_inclusive) {
  BinaryMask out(grid.height(), grid.width());
  const float* v = grid.data();
  std::uint8_t* b = out.data();
  for (std::size_t i = 0; i < grid.size(); ++i)
    b[i] = (v[i] >= lo && (hi_inclusive ? v[i] <= hi : v[i] < hi)) ? 1 : 0;
  return out;
}

BinaryMask morph(const BinaryMask& mask, const MorphKernel& k, bool is_dilate) {
  const auto offs = k.offsets();
  const int h = mask.height();
  const int w = mask.width();
  BinaryMask out(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      std::uint8_t hit = is_dilate ? 0 : 1;
      for (const auto& [di, dj] : offs) {
        const int ni = i + di;
        const int nj = j + dj;
        const std::uint8_t v =
            (ni >= 0 && ni < h && nj >= 0 && nj < w) ? mask.at(ni, nj) : 0;
        if (is_dilate) {
          if (v) { hit = 1; break; }
        } else {
          if (!v) { hit = 0; break; }
        }
      }
      out.at(i, j) = hit;
    }
  }
  return out;
}

void keep_components(BinaryMask& mask, const ComponentLabels& cc,
                     const std::vector<bool>& keep) {
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const std::int32_t lab = cc.labels[i];
    mask.bits()[i] = (lab > 0 && keep[static_cast<std::size_t>(lab) - 1]) ? 1 : 0;
  }
}

}  // namespace

BinaryMask threshold(const ImageGrid& grid, float lo, float hi,
                     const std::optional<NormalizationSpec>& spec) {
  if (lo > hi) raise(ErrorCode::InvalidArgument, "threshold requires lo <= hi");
  return band(grid, resolve_threshold(lo, grid, spec),
              resolve_threshold(hi, grid, spec), /*hi_inclusive=*/true);
}

BinaryMask dilate(const BinaryMask& mask, const MorphKernel& k) {
  return morph(mask, k, true);
}

BinaryMask erode(const BinaryMask& mask, const MorphKernel& k) {
  return morph(mask, k, false);
}

ComponentLabels connected_components(const BinaryMask& mask, int connectivity) {
  if (connectivity != 4 && connectivity != 8)
    raise(ErrorCode::InvalidArgument, "connectivity must be 4 or 8");
  const int h = mask.height();
  const int w = mask.width();
  ComponentLabels cc;
  cc.height = h;
  cc.width = w;
  cc.labels.assign(mask.size(), 0);

  static const int d4[4][2] = {{-1, 0}, {0, -1}, {0, 1}, {1, 0}};
  static const int d8[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                               {0, 1},   {1, -1}, {1, 0},  {1, 1}};
  const auto* dirs = connectivity == 4 ? d4 : d8;
  const int ndirs = connectivity;

  std::vector<std::size_t> stack;
  std::int32_t next = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const std::size_t p = mask.idx(i, j);
      if (!mask.bits()[p] || cc.labels[p]) continue;
      ++next;
      std::size_t size = 0;
      cc.labels[p] = next;
      stack.assign(1, p);
      while (!stack.empty()) {
        const std::size_t q = stack.back();
        stack.pop_back();
        ++size;
        const int qi = static_cast<int>(q / w);
        const int qj = static_cast<int>(q % w);
        for (int d = 0; d < ndirs; ++d) {
          const int ni = qi + dirs[d][0];
          const int nj = qj + dirs[d][1];
          if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
          const std::size_t np = mask.idx(ni, nj);
          if (mask.bits()[np] && !cc.labels[np]) {
            cc.labels[np] = next;
            stack.push_back(np);
          }
        }
      }
      cc.sizes.push_back(size);
    }
  }
  return cc;
}

BinaryMask fill_holes(const BinaryMask& mask) {
  const int h = mask.height();
  const int w = mask.width();
  // flood the background from the border with 4-connectivity
  std::vector<std::uint8_t> outside(mask.size(), 0);
  std::vector<std::size_t> stack;
  auto push = [&](int i, int j) {
    const std::size_t p = mask.idx(i, j);
    if (!mask.bits()[p] && !outside[p]) {
      outside[p] = 1;
      stack.push_back(p);
    }
  };
  for (int j = 0; j < w; ++j) {
    push(0, j);
    push(h - 1, j);
  }
  for (int i = 0; i < h; ++i) {
    push(i, 0);
    push(i, w - 1);
  }
  while (!stack.empty()) {
    const std::size_t q = stack.back();
    stack.pop_back();
    const int qi = static_cast<int>(q / w);
    const int qj = static_cast<int>(q % w);
    if (qi > 0) push(qi - 1, qj);
    if (qi < h - 1) push(qi + 1, qj);
    if (qj > 0) push(qi, qj - 1);
    if (qj < w - 1) push(qi, qj + 1);
  }
  BinaryMask out(h, w);
  for (std::size_t p = 0; p < mask.size(); ++p)
    out.bits()[p] = (mask.bits()[p] || !outside[p]) ? 1 : 0;
  return out;
}

BinaryMask extract_body_mask(const ImageGrid& pct, const BodySegConfig& cfg,
                             const std::optional<NormalizationSpec>& spec) {
  cfg.validate();
  const float inf = std::numeric_limits<float>::infinity();
  BinaryMask m = threshold(pct, cfg.threshold_hu, inf, spec);

  auto cc = connected_components(m, 8);
  const double min_px = cfg.min_component_frac *
                        static_cast<double>(pct.height()) * pct.width();
  std::int32_t best = -1;
  std::size_t best_size = 0;
  for (std::size_t k = 0; k < cc.sizes.size(); ++k) {
    if (static_cast<double>(cc.sizes[k]) < min_px) continue;
    // tie-break: the first raster-scan component wins (lower label)
    if (cc.sizes[k] > best_size) {
      best_size = cc.sizes[k];
      best = static_cast<std::int32_t>(k) + 1;
    }
  }
  if (best < 0)
    raise(ErrorCode::EmptyBody, "no body component above the size threshold");
  std::vector<bool> keep(cc.sizes.size(), false);
  keep[static_cast<std::size_t>(best) - 1] = true;
  keep_components(m, cc, keep);

  m = fill_holes(m);
  m = erode(dilate(m, cfg.closing_kernel), cfg.closing_kernel);

  // closing can, for contorted inputs, pinch off fragments or enclose new
  // background; restore the single-component no-hole contract
  m = fill_holes(m);
  cc = connected_components(m, 8);
  if (cc.sizes.size() > 1) {
    std::int32_t big = 1;
    for (std::size_t k = 1; k < cc.sizes.size(); ++k)
      if (cc.sizes[k] > cc.sizes[static_cast<std::size_t>(big) - 1])
        big = static_cast<std::int32_t>(k) + 1;
    std::vector<bool> only(cc.sizes.size(), false);
    only[static_cast<std::size_t>(big) - 1] = true;
    keep_components(m, cc, only);
  }
  return m;
}

BinaryMask extract_bone_mask(const ImageGrid& pct, const BinaryMask& body,
                             const BoneSegConfig& cfg,
                             const std::optional<NormalizationSpec>& spec) {
  cfg.validate();
  if (!body.same_shape(pct))
    raise(ErrorCode::ShapeMismatch, "body mask shape differs from grid");
  const float inf = std::numeric_limits<float>::infinity();
  const float high = resolve_threshold(cfg.high_hu, pct, spec);
  const float medium = resolve_threshold(cfg.medium_hu, pct, spec);
  const float low = resolve_threshold(cfg.low_hu, pct, spec);

  BinaryMask high_m = band(pct, high, inf, true);
  BinaryMask medium_m = band(pct, medium, high, false);
  BinaryMask low_m = band(pct, low, medium, false);
  for (std::size_t i = 0; i < body.size(); ++i) {
    const std::uint8_t in = body.bits()[i];
    high_m.bits()[i] &= in;
    medium_m.bits()[i] &= in;
    low_m.bits()[i] &= in;
  }

  // bridge gaps: medium pixels survive only near dilated high-intensity bone
  BinaryMask bridge = dilate(high_m, cfg.bridge_kernel);
  BinaryMask bone = high_m;
  for (std::size_t i = 0; i < bone.size(); ++i)
    if (medium_m.bits()[i] && bridge.bits()[i]) bone.bits()[i] = 1;

  if (cfg.include_low_connected) {
    // hysteresis: keep low pixels whose low/bone component reaches bone
    BinaryMask unioned = bone;
    for (std::size_t i = 0; i < unioned.size(); ++i)
      if (low_m.bits()[i]) unioned.bits()[i] = 1;
    const auto cc = connected_components(unioned, 8);
    std::vector<bool> touches(cc.sizes.size(), false);
    for (std::size_t i = 0; i < bone.size(); ++i)
      if (bone.bits()[i]) touches[static_cast<std::size_t>(cc.labels[i]) - 1] = true;
    for (std::size_t i = 0; i < bone.size(); ++i)
      if (low_m.bits()[i] && cc.labels[i] > 0 &&
          touches[static_cast<std::size_t>(cc.labels[i]) - 1])
        bone.bits()[i] = 1;
  }

  if (cfg.min_component_px > 0) {
    const auto cc = connected_components(bone, 8);
    std::vector<bool> keep(cc.sizes.size());
    for (std::size_t k = 0; k < cc.sizes.size(); ++k)
      keep[k] = cc.sizes[k] >= static_cast<std::size_t>(cfg.min_component_px);
    keep_components(bone, cc, keep);
  }
  return bone;
}

SegmentationPrior build_prior(const ImageGrid& pct, const BodySegConfig& body_cfg,
                              const BoneSegConfig& bone_cfg,
                              const std::optional<NormalizationSpec>& spec) {
  SegmentationPrior prior;
  prior.body = extract_body_mask(pct, body_cfg, spec);
  prior.bone = extract_bone_mask(pct, prior.body, bone_cfg, spec);
  prior.validate();
  return prior;
}

}  // namespace ctcal
