#include "ctcal/translate.hpp"

#include <algorithm>
#include <cmath>

#include "ctcal/phantom.hpp"
#include "ctcal/rng.hpp"

namespace ctcal {

namespace {

constexpr float kAirHu = -1000.0f;

// order statistic at level q: rank ceil(q*n) (1-based), minimum at q = 0.
// The small backoff keeps exact-integer products from ceiling one rank high.
std::size_t quantile_rank(double q, std::size_t n) {
  const double x = q * static_cast<double>(n);
  const auto r = static_cast<std::size_t>(std::ceil(x - 1e-9));
  return std::clamp<std::size_t>(r, 1, n);
}

float sorted_quantile(const std::vector<float>& sorted, double q) {
  return sorted[quantile_rank(q, sorted.size()) - 1];
}

float median_of(std::vector<float>& values) {
  const std::size_t r = quantile_rank(0.5, values.size());
  std::nth_element(values.begin(), values.begin() + (r - 1), values.end());
  return values[r - 1];
}

SegmentationPrior derive_prior(const ImageGrid& ct, const TranslatorConfig& cfg) {
  return build_prior(ct, cfg.body_seg, cfg.bone_seg);
}

}  // namespace

const char* translate_mode_name(TranslateMode mode) {
  switch (mode) {
    case TranslateMode::Cbct: return "cbct";
    case TranslateMode::Seg: return "seg";
    case TranslateMode::CbctSeg: return "c+seg";
  }
  return "cbct";
}

TranslateMode parse_translate_mode(const std::string& text) {
  if (text == "cbct") return TranslateMode::Cbct;
  if (text == "seg") return TranslateMode::Seg;
  if (text == "c+seg" || text == "cseg") return TranslateMode::CbctSeg;
  raise(ErrorCode::InvalidArgument, "unknown translate mode: " + text);
}

void TranslatorConfig::validate() const {
  if (lut_knots < 2) raise(ErrorCode::ConfigError, "lut_knots must be >= 2");
  if (!(bone_blend >= 0.0f && bone_blend <= 1.0f))
    raise(ErrorCode::ConfigError, "bone_blend must be in [0, 1]");
  if (lut_body_erode_px < 0)
    raise(ErrorCode::ConfigError, "lut_body_erode_px must be >= 0");
  if (soft_smooth_px < 0)
    raise(ErrorCode::ConfigError, "soft_smooth_px must be >= 0");
  if (air_opening_px < 0)
    raise(ErrorCode::ConfigError, "air_opening_px must be >= 0");
  body_seg.validate();
  bone_seg.validate();
}

void SamplerConfig::validate() const {
  if (k < 2) raise(ErrorCode::TooFewSamples, "sampler requires k >= 2");
  if (noise_sigma < 0.0) raise(ErrorCode::ConfigError, "noise_sigma must be >= 0");
  if (correlation_len_px < 0.0)
    raise(ErrorCode::ConfigError, "correlation_len_px must be >= 0");
  if (residual_gain < 0.0)
    raise(ErrorCode::ConfigError, "residual_gain must be >= 0");
}

float TranslatorModel::apply_lut(float v) const {
  if (lut_x.empty()) return v;
  if (v <= lut_x.front()) return lut_y.front();
  if (v >= lut_x.back()) return lut_y.back();
  const auto it = std::upper_bound(lut_x.begin(), lut_x.end(), v);
  const std::size_t hi = static_cast<std::size_t>(it - lut_x.begin());
  const std::size_t lo = hi - 1;
  const float dx = lut_x[hi] - lut_x[lo];
  const float t = (v - lut_x[lo]) / dx;
  return lut_y[lo] + t * (lut_y[hi] - lut_y[lo]);
}

TranslatorModel fit_translator(const std::vector<TranslatorCalSlice>& cal,
                               TranslateMode mode, const TranslatorConfig& cfg) {
  cfg.validate();
  if (cal.empty())
    raise(ErrorCode::EmptyCalibration, "translator fit requires calibration pairs");

  const bool needs_cbct = mode != TranslateMode::Seg;
  const bool needs_prior = mode != TranslateMode::Cbct;
  for (const auto& s : cal) {
    if (!s.ct) raise(ErrorCode::InvalidArgument, "calibration slice lacks a CT");
    if (needs_cbct && !s.cbct)
      raise(ErrorCode::ModeInputMissing, "calibration slice lacks a CBCT");
  }

  // derive priors from the CTs where the dataset does not provide them
  std::vector<SegmentationPrior> derived;
  std::vector<const SegmentationPrior*> priors(cal.size(), nullptr);
  if (needs_prior) {
    derived.reserve(cal.size());
    for (std::size_t i = 0; i < cal.size(); ++i) {
      if (cal[i].prior) {
        priors[i] = cal[i].prior;
      } else {
        derived.push_back(derive_prior(*cal[i].ct, cfg));
        priors[i] = &derived.back();
      }
    }
  }

  TranslatorModel model;
  model.mode = mode;
  model.bone_blend = cfg.bone_blend;
  model.soft_smooth_px = cfg.soft_smooth_px;
  model.air_repair_hu = cfg.air_repair_hu;
  model.air_opening_px = cfg.air_opening_px;

  if (needs_cbct) {
    // quantile-matching LUT; C+SEG restricts the fit to an eroded body so
    // patient-size variation and misregistered boundary air cannot skew the
    // quantile correspondence (the classic LUT-across-patients failure)
    std::vector<float> xs, ys;
    for (std::size_t i = 0; i < cal.size(); ++i) {
      const ImageGrid& cb = *cal[i].cbct;
      const ImageGrid& ct = *cal[i].ct;
      if (!cb.same_shape(ct))
        raise(ErrorCode::ShapeMismatch, "calibration pair shapes differ");
      if (mode == TranslateMode::CbctSeg) {
        BinaryMask body = priors[i]->body;
        if (cfg.lut_body_erode_px > 0)
          body = erode(body, MorphKernel::disk(cfg.lut_body_erode_px));
        for (std::size_t p = 0; p < cb.size(); ++p) {
          if (!body.bits()[p]) continue;
          xs.push_back(cb.values()[p]);
          ys.push_back(ct.values()[p]);
        }
      } else {
        xs.insert(xs.end(), cb.values().begin(), cb.values().end());
        ys.insert(ys.end(), ct.values().begin(), ct.values().end());
      }
    }
    if (xs.empty())
      raise(ErrorCode::EmptyCalibration, "no pixels available for LUT fit");
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    model.lut_x.reserve(static_cast<std::size_t>(cfg.lut_knots));
    model.lut_y.reserve(static_cast<std::size_t>(cfg.lut_knots));
    for (int t = 0; t < cfg.lut_knots; ++t) {
      const double q = static_cast<double>(t) / (cfg.lut_knots - 1);
      model.lut_x.push_back(sorted_quantile(xs, q));
      model.lut_y.push_back(sorted_quantile(ys, q));
    }
  }

  if (needs_prior) {
    std::vector<float> soft_pool, bone_pool;
    for (std::size_t i = 0; i < cal.size(); ++i) {
      const ImageGrid& ct = *cal[i].ct;
      const BinaryMask& body = priors[i]->body;
      const BinaryMask& bone = priors[i]->bone;
      if (!body.same_shape(ct))
        raise(ErrorCode::ShapeMismatch, "calibration prior shape differs from CT");
      for (std::size_t p = 0; p < ct.size(); ++p) {
        if (bone.bits()[p])
          bone_pool.push_back(ct.values()[p]);
        else if (body.bits()[p])
          soft_pool.push_back(ct.values()[p]);
      }
    }
    if (soft_pool.empty())
      raise(ErrorCode::EmptyCalibration, "calibration priors contain no body pixels");
    model.soft_fill_hu = median_of(soft_pool);
    // bone fill = median of the calibration values that are actually bone HU;
    // soft-tissue values leaking through a noisy prior mask are not bone
    std::vector<float> bone_hu;
    for (float v : bone_pool)
      if (v >= cfg.bone_seg.high_hu) bone_hu.push_back(v);
    if (!bone_hu.empty())
      model.bone_fill_hu = median_of(bone_hu);
    else if (!bone_pool.empty())
      model.bone_fill_hu = median_of(bone_pool);
    else
      model.bone_fill_hu = model.soft_fill_hu;
  }

  // mean |sct - ct| on the fit slices drives the ensemble spread map
  const int h = cal[0].ct->height();
  const int w = cal[0].ct->width();
  model.residual_hu = ImageGrid(h, w, Units::Score);
  std::vector<double> acc(model.residual_hu.size(), 0.0);
  for (std::size_t i = 0; i < cal.size(); ++i) {
    const ImageGrid sct = translate_with(model, cal[i].cbct, priors[i]);
    for (std::size_t p = 0; p < sct.size(); ++p)
      acc[p] += std::abs(static_cast<double>(sct.values()[p]) -
                         cal[i].ct->values()[p]);
  }
  for (std::size_t p = 0; p < acc.size(); ++p)
    model.residual_hu.values()[p] =
        static_cast<float>(acc[p] / static_cast<double>(cal.size()));
  return model;
}

ImageGrid translate_with(const TranslatorModel& model, const ImageGrid* cbct,
                         const SegmentationPrior* prior) {
  const bool needs_cbct = model.mode != TranslateMode::Seg;
  const bool needs_prior = model.mode != TranslateMode::Cbct;
  if (needs_cbct && !cbct)
    raise(ErrorCode::ModeInputMissing, "mode requires a CBCT input");
  if (needs_prior && !prior)
    raise(ErrorCode::ModeInputMissing, "mode requires a segmentation prior");
  if (needs_cbct && cbct->units() != Units::HU)
    raise(ErrorCode::UnitMismatch, "translator expects HU input");
  if (needs_prior && needs_cbct && !prior->body.same_shape(*cbct))
    raise(ErrorCode::ShapeMismatch, "prior shape differs from CBCT");

  const int h = needs_cbct ? cbct->height() : prior->body.height();
  const int w = needs_cbct ? cbct->width() : prior->body.width();
  ImageGrid out(h, w, Units::HU);

  switch (model.mode) {
    case TranslateMode::Cbct:
      for (std::size_t p = 0; p < out.size(); ++p)
        out.values()[p] = model.apply_lut(cbct->values()[p]);
      break;
    case TranslateMode::Seg:
      for (std::size_t p = 0; p < out.size(); ++p) {
        if (prior->bone.bits()[p])
          out.values()[p] = model.bone_fill_hu;
        else if (prior->body.bits()[p])
          out.values()[p] = model.soft_fill_hu;
        else
          out.values()[p] = kAirHu;
      }
      break;
    case TranslateMode::CbctSeg: {
      for (std::size_t p = 0; p < out.size(); ++p)
        out.values()[p] = model.apply_lut(cbct->values()[p]);
      // air-valued pixels inside the body: misregistration slivers get
      // inpainted, solid air regions (real pockets) pass through
      BinaryMask air(h, w);
      for (std::size_t p = 0; p < out.size(); ++p)
        air.bits()[p] = (prior->body.bits()[p] &&
                         out.values()[p] <= model.air_repair_hu)
                            ? 1
                            : 0;
      BinaryMask solid_air = air;
      if (model.air_opening_px > 0) {
        const MorphKernel k = MorphKernel::disk(model.air_opening_px);
        solid_air = dilate(erode(air, k), k);
      }
      // noise suppression inside known soft tissue; the prior keeps the
      // window from crossing bone or air boundaries
      if (model.soft_smooth_px > 0) {
        const int r = model.soft_smooth_px;
        ImageGrid smoothed = out;
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) {
            const std::size_t p = out.idx(i, j);
            if (!prior->body.bits()[p] || prior->bone.bits()[p] || air.bits()[p])
              continue;
            double acc = 0.0;
            int n = 0;
            for (int di = -r; di <= r; ++di) {
              for (int dj = -r; dj <= r; ++dj) {
                const int ni = i + di;
                const int nj = j + dj;
                if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                const std::size_t q = out.idx(ni, nj);
                if (!prior->body.bits()[q] || prior->bone.bits()[q] || air.bits()[q])
                  continue;
                acc += out.values()[q];
                ++n;
              }
            }
            if (n > 0) smoothed.values()[p] = static_cast<float>(acc / n);
          }
        }
        out = std::move(smoothed);
      }
      for (std::size_t p = 0; p < out.size(); ++p) {
        if (!prior->body.bits()[p]) {
          out.values()[p] = kAirHu;
          continue;
        }
        if (prior->bone.bits()[p]) {
          out.values()[p] = (1.0f - model.bone_blend) * out.values()[p] +
                            model.bone_blend * model.bone_fill_hu;
        }
      }
      // inpaint slivers from nearby plausible soft tissue
      std::vector<float> patch;
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const std::size_t p = out.idx(i, j);
          if (!air.bits()[p] || solid_air.bits()[p]) continue;
          patch.clear();
          for (int di = -3; di <= 3; ++di) {
            for (int dj = -3; dj <= 3; ++dj) {
              const int ni = i + di;
              const int nj = j + dj;
              if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
              const std::size_t q = out.idx(ni, nj);
              if (!prior->body.bits()[q] || prior->bone.bits()[q] || air.bits()[q])
                continue;
              patch.push_back(out.values()[q]);
            }
          }
          out.values()[p] = patch.empty() ? model.soft_fill_hu : median_of(patch);
        }
      }
      break;
    }
  }
  return out;
}

ImageGrid translate(const ImageGrid* cbct, const SegmentationPrior* prior,
                    TranslateMode mode,
                    const std::vector<TranslatorCalSlice>& cal,
                    const TranslatorConfig& cfg) {
  const TranslatorModel model = fit_translator(cal, mode, cfg);
  return translate_with(model, cbct, prior);
}

std::vector<ImageGrid> sample_ensemble(const TranslatorModel& model,
                                       const ImageGrid* cbct,
                                       const SegmentationPrior* prior,
                                       const SamplerConfig& cfg,
                                       const NormalizationSpec& norm) {
  cfg.validate();
  const ImageGrid base_hu = translate_with(model, cbct, prior);
  const ImageGrid base = normalize(base_hu, norm);
  const int h = base.height();
  const int w = base.width();

  std::vector<ImageGrid> samples;
  samples.reserve(static_cast<std::size_t>(cfg.k));
  if (cfg.noise_sigma == 0.0) {
    for (int s = 0; s < cfg.k; ++s) samples.push_back(base);
    return samples;
  }

  // per-pixel spread: mean-preserving scaling toward high-residual pixels
  std::vector<float> sigma(base.size(), static_cast<float>(cfg.noise_sigma));
  if (model.residual_hu.size() == base.size() && cfg.residual_gain > 0.0) {
    double mean_res = 0.0;
    for (float r : model.residual_hu.values()) mean_res += r;
    mean_res /= static_cast<double>(model.residual_hu.size());
    if (mean_res > 0.0) {
      for (std::size_t p = 0; p < sigma.size(); ++p) {
        const double rel = model.residual_hu.values()[p] / mean_res;
        sigma[p] = static_cast<float>(
            cfg.noise_sigma * (1.0 + cfg.residual_gain * rel) /
            (1.0 + cfg.residual_gain));
      }
    }
  }

  for (int s = 0; s < cfg.k; ++s) {
    const ImageGrid field = correlated_noise_field(
        h, w, cfg.correlation_len_px,
        mix_seed(cfg.seed, static_cast<std::uint64_t>(s)));
    ImageGrid sample(h, w, Units::Normalized);
    for (std::size_t p = 0; p < sample.size(); ++p) {
      const float v = base.values()[p] + sigma[p] * field.values()[p];
      sample.values()[p] = std::clamp(v, -1.0f, 1.0f);
    }
    samples.push_back(std::move(sample));
  }
  return samples;
}

}  // namespace ctcal
