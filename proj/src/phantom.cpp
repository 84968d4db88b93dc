#include "ctcal/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "ctcal/rng.hpp"

namespace ctcal {

namespace {

constexpr float kAirHu = -1000.0f;
constexpr double kPi = 3.14159265358979323846;

struct Disk {
  double ci, cj, r;
};

bool inside_ellipse(double i, double j, double ci, double cj, double si,
                    double sj) {
  const double u = (i - ci) / si;
  const double v = (j - cj) / sj;
  return u * u + v * v <= 1.0;
}

// conservative test: a disk of radius r fits inside the ellipse when its
// center lies inside the ellipse shrunk by r on both semi-axes
bool disk_fits(const Disk& d, double ci, double cj, double si, double sj) {
  if (si - d.r <= 1.0 || sj - d.r <= 1.0) return false;
  return inside_ellipse(d.ci, d.cj, ci, cj, si - d.r, sj - d.r);
}

bool disks_overlap(const Disk& a, const Disk& b, double margin) {
  const double di = a.ci - b.ci;
  const double dj = a.cj - b.cj;
  const double need = a.r + b.r + margin;
  return di * di + dj * dj < need * need;
}

std::vector<float> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int t = -radius; t <= radius; ++t) {
    const double v = std::exp(-0.5 * (t * t) / (sigma * sigma));
    k[static_cast<std::size_t>(t + radius)] = static_cast<float>(v);
    sum += v;
  }
  for (auto& v : k) v = static_cast<float>(v / sum);
  return k;
}

}  // namespace

void PhantomSpec::validate() const {
  if (height < 64 || width < 64)
    raise(ErrorCode::InvalidArgument, "phantom dimensions must be >= 64");
  if (!(body_axis_i > 0.0 && body_axis_i < 1.0 && body_axis_j > 0.0 &&
        body_axis_j < 1.0))
    raise(ErrorCode::InvalidArgument, "body axes must be in (0, 1)");
  if (!(body_axis_jitter >= 0.0 && body_axis_jitter < 0.5))
    raise(ErrorCode::InvalidArgument, "body_axis_jitter must be in [0, 0.5)");
  if (!(bone_hu_lo < bone_hu_hi) || !(soft_hu_lo < soft_hu_hi))
    raise(ErrorCode::InvalidArgument, "phantom HU ranges must be ordered");
  if (n_bone_rings < 0 || n_air_pockets < 0)
    raise(ErrorCode::InvalidArgument, "phantom structure counts must be >= 0");
  if (texture_scale_hu < 0.0f)
    raise(ErrorCode::InvalidArgument, "texture scale must be >= 0");
}

void DegradationSpec::validate() const {
  if (noise_sigma_hu < 0 || cupping_amp_hu < 0 || streak_amp_hu < 0)
    raise(ErrorCode::InvalidArgument, "degradation amplitudes must be >= 0");
  if (n_streaks < 0 || misreg_max_px < 0)
    raise(ErrorCode::InvalidArgument, "degradation counts must be >= 0");
  if (!(fov_radius_frac > 0.0 && fov_radius_frac <= 1.0))
    raise(ErrorCode::InvalidArgument, "fov_radius_frac must be in (0, 1]");
}

void PerturbationLevel::validate() const {
  if (level < 0 || level > 4)
    raise(ErrorCode::InvalidArgument, "perturbation level must be in 0..4");
}

ImageGrid correlated_noise_field(int height, int width, double correlation_len_px,
                                 std::uint64_t seed) {
  Rng rng(seed);
  ImageGrid field(height, width, Units::Score);
  for (auto& v : field.values()) v = static_cast<float>(rng.normal());
  if (correlation_len_px <= 0.5) return field;

  const auto k = gaussian_kernel(correlation_len_px);
  const int radius = (static_cast<int>(k.size()) - 1) / 2;
  // separable blur, zero padding; renormalized to unit interior variance
  ImageGrid tmp(height, width, Units::Score);
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const int jj = j + t;
        if (jj < 0 || jj >= width) continue;
        acc += k[static_cast<std::size_t>(t + radius)] * field.at(i, jj);
      }
      tmp.at(i, j) = static_cast<float>(acc);
    }
  }
  double k2 = 0.0;
  for (float v : k) k2 += static_cast<double>(v) * v;
  const float norm = static_cast<float>(1.0 / k2);
  ImageGrid out(height, width, Units::Score);
  for (int i = 0; i < height; ++i) {
    for (int j = 0; j < width; ++j) {
      double acc = 0.0;
      for (int t = -radius; t <= radius; ++t) {
        const int ii = i + t;
        if (ii < 0 || ii >= height) continue;
        acc += k[static_cast<std::size_t>(t + radius)] * tmp.at(ii, j);
      }
      out.at(i, j) = static_cast<float>(acc) * norm;
    }
  }
  return out;
}

PhantomSlice generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  const int h = spec.height;
  const int w = spec.width;
  const double ci = (h - 1) / 2.0;
  const double cj = (w - 1) / 2.0;
  // patient-size variation: each slice draws its own body extent
  const double jit_i = 1.0 + rng.uniform(-spec.body_axis_jitter, spec.body_axis_jitter);
  const double jit_j = 1.0 + rng.uniform(-spec.body_axis_jitter, spec.body_axis_jitter);
  const double si = spec.body_axis_i * jit_i * h / 2.0;
  const double sj = spec.body_axis_j * jit_j * w / 2.0;
  const double mindim = std::min(h, w);

  // bone rings: annuli fully inside the body, mutually disjoint
  struct Ring {
    Disk outer;
    double inner_r;
    float base_hu;
  };
  std::vector<Ring> rings;
  rings.reserve(static_cast<std::size_t>(spec.n_bone_rings));
  const float bone_span = spec.bone_hu_hi - spec.bone_hu_lo;
  for (int n = 0; n < spec.n_bone_rings; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Disk d;
      d.r = rng.uniform(0.05, 0.11) * mindim;
      const double u = rng.uniform(-1.0, 1.0);
      const double v = rng.uniform(-1.0, 1.0);
      if (u * u + v * v > 1.0) continue;
      d.ci = ci + u * std::max(0.0, si - d.r - 2.0);
      d.cj = cj + v * std::max(0.0, sj - d.r - 2.0);
      if (!disk_fits(d, ci, cj, si, sj)) continue;
      bool clash = false;
      for (const auto& rr : rings)
        if (disks_overlap(d, rr.outer, 2.0)) clash = true;
      if (clash) continue;
      Ring ring;
      ring.outer = d;
      ring.inner_r = d.r * (1.0 - rng.uniform(0.28, 0.45));
      ring.base_hu = static_cast<float>(
          spec.bone_hu_lo + bone_span * rng.uniform(0.30, 0.85));
      rings.push_back(ring);
      placed = true;
    }
    if (!placed)
      raise(ErrorCode::SpecInfeasible,
            "cannot place bone ring " + std::to_string(n) + " inside the body");
  }

  // air pockets: small ellipses inside the body, clear of bone; skipped when
  // no spot is found
  struct Pocket {
    double ci, cj, ri, rj;
  };
  std::vector<Pocket> pockets;
  for (int n = 0; n < spec.n_air_pockets; ++n) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      Pocket p;
      p.ri = rng.uniform(2.5, 5.5);
      p.rj = rng.uniform(2.5, 5.5);
      const double u = rng.uniform(-1.0, 1.0);
      const double v = rng.uniform(-1.0, 1.0);
      if (u * u + v * v > 1.0) continue;
      // pockets sit centrally, like bowel gas, away from the subcutaneous rim
      const double margin = std::max(p.ri, p.rj) + 3.0;
      p.ci = ci + 0.55 * u * std::max(0.0, si - margin);
      p.cj = cj + 0.55 * v * std::max(0.0, sj - margin);
      const Disk pd{p.ci, p.cj, std::max(p.ri, p.rj)};
      bool clash = false;
      for (const auto& rr : rings)
        if (disks_overlap(pd, rr.outer, 2.0)) clash = true;
      for (const auto& pp : pockets)
        if (disks_overlap(pd, Disk{pp.ci, pp.cj, std::max(pp.ri, pp.rj)}, 2.0))
          clash = true;
      if (clash) continue;
      pockets.push_back(p);
      break;
    }
  }

  // per-slice soft-tissue baseline plus low-frequency texture; the baseline
  // varies across slices like tissue composition varies across patients
  const float soft_span = spec.soft_hu_hi - spec.soft_hu_lo;
  const float soft_base = static_cast<float>(
      spec.soft_hu_lo + soft_span * rng.uniform(0.20, 0.80));
  const std::uint64_t texture_seed = rng.next_u64();
  const std::uint64_t bone_texture_seed = rng.next_u64();
  ImageGrid texture =
      correlated_noise_field(h, w, mindim / 10.0, texture_seed);
  ImageGrid bone_texture =
      correlated_noise_field(h, w, mindim / 16.0, bone_texture_seed);

  PhantomSlice out;
  out.ct = ImageGrid(h, w, Units::HU, kAirHu);
  out.body_truth = BinaryMask(h, w);
  out.bone_truth = BinaryMask(h, w);

  const float soft_lo_clamp = spec.soft_hu_lo - spec.texture_scale_hu;
  // soft tissue stays below the transitional-bone HU zone
  const float soft_hi_clamp =
      std::min(spec.soft_hu_hi + spec.texture_scale_hu, 95.0f);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      if (!inside_ellipse(i, j, ci, cj, si, sj)) continue;
      out.body_truth.at(i, j) = 1;

      const Ring* in_ring = nullptr;
      for (const auto& rr : rings) {
        const double di = i - rr.outer.ci;
        const double dj = j - rr.outer.cj;
        const double d2 = di * di + dj * dj;
        if (d2 <= rr.outer.r * rr.outer.r && d2 >= rr.inner_r * rr.inner_r) {
          in_ring = &rr;
          break;
        }
      }
      if (in_ring) {
        out.bone_truth.at(i, j) = 1;
        const float v = in_ring->base_hu +
                        0.08f * bone_span * bone_texture.at(i, j);
        out.ct.at(i, j) = std::clamp(v, spec.bone_hu_lo, spec.bone_hu_hi);
        continue;
      }

      bool in_pocket = false;
      for (const auto& p : pockets) {
        const double u = (i - p.ci) / p.ri;
        const double v = (j - p.cj) / p.rj;
        if (u * u + v * v <= 1.0) {
          in_pocket = true;
          break;
        }
      }
      if (in_pocket) {
        out.ct.at(i, j) = kAirHu;
        continue;
      }

      // organ texture is strongest centrally and fades toward the smoother
      // subcutaneous rim
      const double ui = (i - ci) / si;
      const double vj = (j - cj) / sj;
      const double r_ell = std::sqrt(ui * ui + vj * vj);
      const float profile = static_cast<float>(
          0.4 + 1.2 * (1.0 - r_ell) * (1.0 - r_ell));
      const float v =
          soft_base + spec.texture_scale_hu * profile * texture.at(i, j);
      out.ct.at(i, j) = std::clamp(v, soft_lo_clamp, soft_hi_clamp);
    }
  }
  return out;
}

ImageGrid degrade_to_cbct(const ImageGrid& ct, const DegradationSpec& spec,
                          std::uint64_t seed) {
  spec.validate();
  if (ct.units() != Units::HU)
    raise(ErrorCode::UnitMismatch, "degrade_to_cbct expects an HU grid");
  Rng rng(seed);
  const int h = ct.height();
  const int w = ct.width();
  const double ci = (h - 1) / 2.0;
  const double cj = (w - 1) / 2.0;
  const double half_diag = std::sqrt(ci * ci + cj * cj);

  // fixed draw order: shift, streak geometry, then per-pixel noise
  int di = 0, dj = 0;
  if (spec.misreg_max_px > 0) {
    di = static_cast<int>(rng.uniform_int(-spec.misreg_max_px, spec.misreg_max_px));
    dj = static_cast<int>(rng.uniform_int(-spec.misreg_max_px, spec.misreg_max_px));
  }
  struct Streak {
    double nx, ny, c, width, amp;
  };
  std::vector<Streak> streaks;
  if (spec.streak_amp_hu > 0) {
    for (int s = 0; s < spec.n_streaks; ++s) {
      const double theta = rng.uniform(0.0, kPi);
      const double offset = rng.uniform(-0.8, 0.8) * half_diag;
      Streak st;
      st.nx = -std::sin(theta);
      st.ny = std::cos(theta);
      st.c = st.nx * ci + st.ny * cj + offset;
      st.width = rng.uniform(1.0, 2.0);
      st.amp = rng.uniform(-1.0, 1.0) * spec.streak_amp_hu;
      streaks.push_back(st);
    }
  }

  ImageGrid out(h, w, Units::HU);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const int si = i - di;
      const int sj = j - dj;
      float v = (si >= 0 && si < h && sj >= 0 && sj < w) ? ct.at(si, sj) : kAirHu;
      const double ri = i - ci;
      const double rj = j - cj;
      const double r2 = (ri * ri + rj * rj) / (half_diag * half_diag);
      if (spec.cupping_amp_hu > 0)
        v -= spec.cupping_amp_hu * static_cast<float>(1.0 - r2);
      for (const auto& st : streaks) {
        const double d = st.nx * i + st.ny * j - st.c;
        v += static_cast<float>(st.amp *
                                std::exp(-0.5 * d * d / (st.width * st.width)));
      }
      if (spec.noise_sigma_hu > 0)
        v += static_cast<float>(rng.normal(0.0, spec.noise_sigma_hu));
      out.at(i, j) = v;
    }
  }
  if (spec.fov_radius_frac < 1.0) {
    const double r_fov = spec.fov_radius_frac * half_diag;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const double ri = i - ci;
        const double rj = j - cj;
        if (std::sqrt(ri * ri + rj * rj) > r_fov) out.at(i, j) = kAirHu;
      }
  }
  return out;
}

AffineParams draw_affine_params(const PerturbationLevel& lvl, std::uint64_t seed) {
  lvl.validate();
  AffineParams p;
  if (lvl.level == 0) return p;
  const double f = lvl.level / 4.0;
  Rng rng(seed);
  p.rotation_deg = rng.uniform(-15.0, 15.0) * f;
  p.translate_frac_i = rng.uniform(-0.15, 0.15) * f;
  p.translate_frac_j = rng.uniform(-0.15, 0.15) * f;
  p.scale = 1.0 + rng.uniform(-0.15, 0.15) * f;
  return p;
}

namespace {

struct InverseAffine {
  // source = M * (dest - center - t) + center
  double m00, m01, m10, m11;
  double ci, cj, ti, tj;

  void map(double i, double j, double& si, double& sj) const {
    const double di = i - ci - ti;
    const double dj = j - cj - tj;
    si = m00 * di + m01 * dj + ci;
    sj = m10 * di + m11 * dj + cj;
  }
};

InverseAffine make_inverse(const AffineParams& p, int h, int w) {
  const double theta = p.rotation_deg * kPi / 180.0;
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const double inv_scale = 1.0 / p.scale;
  InverseAffine ia;
  // inverse of rotate-then-scale about the center, then translate
  ia.m00 = c * inv_scale;
  ia.m01 = s * inv_scale;
  ia.m10 = -s * inv_scale;
  ia.m11 = c * inv_scale;
  ia.ci = (h - 1) / 2.0;
  ia.cj = (w - 1) / 2.0;
  ia.ti = p.translate_frac_i * h;
  ia.tj = p.translate_frac_j * w;
  return ia;
}

}  // namespace

BinaryMask apply_affine_perturbation(const BinaryMask& mask,
                                     const PerturbationLevel& lvl,
                                     std::uint64_t seed) {
  lvl.validate();
  if (lvl.level == 0) return mask;
  const auto params = draw_affine_params(lvl, seed);
  const auto ia = make_inverse(params, mask.height(), mask.width());
  BinaryMask out(mask.height(), mask.width());
  for (int i = 0; i < mask.height(); ++i) {
    for (int j = 0; j < mask.width(); ++j) {
      double si, sj;
      ia.map(i, j, si, sj);
      const int ri = static_cast<int>(std::lround(si));
      const int rj = static_cast<int>(std::lround(sj));
      out.at(i, j) = (ri >= 0 && ri < mask.height() && rj >= 0 &&
                      rj < mask.width())
                         ? mask.at(ri, rj)
                         : 0;
    }
  }
  return out;
}

ImageGrid apply_affine_perturbation(const ImageGrid& grid,
                                    const PerturbationLevel& lvl,
                                    std::uint64_t seed) {
  lvl.validate();
  if (lvl.level == 0) return grid;
  const auto params = draw_affine_params(lvl, seed);
  const auto ia = make_inverse(params, grid.height(), grid.width());
  const float fill = grid.units() == Units::HU
                         ? kAirHu
                         : (grid.units() == Units::Normalized ? -1.0f : 0.0f);
  const int h = grid.height();
  const int w = grid.width();
  ImageGrid out(h, w, grid.units());
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      double si, sj;
      ia.map(i, j, si, sj);
      const int i0 = static_cast<int>(std::floor(si));
      const int j0 = static_cast<int>(std::floor(sj));
      const double fi = si - i0;
      const double fj = sj - j0;
      auto sample = [&](int a, int b) -> double {
        return (a >= 0 && a < h && b >= 0 && b < w) ? grid.at(a, b) : fill;
      };
      const double v = (1 - fi) * ((1 - fj) * sample(i0, j0) + fj * sample(i0, j0 + 1)) +
                       fi * ((1 - fj) * sample(i0 + 1, j0) + fj * sample(i0 + 1, j0 + 1));
      out.at(i, j) = static_cast<float>(v);
    }
  }
  return out;
}

}  // namespace ctcal
