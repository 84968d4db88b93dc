#include "ctcal.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "ctcal/config.hpp"
#include "ctcal/conformal.hpp"
#include "ctcal/io.hpp"
#include "ctcal/metrics.hpp"
#include "ctcal/phantom.hpp"
#include "ctcal/pipeline.hpp"
#include "ctcal/segmentation.hpp"

using namespace ctcal;

struct ctcal_grid {
  ImageGrid grid;
};
struct ctcal_mask {
  BinaryMask mask;
};
struct ctcal_config {
  RunConfig cfg;
};
struct ctcal_scp_calibration {
  ScpCalibration cal;
};
struct ctcal_crc_calibration {
  CrcCalibration cal;
};

namespace {

thread_local std::string g_last_error;

ctcal_status status_of(const Error& e) {
  g_last_error = std::string(error_code_name(e.code())) + ": " + e.what();
  switch (e.code()) {
    case ErrorCode::InvalidArgument:
    case ErrorCode::CropTooLarge:
    case ErrorCode::TooFewSamples:
      return CTCAL_ERR_INVALID_ARG;
    case ErrorCode::IoFailure:
      return CTCAL_ERR_IO;
    case ErrorCode::FormatError:
    case ErrorCode::BadMagic:
    case ErrorCode::BadUnits:
    case ErrorCode::TruncatedPayload:
    case ErrorCode::DuplicateRecord:
    case ErrorCode::MissingPair:
    case ErrorCode::BadRole:
    case ErrorCode::BadNiftiMagic:
    case ErrorCode::UnsupportedDatatype:
    case ErrorCode::CompressedInput:
      return CTCAL_ERR_FORMAT;
    case ErrorCode::EmptyBody:
      return CTCAL_ERR_EMPTY_BODY;
    case ErrorCode::EmptyMask:
    case ErrorCode::EmptySoftMask:
    case ErrorCode::AllGroupsEmpty:
      return CTCAL_ERR_EMPTY_MASK;
    case ErrorCode::Saturated:
      return CTCAL_ERR_SATURATED;
    case ErrorCode::Infeasible:
      return CTCAL_ERR_INFEASIBLE;
    case ErrorCode::DigestMismatch:
    case ErrorCode::MethodMismatch:
      return CTCAL_ERR_DIGEST_MISMATCH;
    case ErrorCode::ShapeMismatch:
    case ErrorCode::UnitMismatch:
      return CTCAL_ERR_SHAPE_MISMATCH;
    case ErrorCode::ModeInputMissing:
    case ErrorCode::EmptyCalibration:
      return CTCAL_ERR_MODE_INPUT_MISSING;
    case ErrorCode::SpecInfeasible:
    case ErrorCode::ConfigError:
      return CTCAL_ERR_CONFIG;
  }
  return CTCAL_ERR_UNKNOWN;
}

template <typename Fn>
ctcal_status guarded(Fn&& fn) {
  try {
    fn();
    return CTCAL_OK;
  } catch (const Error& e) {
    return status_of(e);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return CTCAL_ERR_UNKNOWN;
  } catch (...) {
    g_last_error = "unknown failure";
    return CTCAL_ERR_UNKNOWN;
  }
}

ctcal_status require(bool ok, const char* message) {
  if (ok) return CTCAL_OK;
  g_last_error = message;
  return CTCAL_ERR_INVALID_ARG;
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

Units to_units(ctcal_units u) {
  return u == CTCAL_UNITS_HU ? Units::HU : Units::Normalized;
}

std::optional<std::string> opt_str(const char* s) {
  return s ? std::optional<std::string>(s) : std::nullopt;
}

}  // namespace

extern "C" {

const char* ctcal_last_error(void) { return g_last_error.c_str(); }

void ctcal_string_free(char* s) { std::free(s); }

/* ---- grids and masks -------------------------------------------------- */

ctcal_status ctcal_grid_create(int height, int width, ctcal_units units,
                               const float* values, ctcal_grid** out) {
  if (auto s = require(values && out, "null argument")) return s;
  return guarded([&] {
    std::vector<float> v(values, values + static_cast<std::size_t>(height) * width);
    ImageGrid g = ImageGrid::from_values(height, width, to_units(units), std::move(v));
    g.validate();
    *out = new ctcal_grid{std::move(g)};
  });
}

ctcal_status ctcal_grid_load(const char* path, ctcal_grid** out) {
  if (auto s = require(path && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_grid{read_volume(path)}; });
}

ctcal_status ctcal_grid_save(const ctcal_grid* grid, const char* path) {
  if (auto s = require(grid && path, "null argument")) return s;
  return guarded([&] { write_volume(path, grid->grid); });
}

int ctcal_grid_height(const ctcal_grid* grid) { return grid ? grid->grid.height() : 0; }
int ctcal_grid_width(const ctcal_grid* grid) { return grid ? grid->grid.width() : 0; }

ctcal_units ctcal_grid_units(const ctcal_grid* grid) {
  return grid && grid->grid.units() == Units::HU ? CTCAL_UNITS_HU
                                                 : CTCAL_UNITS_NORMALIZED;
}

const float* ctcal_grid_data(const ctcal_grid* grid) {
  return grid ? grid->grid.data() : nullptr;
}

void ctcal_grid_free(ctcal_grid* grid) { delete grid; }

ctcal_status ctcal_mask_create(int height, int width, const uint8_t* bits,
                               ctcal_mask** out) {
  if (auto s = require(bits && out, "null argument")) return s;
  return guarded([&] {
    BinaryMask m(height, width);
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (bits[i] > 1) raise(ErrorCode::InvalidArgument, "mask bits must be 0/1");
      m.bits()[i] = bits[i];
    }
    *out = new ctcal_mask{std::move(m)};
  });
}

ctcal_status ctcal_mask_load(const char* path, ctcal_mask** out) {
  if (auto s = require(path && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_mask{read_mask_volume(path)}; });
}

ctcal_status ctcal_mask_save(const ctcal_mask* mask, const char* path) {
  if (auto s = require(mask && path, "null argument")) return s;
  return guarded([&] { write_volume(path, mask->mask); });
}

int ctcal_mask_height(const ctcal_mask* mask) { return mask ? mask->mask.height() : 0; }
int ctcal_mask_width(const ctcal_mask* mask) { return mask ? mask->mask.width() : 0; }

const uint8_t* ctcal_mask_data(const ctcal_mask* mask) {
  return mask ? mask->mask.data() : nullptr;
}

size_t ctcal_mask_count(const ctcal_mask* mask) {
  return mask ? mask->mask.count() : 0;
}

void ctcal_mask_free(ctcal_mask* mask) { delete mask; }

/* ---- configuration ----------------------------------------------------- */

ctcal_status ctcal_config_default(ctcal_config** out) {
  if (auto s = require(out != nullptr, "null argument")) return s;
  return guarded([&] { *out = new ctcal_config{RunConfig{}}; });
}

ctcal_status ctcal_config_load(const char* path, ctcal_config** out) {
  if (auto s = require(path && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_config{RunConfig::load(path)}; });
}

ctcal_status ctcal_config_set(ctcal_config* cfg, const char* key, const char* value) {
  if (auto s = require(cfg && key && value, "null argument")) return s;
  return guarded([&] { cfg->cfg.set_key(key, value); });
}

ctcal_status ctcal_config_dump(const ctcal_config* cfg, char** json_out) {
  if (auto s = require(cfg && json_out, "null argument")) return s;
  return guarded([&] { *json_out = dup_string(cfg->cfg.canonical_json()); });
}

ctcal_status ctcal_config_digest(const ctcal_config* cfg, char out_hex[65]) {
  if (auto s = require(cfg && out_hex, "null argument")) return s;
  return guarded([&] {
    const std::string hex = cfg->cfg.digest_hex();
    std::memcpy(out_hex, hex.c_str(), 65);
  });
}

void ctcal_config_free(ctcal_config* cfg) { delete cfg; }

/* ---- core operations -------------------------------------------------- */

ctcal_status ctcal_normalize(const ctcal_grid* grid, float hu_min, float hu_max,
                             ctcal_grid** out) {
  if (auto s = require(grid && out, "null argument")) return s;
  return guarded([&] {
    *out = new ctcal_grid{normalize(grid->grid, NormalizationSpec{hu_min, hu_max})};
  });
}

ctcal_status ctcal_denormalize(const ctcal_grid* grid, float hu_min, float hu_max,
                               ctcal_grid** out) {
  if (auto s = require(grid && out, "null argument")) return s;
  return guarded([&] {
    *out = new ctcal_grid{denormalize(grid->grid, NormalizationSpec{hu_min, hu_max})};
  });
}

ctcal_status ctcal_crop_center(const ctcal_grid* grid, int out_h, int out_w,
                               ctcal_grid** out) {
  if (auto s = require(grid && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_grid{crop_center(grid->grid, out_h, out_w)}; });
}

ctcal_status ctcal_extract_body_mask(const ctcal_grid* pct, const ctcal_config* cfg,
                                     ctcal_mask** out) {
  if (auto s = require(pct && cfg && out, "null argument")) return s;
  return guarded([&] {
    const auto spec = pct->grid.units() == Units::Normalized
                          ? std::optional<NormalizationSpec>(cfg->cfg.normalization)
                          : std::nullopt;
    *out = new ctcal_mask{extract_body_mask(pct->grid, cfg->cfg.body_seg, spec)};
  });
}

ctcal_status ctcal_extract_bone_mask(const ctcal_grid* pct, const ctcal_mask* body,
                                     const ctcal_config* cfg, ctcal_mask** out) {
  if (auto s = require(pct && body && cfg && out, "null argument")) return s;
  return guarded([&] {
    const auto spec = pct->grid.units() == Units::Normalized
                          ? std::optional<NormalizationSpec>(cfg->cfg.normalization)
                          : std::nullopt;
    *out = new ctcal_mask{
        extract_bone_mask(pct->grid, body->mask, cfg->cfg.bone_seg, spec)};
  });
}

ctcal_status ctcal_phantom_generate(const ctcal_config* cfg, uint64_t seed,
                                    ctcal_grid** ct, ctcal_mask** body_truth,
                                    ctcal_mask** bone_truth) {
  if (auto s = require(cfg && ct && body_truth && bone_truth, "null argument"))
    return s;
  return guarded([&] {
    PhantomSlice ph = generate_phantom(cfg->cfg.phantom, seed);
    *ct = new ctcal_grid{std::move(ph.ct)};
    *body_truth = new ctcal_mask{std::move(ph.body_truth)};
    *bone_truth = new ctcal_mask{std::move(ph.bone_truth)};
  });
}

ctcal_status ctcal_degrade_to_cbct(const ctcal_grid* ct, const ctcal_config* cfg,
                                   uint64_t seed, ctcal_grid** out) {
  if (auto s = require(ct && cfg && out, "null argument")) return s;
  return guarded([&] {
    *out = new ctcal_grid{degrade_to_cbct(ct->grid, cfg->cfg.degradation, seed)};
  });
}

ctcal_status ctcal_perturb_mask(const ctcal_mask* mask, int level, uint64_t seed,
                                ctcal_mask** out) {
  if (auto s = require(mask && out, "null argument")) return s;
  return guarded([&] {
    *out = new ctcal_mask{
        apply_affine_perturbation(mask->mask, PerturbationLevel{level}, seed)};
  });
}

ctcal_status ctcal_dice(const ctcal_mask* p, const ctcal_mask* q, double* out) {
  if (auto s = require(p && q && out, "null argument")) return s;
  return guarded([&] { *out = dice(p->mask, q->mask); });
}

ctcal_status ctcal_masked_mae(const ctcal_grid* sct, const ctcal_grid* ct,
                              const ctcal_mask* mask, double* out) {
  if (auto s = require(sct && ct && mask && out, "null argument")) return s;
  return guarded([&] { *out = masked_mae(sct->grid, ct->grid, mask->mask); });
}

/* ---- conformal calibration --------------------------------------------- */

ctcal_status ctcal_scp_rank(int n_c, double n_p, double alpha, int adjusted,
                            int* rank, int* saturated) {
  if (auto s = require(rank && saturated, "null argument")) return s;
  return guarded([&] {
    const ScpRank r = scp_rank(n_c, n_p, alpha, adjusted != 0);
    *rank = r.rank;
    *saturated = r.saturated ? 1 : 0;
  });
}

ctcal_status ctcal_scp_calibrate(const ctcal_grid* const* scts,
                                 const ctcal_grid* const* cts, int n, double alpha,
                                 int adjusted, int patients,
                                 ctcal_scp_calibration** out) {
  if (auto s = require(scts && cts && out && n > 0, "null or empty argument"))
    return s;
  return guarded([&] {
    std::vector<std::pair<const ImageGrid*, const ImageGrid*>> pairs;
    pairs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (!scts[i] || !cts[i]) raise(ErrorCode::InvalidArgument, "null grid in array");
      pairs.emplace_back(&scts[i]->grid, &cts[i]->grid);
    }
    ScpOptions opts;
    opts.alpha = alpha;
    opts.adjusted = adjusted != 0;
    opts.patients = patients;
    *out = new ctcal_scp_calibration{calibrate_pw_scp(pairs, opts)};
  });
}

ctcal_status ctcal_scp_save(const ctcal_scp_calibration* cal, const char* path) {
  if (auto s = require(cal && path, "null argument")) return s;
  return guarded([&] { write_scp_calibration(path, cal->cal); });
}

ctcal_status ctcal_scp_load(const char* path, ctcal_scp_calibration** out) {
  if (auto s = require(path && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_scp_calibration{read_scp_calibration(path)}; });
}

ctcal_status ctcal_scp_qhat(const ctcal_scp_calibration* cal, ctcal_grid** out) {
  if (auto s = require(cal && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_grid{cal->cal.qhat}; });
}

ctcal_status ctcal_scp_predict(const ctcal_scp_calibration* cal,
                               const ctcal_grid* sct, ctcal_grid** lower,
                               ctcal_grid** upper) {
  if (auto s = require(cal && sct && lower && upper, "null argument")) return s;
  return guarded([&] {
    IntervalField iv = predict_scp(sct->grid, cal->cal);
    *lower = new ctcal_grid{std::move(iv.lower)};
    *upper = new ctcal_grid{std::move(iv.upper)};
  });
}

void ctcal_scp_free(ctcal_scp_calibration* cal) { delete cal; }

ctcal_status ctcal_heuristic_bounds(const ctcal_grid* const* samples, int k,
                                    double q_lo, double q_hi, ctcal_grid** lower,
                                    ctcal_grid** upper) {
  if (auto s = require(samples && lower && upper && k > 0, "null or empty argument"))
    return s;
  return guarded([&] {
    std::vector<const ImageGrid*> grids;
    grids.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
      if (!samples[i]) raise(ErrorCode::InvalidArgument, "null sample grid");
      grids.push_back(&samples[i]->grid);
    }
    IntervalField iv = heuristic_bounds(grids, q_lo, q_hi);
    *lower = new ctcal_grid{std::move(iv.lower)};
    *upper = new ctcal_grid{std::move(iv.upper)};
  });
}

ctcal_status ctcal_crc_calibrate(const ctcal_grid* const* lowers,
                                 const ctcal_grid* const* uppers,
                                 const ctcal_grid* const* cts,
                                 const ctcal_mask* const* masks, int n,
                                 double alpha, double b, int adjusted, int patients,
                                 ctcal_crc_calibration** out) {
  if (auto s = require(lowers && uppers && cts && masks && out && n > 0,
                       "null or empty argument"))
    return s;
  return guarded([&] {
    std::vector<IntervalField> bounds(static_cast<std::size_t>(n));
    std::vector<CrcCalSlice> slices(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      if (!lowers[i] || !uppers[i] || !cts[i] || !masks[i])
        raise(ErrorCode::InvalidArgument, "null slice in array");
      bounds[static_cast<std::size_t>(i)].lower = lowers[i]->grid;
      bounds[static_cast<std::size_t>(i)].upper = uppers[i]->grid;
      slices[static_cast<std::size_t>(i)] = {&bounds[static_cast<std::size_t>(i)],
                                             &cts[i]->grid, &masks[i]->mask};
    }
    CrcOptions opts;
    opts.alpha = alpha;
    opts.b = b;
    opts.adjusted = adjusted != 0;
    opts.patients = patients;
    *out = new ctcal_crc_calibration{calibrate_pw_crc(slices, opts)};
  });
}

ctcal_status ctcal_crc_lambda(const ctcal_crc_calibration* cal, double* out) {
  if (auto s = require(cal && out, "null argument")) return s;
  *out = cal->cal.lambda_hat;
  return CTCAL_OK;
}

ctcal_status ctcal_crc_save(const ctcal_crc_calibration* cal, const char* path) {
  if (auto s = require(cal && path, "null argument")) return s;
  return guarded([&] { write_crc_calibration(path, cal->cal); });
}

ctcal_status ctcal_crc_load(const char* path, ctcal_crc_calibration** out) {
  if (auto s = require(path && out, "null argument")) return s;
  return guarded([&] { *out = new ctcal_crc_calibration{read_crc_calibration(path)}; });
}

ctcal_status ctcal_crc_predict(const ctcal_crc_calibration* cal,
                               const ctcal_grid* lower_in, const ctcal_grid* upper_in,
                               ctcal_grid** lower, ctcal_grid** upper) {
  if (auto s = require(cal && lower_in && upper_in && lower && upper, "null argument"))
    return s;
  return guarded([&] {
    IntervalField in;
    in.lower = lower_in->grid;
    in.upper = upper_in->grid;
    IntervalField iv = predict_crc(in, cal->cal);
    *lower = new ctcal_grid{std::move(iv.lower)};
    *upper = new ctcal_grid{std::move(iv.upper)};
  });
}

void ctcal_crc_free(ctcal_crc_calibration* cal) { delete cal; }

/* ---- pipeline commands -------------------------------------------------- */

ctcal_status ctcal_cmd_phantom_gen(const ctcal_config* cfg, int patients,
                                   int slices, uint64_t seed, const char* out_dir,
                                   char** summary_out) {
  if (auto s = require(cfg && out_dir && summary_out, "null argument")) return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::phantom_gen(cfg->cfg, patients, slices, seed, out_dir).summary_json);
  });
}

ctcal_status ctcal_cmd_segment(const ctcal_config* cfg, const char* input,
                               const char* out_body, const char* out_bone,
                               const char* truth_dir, char** summary_out) {
  if (auto s = require(cfg && input && out_body && out_bone && summary_out,
                       "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::segment(cfg->cfg, input, out_body, out_bone, opt_str(truth_dir))
            .summary_json);
  });
}

ctcal_status ctcal_cmd_translate(const ctcal_config* cfg, const char* manifest,
                                 const char* fit_manifest, const char* mode,
                                 const char* out_dir, int samples, uint64_t seed,
                                 char** summary_out) {
  if (auto s = require(cfg && manifest && mode && out_dir && summary_out,
                       "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::translate_cmd(cfg->cfg, manifest, opt_str(fit_manifest),
                                parse_translate_mode(mode), out_dir, samples, seed)
            .summary_json);
  });
}

ctcal_status ctcal_cmd_calibrate(const ctcal_config* cfg, const char* manifest,
                                 const char* method, double alpha,
                                 const char* out_path, char** summary_out) {
  if (auto s = require(cfg && manifest && method && out_path && summary_out,
                       "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::calibrate_cmd(cfg->cfg, manifest, parse_method(method), alpha,
                                out_path)
            .summary_json);
  });
}

ctcal_status ctcal_cmd_predict(const ctcal_config* cfg, const char* calib,
                               const char* manifest, const char* out_dir,
                               const char* map_dir, char** summary_out) {
  if (auto s = require(cfg && calib && manifest && out_dir && summary_out,
                       "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::predict_cmd(cfg->cfg, calib, manifest, out_dir, opt_str(map_dir))
            .summary_json);
  });
}

ctcal_status ctcal_cmd_evaluate(const ctcal_config* cfg, const char* manifest,
                                const char* calib, const char* calib_adj,
                                const char* out_csv, char** summary_out) {
  if (auto s = require(cfg && manifest && calib && out_csv && summary_out,
                       "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::evaluate_cmd(cfg->cfg, manifest, calib, opt_str(calib_adj), out_csv)
            .summary_json);
  });
}

ctcal_status ctcal_cmd_perturb(const ctcal_config* cfg, const char* manifest,
                               int level, uint64_t seed, const char* out_dir,
                               char** summary_out) {
  if (auto s = require(cfg && manifest && out_dir && summary_out, "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::perturb_cmd(cfg->cfg, manifest, level, seed, out_dir).summary_json);
  });
}

ctcal_status ctcal_cmd_bench(const ctcal_config* cfg, const char* experiment,
                             const char* out_dir, uint64_t seed, int dry_run,
                             char** summary_out) {
  if (auto s = require(cfg && experiment && out_dir && summary_out, "null argument"))
    return s;
  return guarded([&] {
    *summary_out = dup_string(
        pipeline::bench_cmd(cfg->cfg, experiment, out_dir, seed, dry_run != 0)
            .summary_json);
  });
}

}  // extern "C"
