#include "ctcal/pipeline.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include "ctcal/conformal.hpp"
#include "ctcal/metrics.hpp"
#include "ctcal/phantom.hpp"
#include "ctcal/rng.hpp"
#include "ctcal/translate.hpp"

namespace ctcal::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string two_digit(int v, int width = 3) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%0*d", width, v);
  return buf;
}

std::string slice_file(const std::string& pid, int sidx, const std::string& role,
                       int sample = -1) {
  std::string name = pid + "_s" + two_digit(sidx) + "_" + role;
  if (sample >= 0) name += "_" + two_digit(sample);
  return name + ".ctvol";
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) raise(ErrorCode::IoFailure, "cannot create directory " + dir);
}

// manifest paths are stored relative to the manifest file
std::string resolve_path(const std::string& manifest_path, const std::string& rel) {
  const fs::path p(rel);
  if (p.is_absolute()) return rel;
  return (fs::path(manifest_path).parent_path() / p).string();
}

std::string rebase_path(const std::string& abs_path, const std::string& new_dir) {
  std::error_code ec;
  const fs::path rel = fs::relative(abs_path, new_dir, ec);
  if (ec || rel.empty()) return fs::absolute(abs_path).string();
  return rel.string();
}

using SliceKey = std::pair<std::string, int>;

// role-indexed view over a manifest
struct ManifestIndex {
  const DatasetManifest* manifest;
  std::string manifest_path;
  std::map<SliceKey, std::map<Role, const SliceRecord*>> primary;
  std::map<SliceKey, std::vector<const SliceRecord*>> samples;

  explicit ManifestIndex(const DatasetManifest& m, std::string path)
      : manifest(&m), manifest_path(std::move(path)) {
    for (const auto& r : m.records) {
      const SliceKey key{r.patient_id, r.slice_index};
      if (r.role == Role::Sample)
        samples[key].push_back(&r);
      else
        primary[key][r.role] = &r;
    }
    for (auto& [key, list] : samples)
      std::sort(list.begin(), list.end(),
                [](const SliceRecord* a, const SliceRecord* b) {
                  return a->sample_index < b->sample_index;
                });
  }

  std::vector<SliceKey> keys() const {
    std::set<SliceKey> all;
    for (const auto& [key, roles] : primary) all.insert(key);
    for (const auto& [key, list] : samples) all.insert(key);
    return {all.begin(), all.end()};
  }

  const SliceRecord* get(const SliceKey& key, Role role) const {
    const auto it = primary.find(key);
    if (it == primary.end()) return nullptr;
    const auto jt = it->second.find(role);
    return jt == it->second.end() ? nullptr : jt->second;
  }

  std::string path_of(const SliceRecord& r) const {
    return resolve_path(manifest_path, r.path);
  }

  ImageGrid load_grid(const SliceKey& key, Role role) const {
    const SliceRecord* r = get(key, role);
    if (!r)
      raise(ErrorCode::ModeInputMissing,
            std::string(role_name(role)) + " record missing for " + key.first +
                " slice " + std::to_string(key.second));
    return read_volume(path_of(*r));
  }

  BinaryMask load_mask(const SliceKey& key, Role role) const {
    const SliceRecord* r = get(key, role);
    if (!r)
      raise(ErrorCode::ModeInputMissing,
            std::string(role_name(role)) + " record missing for " + key.first +
                " slice " + std::to_string(key.second));
    return read_mask_volume(path_of(*r));
  }

  bool has(const SliceKey& key, Role role) const { return get(key, role) != nullptr; }

  std::vector<const SliceRecord*> sample_records(const SliceKey& key) const {
    const auto it = samples.find(key);
    return it == samples.end() ? std::vector<const SliceRecord*>{} : it->second;
  }
};

int distinct_patients(const std::vector<SliceKey>& keys) {
  std::set<std::string> ids;
  for (const auto& k : keys) ids.insert(k.first);
  return static_cast<int>(ids.size());
}

// prior for a slice: manifest masks when present, otherwise derived from the CT
std::optional<SegmentationPrior> slice_prior(const ManifestIndex& index,
                                             const SliceKey& key,
                                             const RunConfig& cfg) {
  if (index.has(key, Role::MaskBody) && index.has(key, Role::MaskBone)) {
    SegmentationPrior prior;
    prior.body = index.load_mask(key, Role::MaskBody);
    prior.bone = index.load_mask(key, Role::MaskBone);
    prior.validate();
    return prior;
  }
  if (index.has(key, Role::Ct)) {
    const ImageGrid ct = index.load_grid(key, Role::Ct);
    return build_prior(ct, cfg.body_seg, cfg.bone_seg);
  }
  return std::nullopt;
}

// fit set assembled from a manifest; owns the loaded grids
struct FitSet {
  std::deque<ImageGrid> cbcts, cts;
  std::deque<SegmentationPrior> priors;
  std::vector<TranslatorCalSlice> slices;
};

FitSet load_fit_set(const ManifestIndex& index, TranslateMode mode,
                    const RunConfig& cfg) {
  FitSet set;
  const bool needs_cbct = mode != TranslateMode::Seg;
  for (const auto& key : index.keys()) {
    if (!index.has(key, Role::Ct)) continue;
    if (needs_cbct && !index.has(key, Role::Cbct)) continue;
    TranslatorCalSlice s;
    set.cts.push_back(index.load_grid(key, Role::Ct));
    s.ct = &set.cts.back();
    if (needs_cbct) {
      set.cbcts.push_back(index.load_grid(key, Role::Cbct));
      s.cbct = &set.cbcts.back();
    }
    if (index.has(key, Role::MaskBody) && index.has(key, Role::MaskBone)) {
      SegmentationPrior prior;
      prior.body = index.load_mask(key, Role::MaskBody);
      prior.bone = index.load_mask(key, Role::MaskBone);
      prior.validate();
      set.priors.push_back(std::move(prior));
      s.prior = &set.priors.back();
    }
    set.slices.push_back(s);
  }
  if (set.slices.empty())
    raise(ErrorCode::EmptyCalibration, "no usable translator fit slices in manifest");
  return set;
}

std::vector<float> normalized_bin_edges(const std::vector<float>& hu_edges,
                                        const NormalizationSpec& norm) {
  std::vector<float> out;
  out.reserve(hu_edges.size());
  for (float e : hu_edges)
    out.push_back(2.0f * (e - norm.hu_min) / (norm.hu_max - norm.hu_min) - 1.0f);
  return out;
}

IntervalField bounds_from_samples(const ManifestIndex& index, const SliceKey& key,
                                  const NormalizationSpec& norm, double q_lo,
                                  double q_hi) {
  const auto records = index.sample_records(key);
  if (records.size() < 2)
    raise(ErrorCode::TooFewSamples, "slice " + key.first + "/" +
                                        std::to_string(key.second) +
                                        " has fewer than 2 samples");
  std::vector<ImageGrid> samples;
  samples.reserve(records.size());
  for (const auto* r : records)
    samples.push_back(normalize(read_volume(index.path_of(*r)), norm));
  return heuristic_bounds(samples, q_lo, q_hi);
}

struct StageClock {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  json stages = json::object();

  void lap(const std::string& name) {
    const auto now = std::chrono::steady_clock::now();
    const double secs = std::chrono::duration<double>(now - start).count();
    stages[name] = secs;
    std::cerr << "[stage] " << name << ": " << secs << " s\n";
    start = now;
  }
};

double saturation_hint(double alpha) {
  // smallest count for which the conformal rank stays within n_c
  return std::ceil((1.0 - alpha) / alpha - 1e-9);
}

}  // namespace

CommandResult phantom_gen(const RunConfig& cfg, int patients, int slices,
                          std::uint64_t seed, const std::string& out_dir) {
  cfg.validate();
  if (patients < 1 || slices < 1)
    raise(ErrorCode::InvalidArgument, "patients and slices must be >= 1");
  ensure_dir(out_dir);

  DatasetManifest manifest;
  for (int p = 0; p < patients; ++p) {
    const std::string pid = "p" + two_digit(p);
    for (int s = 0; s < slices; ++s) {
      const std::uint64_t sseed = slice_seed(seed, pid, s);
      const PhantomSlice ph = generate_phantom(cfg.phantom, sseed);
      const ImageGrid cbct =
          degrade_to_cbct(ph.ct, cfg.degradation, mix_seed(sseed, 0xDE6));
      const struct {
        const char* role;
        Role role_id;
      } files[] = {{"ct", Role::Ct},
                   {"cbct", Role::Cbct},
                   {"mask_body", Role::MaskBody},
                   {"mask_bone", Role::MaskBone}};
      for (const auto& f : files) {
        const std::string name = slice_file(pid, s, f.role);
        const std::string path = (fs::path(out_dir) / name).string();
        switch (f.role_id) {
          case Role::Ct: write_volume(path, ph.ct); break;
          case Role::Cbct: write_volume(path, cbct); break;
          case Role::MaskBody: write_volume(path, ph.body_truth); break;
          case Role::MaskBone: write_volume(path, ph.bone_truth); break;
          default: break;
        }
        manifest.add({pid, s, f.role_id, std::nullopt, name});
      }
    }
  }
  const std::string manifest_path = (fs::path(out_dir) / "manifest.csv").string();
  write_manifest(manifest_path, manifest);

  json summary;
  summary["command"] = "phantom-gen";
  summary["patients"] = patients;
  summary["slices_per_patient"] = slices;
  summary["records"] = manifest.records.size();
  summary["manifest"] = manifest_path;
  return {summary.dump()};
}

CommandResult segment(const RunConfig& cfg, const std::string& input_path,
                      const std::string& out_body, const std::string& out_bone,
                      const std::optional<std::string>& truth_dir) {
  cfg.validate();
  const ImageGrid grid = read_volume(input_path);
  const std::optional<NormalizationSpec> spec =
      grid.units() == Units::Normalized
          ? std::optional<NormalizationSpec>(cfg.normalization)
          : std::nullopt;
  const SegmentationPrior prior =
      build_prior(grid, cfg.body_seg, cfg.bone_seg, spec);
  write_volume(out_body, prior.body);
  write_volume(out_bone, prior.bone);

  json summary;
  summary["command"] = "segment";
  summary["body_pixels"] = prior.body.count();
  summary["bone_pixels"] = prior.bone.count();
  if (truth_dir) {
    // truth masks follow the generator's naming: <stem>_mask_<kind>.ctvol with
    // the input's role suffix stripped
    std::string stem = fs::path(input_path).stem().string();
    for (const char* suffix : {"_ct", "_cbct", "_pct", "_sct"}) {
      if (stem.size() > std::strlen(suffix) &&
          stem.compare(stem.size() - std::strlen(suffix), std::string::npos,
                       suffix) == 0) {
        stem.resize(stem.size() - std::strlen(suffix));
        break;
      }
    }
    const BinaryMask truth_body =
        read_mask_volume((fs::path(*truth_dir) / (stem + "_mask_body.ctvol")).string());
    const BinaryMask truth_bone =
        read_mask_volume((fs::path(*truth_dir) / (stem + "_mask_bone.ctvol")).string());
    summary["dice_body"] = dice(prior.body, truth_body);
    summary["dice_bone"] = dice(prior.bone, truth_bone);
  }
  return {summary.dump()};
}

CommandResult translate_cmd(const RunConfig& cfg, const std::string& manifest_path,
                            const std::optional<std::string>& fit_manifest_path,
                            TranslateMode mode, const std::string& out_dir,
                            int samples, std::uint64_t seed) {
  RunConfig local = cfg;
  local.mode = mode;
  local.seed = seed;
  local.validate();
  if (samples < 0) raise(ErrorCode::InvalidArgument, "samples must be >= 0");

  const DatasetManifest manifest = read_manifest(manifest_path);
  const ManifestIndex index(manifest, manifest_path);

  const std::string fit_path = fit_manifest_path.value_or(manifest_path);
  const DatasetManifest fit_manifest =
      fit_manifest_path ? read_manifest(fit_path) : manifest;
  const ManifestIndex fit_index(fit_manifest, fit_path);

  const FitSet fit = load_fit_set(fit_index, mode, local);
  const TranslatorModel model = fit_translator(fit.slices, mode, local.translator());

  ensure_dir(out_dir);
  DatasetManifest out_manifest;
  // carry non-derived records over, rebased onto the output directory
  for (const auto& r : manifest.records) {
    if (r.role == Role::Sct || r.role == Role::Sample) continue;
    SliceRecord moved = r;
    moved.path = rebase_path(resolve_path(manifest_path, r.path), out_dir);
    out_manifest.add(std::move(moved));
  }

  const bool needs_cbct = mode != TranslateMode::Seg;
  const bool needs_prior = mode != TranslateMode::Cbct;
  int translated = 0;
  for (const auto& key : index.keys()) {
    ImageGrid cbct;
    if (needs_cbct) cbct = index.load_grid(key, Role::Cbct);
    std::optional<SegmentationPrior> prior;
    if (needs_prior) {
      prior = slice_prior(index, key, local);
      if (!prior)
        raise(ErrorCode::ModeInputMissing,
              "no prior masks or CT to derive them for " + key.first + " slice " +
                  std::to_string(key.second));
    }

    const ImageGrid sct = translate_with(model, needs_cbct ? &cbct : nullptr,
                                         prior ? &*prior : nullptr);
    const std::string sct_name = slice_file(key.first, key.second, "sct");
    write_volume((fs::path(out_dir) / sct_name).string(), sct);
    out_manifest.add({key.first, key.second, Role::Sct, std::nullopt, sct_name});
    ++translated;

    if (samples > 0) {
      SamplerConfig scfg = local.sampler;
      scfg.k = samples;
      scfg.seed = slice_seed(seed, key.first, key.second);
      const std::vector<ImageGrid> ens =
          sample_ensemble(model, needs_cbct ? &cbct : nullptr,
                          prior ? &*prior : nullptr, scfg, local.normalization);
      for (int k = 0; k < static_cast<int>(ens.size()); ++k) {
        const ImageGrid hu = denormalize(ens[static_cast<std::size_t>(k)],
                                         local.normalization);
        const std::string name = slice_file(key.first, key.second, "sample", k);
        write_volume((fs::path(out_dir) / name).string(), hu);
        out_manifest.add({key.first, key.second, Role::Sample, k, name});
      }
    }
  }
  const std::string out_manifest_path = (fs::path(out_dir) / "manifest.csv").string();
  write_manifest(out_manifest_path, out_manifest);

  json summary;
  summary["command"] = "translate";
  summary["mode"] = translate_mode_name(mode);
  summary["translated"] = translated;
  summary["samples_per_slice"] = samples;
  summary["fit_slices"] = fit.slices.size();
  summary["manifest"] = out_manifest_path;
  return {summary.dump()};
}

CommandResult calibrate_cmd(const RunConfig& cfg, const std::string& manifest_path,
                            MethodId method, double alpha,
                            const std::string& out_path) {
  RunConfig local = cfg;
  local.alpha = alpha;
  local.validate();

  const DatasetManifest manifest = read_manifest(manifest_path);
  const ManifestIndex index(manifest, manifest_path);
  const bool adjusted = method == MethodId::PwScpAdj || method == MethodId::PwCrcAdj;
  const bool is_crc = method == MethodId::PwCrc || method == MethodId::PwCrcAdj;

  json summary;
  summary["command"] = "calibrate";
  summary["method"] = method_name(method);
  summary["alpha"] = alpha;

  if (!is_crc) {
    std::vector<SliceKey> keys;
    for (const auto& key : index.keys())
      if (index.has(key, Role::Sct) && index.has(key, Role::Ct)) keys.push_back(key);
    if (keys.empty())
      raise(ErrorCode::EmptyCalibration, "manifest has no (sct, ct) pairs");

    ScpOptions opts;
    opts.alpha = alpha;
    opts.adjusted = adjusted;
    opts.patients = distinct_patients(keys);
    opts.eval_mask_policy = local.eval_mask_policy;
    opts.norm = local.normalization;
    opts.threads = local.threads;
    const auto provider = [&](int i) {
      const SliceKey& key = keys[static_cast<std::size_t>(i)];
      const ImageGrid sct = normalize(index.load_grid(key, Role::Sct), opts.norm);
      const ImageGrid ct = normalize(index.load_grid(key, Role::Ct), opts.norm);
      return conformity_scores(sct, ct);
    };
    ScpCalibration cal =
        calibrate_pw_scp_stream(provider, static_cast<int>(keys.size()), opts);
    if (cal.saturated) {
      const int hint = static_cast<int>(saturation_hint(alpha));
      raise(ErrorCode::Saturated,
            "conformal rank exceeds n_c everywhere; need " +
                std::string(adjusted ? "P >= " : "n_c >= ") + std::to_string(hint));
    }
    cal.config_json = local.canonical_json();
    write_scp_calibration(out_path, cal);

    double qmin = cal.qhat.values()[0], qmax = qmin, qsum = 0.0;
    for (float v : cal.qhat.values()) {
      qmin = std::min(qmin, static_cast<double>(v));
      qmax = std::max(qmax, static_cast<double>(v));
      qsum += v;
    }
    summary["n_c"] = cal.n_c;
    summary["patients"] = cal.patients;
    summary["n_p"] = cal.n_p;
    summary["qhat_min"] = qmin;
    summary["qhat_mean"] = qsum / static_cast<double>(cal.qhat.size());
    summary["qhat_max"] = qmax;
  } else {
    std::vector<SliceKey> keys;
    for (const auto& key : index.keys())
      if (index.sample_records(key).size() >= 2 && index.has(key, Role::Ct))
        keys.push_back(key);
    if (keys.empty())
      raise(ErrorCode::EmptyCalibration, "manifest has no (samples, ct) slices");

    CrcOptions opts;
    opts.alpha = alpha;
    opts.b = local.crc_b;
    opts.adjusted = adjusted;
    opts.patients = distinct_patients(keys);
    opts.q_lo = local.crc_q_lo;
    opts.q_hi = local.crc_q_hi;
    opts.pixel_level_loss = local.crc_pixel_level_loss;
    opts.eval_mask_policy = local.eval_mask_policy;
    opts.norm = local.normalization;

    std::deque<IntervalField> bounds;
    std::deque<ImageGrid> cts;
    std::deque<BinaryMask> masks;
    std::vector<CrcCalSlice> slices;
    for (const auto& key : keys) {
      bounds.push_back(
          bounds_from_samples(index, key, opts.norm, opts.q_lo, opts.q_hi));
      cts.push_back(normalize(index.load_grid(key, Role::Ct), opts.norm));
      if (opts.eval_mask_policy == EvalMaskPolicy::Full) {
        masks.push_back(BinaryMask(cts.back().height(), cts.back().width(), 1));
      } else {
        const auto prior = slice_prior(index, key, local);
        if (!prior)
          raise(ErrorCode::ModeInputMissing,
                "no body mask available for CRC slice " + key.first);
        masks.push_back(prior->body);
      }
      slices.push_back({&bounds.back(), &cts.back(), &masks.back()});
    }
    CrcCalibration cal = calibrate_pw_crc(slices, opts);
    cal.config_json = local.canonical_json();
    write_crc_calibration(out_path, cal);

    summary["n_c"] = cal.n_c;
    summary["patients"] = cal.patients;
    summary["n_p"] = cal.n_p;
    summary["lambda_hat"] = cal.lambda_hat;
  }
  summary["out"] = out_path;
  return {summary.dump()};
}

CommandResult predict_cmd(const RunConfig& cfg, const std::string& calib_path,
                          const std::string& manifest_path,
                          const std::string& out_dir,
                          const std::optional<std::string>& map_dir) {
  cfg.validate();
  const DatasetManifest manifest = read_manifest(manifest_path);
  const ManifestIndex index(manifest, manifest_path);
  const MethodId method = peek_calibration_method(calib_path);
  const bool is_crc = method == MethodId::PwCrc || method == MethodId::PwCrcAdj;

  ensure_dir(out_dir);
  if (map_dir) ensure_dir(*map_dir);
  const float map_hi = std::log1p(2.0f);  // largest normalized interval size

  int predicted = 0;
  NormalizationSpec norm;
  auto emit = [&](const SliceKey& key, const IntervalField& iv) {
    const std::string lo_name = slice_file(key.first, key.second, "lower");
    const std::string hi_name = slice_file(key.first, key.second, "upper");
    write_volume((fs::path(out_dir) / lo_name).string(), iv.lower);
    write_volume((fs::path(out_dir) / hi_name).string(), iv.upper);
    if (map_dir) {
      const ImageGrid umap = uncertainty_map(iv, Units::Normalized);
      const std::string map_name =
          key.first + "_s" + two_digit(key.second) + "_umap.pgm";
      export_pgm(umap, (fs::path(*map_dir) / map_name).string(), 0.0f, map_hi);
    }
    ++predicted;
  };

  if (!is_crc) {
    const ScpCalibration cal = read_scp_calibration(calib_path);
    if (cal.config_json != cfg.canonical_json())
      raise(ErrorCode::DigestMismatch,
            "calibration was produced under a different config (digest mismatch)");
    norm = cal.norm;
    for (const auto& key : index.keys()) {
      if (!index.has(key, Role::Sct)) continue;
      const ImageGrid sct = normalize(index.load_grid(key, Role::Sct), cal.norm);
      emit(key, predict_scp(sct, cal));
    }
  } else {
    const CrcCalibration cal = read_crc_calibration(calib_path);
    if (cal.config_json != cfg.canonical_json())
      raise(ErrorCode::DigestMismatch,
            "calibration was produced under a different config (digest mismatch)");
    norm = cal.norm;
    for (const auto& key : index.keys()) {
      if (index.sample_records(key).size() < 2) continue;
      const IntervalField bounds =
          bounds_from_samples(index, key, cal.norm, cal.q_lo, cal.q_hi);
      emit(key, predict_crc(bounds, cal));
    }
  }
  if (predicted == 0)
    raise(ErrorCode::ModeInputMissing, "manifest has no slices usable for prediction");

  json summary;
  summary["command"] = "predict";
  summary["method"] = method_name(method);
  summary["predicted"] = predicted;
  summary["out"] = out_dir;
  if (map_dir) summary["maps"] = *map_dir;
  return {summary.dump()};
}

namespace {

struct LoadedCalibration {
  bool is_crc = false;
  ScpCalibration scp;
  CrcCalibration crc;

  double alpha() const { return is_crc ? crc.alpha : scp.alpha; }
  const NormalizationSpec& norm() const { return is_crc ? crc.norm : scp.norm; }
};

LoadedCalibration load_calibration(const std::string& path) {
  LoadedCalibration out;
  const MethodId method = peek_calibration_method(path);
  out.is_crc = method == MethodId::PwCrc || method == MethodId::PwCrcAdj;
  if (out.is_crc)
    out.crc = read_crc_calibration(path);
  else
    out.scp = read_scp_calibration(path);
  return out;
}

struct UqMetrics {
  double coverage;
  double stratified_error;
  double size;
};

UqMetrics uq_metrics(const LoadedCalibration& cal, const ManifestIndex& index,
                     const SliceKey& key, const ImageGrid& ct_n,
                     const BinaryMask& eval_mask, const StratificationBins& bins_n,
                     bool clip_size, bool size_in_hu,
                     std::vector<double>* group_coverage = nullptr) {
  IntervalField iv;
  double unclipped_extra = 0.0;  // width beyond the clipped field, if requested
  if (cal.is_crc) {
    const IntervalField bounds =
        bounds_from_samples(index, key, cal.crc.norm, cal.crc.q_lo, cal.crc.q_hi);
    iv = predict_crc(bounds, cal.crc);
    if (!clip_size) {
      // width of l-lambda..u+lambda without the [-1, 1] intersection
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t p = 0; p < ct_n.size(); ++p) {
        if (!eval_mask.bits()[p]) continue;
        acc += static_cast<double>(bounds.upper.values()[p]) -
               bounds.lower.values()[p] + 2.0 * cal.crc.lambda_hat;
        ++n;
      }
      unclipped_extra = n ? acc / static_cast<double>(n) : 0.0;
    }
  } else {
    const ImageGrid sct = normalize(index.load_grid(key, Role::Sct), cal.scp.norm);
    iv = predict_scp(sct, cal.scp);
    if (!clip_size) {
      double acc = 0.0;
      std::size_t n = 0;
      for (std::size_t p = 0; p < ct_n.size(); ++p) {
        if (!eval_mask.bits()[p]) continue;
        acc += 2.0 * static_cast<double>(cal.scp.qhat.values()[p]);
        ++n;
      }
      unclipped_extra = n ? acc / static_cast<double>(n) : 0.0;
    }
  }
  UqMetrics m;
  m.coverage = marginal_coverage(iv, ct_n, eval_mask);
  m.stratified_error = stratified_coverage_error(iv, ct_n, eval_mask, bins_n,
                                                 cal.alpha(), group_coverage);
  m.size = clip_size ? mean_interval_size(iv, eval_mask) : unclipped_extra;
  if (size_in_hu) m.size *= cal.norm().half_range();
  return m;
}

}  // namespace

CommandResult evaluate_cmd(const RunConfig& cfg, const std::string& manifest_path,
                           const std::string& calib_path,
                           const std::optional<std::string>& calib_adj_path,
                           const std::string& out_csv) {
  cfg.validate();
  const DatasetManifest manifest = read_manifest(manifest_path);
  const ManifestIndex index(manifest, manifest_path);

  const LoadedCalibration cal = load_calibration(calib_path);
  std::optional<LoadedCalibration> cal_adj;
  if (calib_adj_path) {
    cal_adj = load_calibration(*calib_adj_path);
    if (cal_adj->is_crc != cal.is_crc)
      raise(ErrorCode::MethodMismatch,
            "base and adjusted calibrations use different methods");
  }

  // HU reporting and bin placement use the window recorded in the artifact
  const NormalizationSpec norm = cal.norm();
  const StratificationBins bins_n{normalized_bin_edges(cfg.bins, norm)};

  std::vector<MetricsReport> rows;
  int skipped = 0;
  for (const auto& key : index.keys()) {
    if (!index.has(key, Role::Sct) || !index.has(key, Role::Ct)) continue;
    if (cal.is_crc && index.sample_records(key).size() < 2) continue;

    const ImageGrid ct = index.load_grid(key, Role::Ct);
    const ImageGrid sct = index.load_grid(key, Role::Sct);

    SegmentationPrior truth;
    try {
      truth = build_prior(ct, cfg.body_seg, cfg.bone_seg);
    } catch (const Error& e) {
      if (e.code() == ErrorCode::EmptyBody) {
        ++skipped;
        continue;
      }
      throw;
    }
    SegmentationPrior pred;
    try {
      pred = build_prior(sct, cfg.body_seg, cfg.bone_seg);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyBody) throw;
      pred.body = BinaryMask(ct.height(), ct.width());
      pred.bone = BinaryMask(ct.height(), ct.width());
    }

    const BinaryMask eval_mask = cfg.eval_mask_policy == EvalMaskPolicy::Full
                                     ? BinaryMask(ct.height(), ct.width(), 1)
                                     : truth.body;

    MetricsReport row;
    row.patient_id = key.first;
    row.slice_index = key.second;
    row.mask_pixels = eval_mask.count();
    row.mae_hu = masked_mae(sct, ct, eval_mask);
    try {
      row.soft_mae_hu = soft_mae(sct, ct, truth.body, pred.body, truth.bone, pred.bone);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptySoftMask) throw;
    }
    row.dice_body = dice(truth.body, pred.body);
    row.dice_bone = dice(truth.bone, pred.bone);

    const ImageGrid ct_n = normalize(ct, norm);
    const UqMetrics base =
        uq_metrics(cal, index, key, ct_n, eval_mask, bins_n,
                   cfg.clip_interval_size, cfg.interval_size_hu,
                   &row.group_coverage);
    row.marginal_coverage = base.coverage;
    row.stratified_coverage_error = base.stratified_error;
    row.mean_interval_size = base.size;
    if (cal_adj) {
      const UqMetrics adj =
          uq_metrics(*cal_adj, index, key, ct_n, eval_mask, bins_n,
                     cfg.clip_interval_size, cfg.interval_size_hu);
      row.marginal_coverage_adj = adj.coverage;
      row.stratified_coverage_error_adj = adj.stratified_error;
      row.mean_interval_size_adj = adj.size;
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty())
    raise(ErrorCode::EmptyMask, "no evaluable slices in manifest");

  std::string csv = metrics_csv_header() + "\n";
  for (const auto& r : rows) csv += metrics_csv_row(r) + "\n";
  const MetricsReport agg = aggregate_reports(rows);
  csv += metrics_csv_row(agg) + "\n";
  write_file_bytes(out_csv, csv);

  json summary;
  summary["command"] = "evaluate";
  summary["slices"] = rows.size();
  summary["skipped"] = skipped;
  summary["mae_hu"] = agg.mae_hu;
  if (agg.soft_mae_hu) summary["soft_mae_hu"] = *agg.soft_mae_hu;
  summary["dice_body"] = agg.dice_body;
  summary["dice_bone"] = agg.dice_bone;
  if (agg.marginal_coverage) summary["mcov_base"] = *agg.marginal_coverage;
  if (agg.stratified_coverage_error)
    summary["pcov_base"] = *agg.stratified_coverage_error;
  if (agg.mean_interval_size) summary["size_base"] = *agg.mean_interval_size;
  if (agg.marginal_coverage_adj) summary["mcov_adj"] = *agg.marginal_coverage_adj;
  if (agg.stratified_coverage_error_adj)
    summary["pcov_adj"] = *agg.stratified_coverage_error_adj;
  if (agg.mean_interval_size_adj) summary["size_adj"] = *agg.mean_interval_size_adj;
  summary["out"] = out_csv;
  return {summary.dump()};
}

CommandResult perturb_cmd(const RunConfig& cfg, const std::string& manifest_path,
                          int level, std::uint64_t seed,
                          const std::string& out_dir) {
  cfg.validate();
  const PerturbationLevel lvl{level};
  lvl.validate();
  const DatasetManifest manifest = read_manifest(manifest_path);
  const ManifestIndex index(manifest, manifest_path);
  ensure_dir(out_dir);

  DatasetManifest out_manifest;
  int perturbed = 0;
  for (const auto& r : manifest.records) {
    if (r.role != Role::MaskBody && r.role != Role::MaskBone) {
      SliceRecord moved = r;
      moved.path = rebase_path(resolve_path(manifest_path, r.path), out_dir);
      out_manifest.add(std::move(moved));
      continue;
    }
    const std::string src = resolve_path(manifest_path, r.path);
    const std::string name =
        slice_file(r.patient_id, r.slice_index,
                   r.role == Role::MaskBody ? "mask_body" : "mask_bone");
    const std::string dst = (fs::path(out_dir) / name).string();
    if (level == 0) {
      // bit-exact copy
      write_file_bytes(dst, read_file_bytes(src));
    } else {
      // body and bone of one slice share the same affine draw
      const std::uint64_t pseed = slice_seed(seed, r.patient_id, r.slice_index);
      const BinaryMask mask = read_mask_volume(src);
      write_volume(dst, apply_affine_perturbation(mask, lvl, pseed));
    }
    out_manifest.add({r.patient_id, r.slice_index, r.role, std::nullopt, name});
    ++perturbed;
  }
  const std::string out_manifest_path = (fs::path(out_dir) / "manifest.csv").string();
  write_manifest(out_manifest_path, out_manifest);

  json summary;
  summary["command"] = "perturb";
  summary["level"] = level;
  summary["masks"] = perturbed;
  summary["manifest"] = out_manifest_path;
  return {summary.dump()};
}

CommandResult bench_cmd(const RunConfig& cfg, const std::string& experiment,
                        const std::string& out_dir, std::uint64_t seed,
                        bool dry_run) {
  RunConfig local = cfg;
  local.seed = seed;
  local.validate();
  if (experiment != "table1-phantom" && experiment != "fig3-noise")
    raise(ErrorCode::InvalidArgument, "unknown experiment: " + experiment);

  json summary;
  summary["command"] = "bench";
  summary["experiment"] = experiment;
  summary["seed"] = seed;
  if (dry_run) {
    summary["dry_run"] = true;
    summary["config_digest"] = local.digest_hex();
    return {summary.dump()};
  }
  ensure_dir(out_dir);
  StageClock clock;

  const auto sub = [&](const std::string& name) {
    return (fs::path(out_dir) / name).string();
  };
  const auto manifest_of = [](const std::string& dir) {
    return (fs::path(dir) / "manifest.csv").string();
  };

  if (experiment == "table1-phantom") {
    phantom_gen(local, 4, 6, mix_seed(seed, 1), sub("train"));
    phantom_gen(local, 10, 5, mix_seed(seed, 2), sub("cal"));
    phantom_gen(local, 4, 5, mix_seed(seed, 3), sub("test"));
    clock.lap("phantom-gen");

    std::string csv =
        "block,mode,mae_hu,soft_mae_hu,dice_body,dice_bone,"
        "mcov_base,mcov_adj,pcov_base,pcov_adj,size_base,size_adj\n";
    const TranslateMode modes[] = {TranslateMode::Cbct, TranslateMode::Seg,
                                   TranslateMode::CbctSeg};
    for (const char* block : {"pw-scp", "pw-crc"}) {
      const bool is_crc = std::string(block) == "pw-crc";
      for (TranslateMode mode : modes) {
        const std::string tag =
            std::string(block) + "_" + translate_mode_name(mode);
        const std::string cal_dir = sub("xlat_cal_" + tag);
        const std::string test_dir = sub("xlat_test_" + tag);
        const int k = is_crc ? local.sampler.k : 0;
        translate_cmd(local, manifest_of(sub("cal")), manifest_of(sub("train")),
                      mode, cal_dir, k, mix_seed(seed, 10));
        translate_cmd(local, manifest_of(sub("test")), manifest_of(sub("train")),
                      mode, test_dir, k, mix_seed(seed, 11));
        clock.lap("translate " + tag);

        const std::string cal_base = sub("calib_" + tag + "_base.ctcal");
        const std::string cal_adj = sub("calib_" + tag + "_adj.ctcal");
        calibrate_cmd(local, manifest_of(cal_dir),
                      is_crc ? MethodId::PwCrc : MethodId::PwScp, local.alpha,
                      cal_base);
        calibrate_cmd(local, manifest_of(cal_dir),
                      is_crc ? MethodId::PwCrcAdj : MethodId::PwScpAdj, local.alpha,
                      cal_adj);
        clock.lap("calibrate " + tag);

        const std::string results = sub("eval_" + tag + ".csv");
        const CommandResult eval =
            evaluate_cmd(local, manifest_of(test_dir), cal_base, cal_adj, results);
        clock.lap("evaluate " + tag);

        const json ev = json::parse(eval.summary_json);
        const auto field = [&](const char* key) {
          return ev.contains(key) ? std::to_string(ev[key].get<double>())
                                  : std::string();
        };
        csv += std::string(block) + "," + translate_mode_name(mode) + "," +
               field("mae_hu") + "," + field("soft_mae_hu") + "," +
               field("dice_body") + "," + field("dice_bone") + "," +
               field("mcov_base") + "," + field("mcov_adj") + "," +
               field("pcov_base") + "," + field("pcov_adj") + "," +
               field("size_base") + "," + field("size_adj") + "\n";
      }
    }
    const std::string csv_path = sub("table1.csv");
    write_file_bytes(csv_path, csv);
    summary["table"] = csv_path;
  } else {
    phantom_gen(local, 4, 6, mix_seed(seed, 1), sub("train"));
    phantom_gen(local, 10, 5, mix_seed(seed, 2), sub("eval"));
    clock.lap("phantom-gen");

    std::string csv = "level,mode,mae_hu,soft_mae_hu,dice_body,dice_bone\n";
    for (int level = 0; level <= 4; ++level) {
      const std::string ltag = "l" + std::to_string(level);
      const std::string eval_p = sub("perturb_eval_" + ltag);
      // translators stay fitted on clean priors; only the inference-time
      // priors degrade. Common random numbers across levels: the same seed
      // scales the same affine draw, so each slice's distortion grows with
      // the level.
      perturb_cmd(local, manifest_of(sub("eval")), level, mix_seed(seed, 41),
                  eval_p);
      for (TranslateMode mode : {TranslateMode::Seg, TranslateMode::CbctSeg}) {
        const std::string tag = ltag + "_" + translate_mode_name(mode);
        const std::string xdir = sub("xlat_" + tag);
        translate_cmd(local, manifest_of(eval_p), manifest_of(sub("train")), mode,
                      xdir, 0, mix_seed(seed, 60 + level));

        // translation metrics only; no calibration stage at this level
        const DatasetManifest m = read_manifest(manifest_of(xdir));
        const ManifestIndex idx(m, manifest_of(xdir));
        double mae = 0.0, soft = 0.0, dbody = 0.0, dbone = 0.0;
        int n = 0, n_soft = 0;
        for (const auto& key : idx.keys()) {
          if (!idx.has(key, Role::Sct) || !idx.has(key, Role::Ct)) continue;
          const ImageGrid ct = idx.load_grid(key, Role::Ct);
          const ImageGrid sct = idx.load_grid(key, Role::Sct);
          const SegmentationPrior truth =
              build_prior(ct, local.body_seg, local.bone_seg);
          SegmentationPrior pred;
          try {
            pred = build_prior(sct, local.body_seg, local.bone_seg);
          } catch (const Error& e) {
            if (e.code() != ErrorCode::EmptyBody) throw;
            pred.body = BinaryMask(ct.height(), ct.width());
            pred.bone = BinaryMask(ct.height(), ct.width());
          }
          mae += masked_mae(sct, ct, truth.body);
          try {
            soft += soft_mae(sct, ct, truth.body, pred.body, truth.bone, pred.bone);
            ++n_soft;
          } catch (const Error& e) {
            if (e.code() != ErrorCode::EmptySoftMask) throw;
          }
          dbody += dice(truth.body, pred.body);
          dbone += dice(truth.bone, pred.bone);
          ++n;
        }
        if (n == 0) raise(ErrorCode::EmptyMask, "no evaluable slices at " + tag);
        csv += std::to_string(level) + "," + translate_mode_name(mode) + "," +
               std::to_string(mae / n) + "," +
               (n_soft ? std::to_string(soft / n_soft) : std::string()) + "," +
               std::to_string(dbody / n) + "," + std::to_string(dbone / n) + "\n";
      }
      clock.lap("level " + std::to_string(level));
    }
    const std::string csv_path = sub("fig3.csv");
    write_file_bytes(csv_path, csv);
    summary["table"] = csv_path;
  }
  summary["stage_seconds"] = clock.stages;
  return {summary.dump()};
}

}  // namespace ctcal::pipeline
