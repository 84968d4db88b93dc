// ctcal command-line front end. All functionality lives behind the libctcal
// C API; this file only parses arguments, folds flags into the run config,
// and reports results.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctcal.h"

namespace {

// documented, stable exit codes
constexpr int kExitUsage = 2;       // invalid arguments
constexpr int kExitIo = 3;          // I/O or format failure
constexpr int kExitEmpty = 4;       // empty body / nothing evaluable
constexpr int kExitInfeasible = 5;  // saturated or infeasible calibration
constexpr int kExitDigest = 6;      // digest or method/payload mismatch

int exit_code_for(ctcal_status status) {
  switch (status) {
    case CTCAL_OK: return 0;
    case CTCAL_ERR_INVALID_ARG:
    case CTCAL_ERR_MODE_INPUT_MISSING:
    case CTCAL_ERR_CONFIG:
    case CTCAL_ERR_SHAPE_MISMATCH: return kExitUsage;
    case CTCAL_ERR_IO:
    case CTCAL_ERR_FORMAT: return kExitIo;
    case CTCAL_ERR_EMPTY_BODY:
    case CTCAL_ERR_EMPTY_MASK: return kExitEmpty;
    case CTCAL_ERR_SATURATED:
    case CTCAL_ERR_INFEASIBLE: return kExitInfeasible;
    case CTCAL_ERR_DIGEST_MISMATCH: return kExitDigest;
    default: return 1;
  }
}

struct ConfigHandle {
  ctcal_config* cfg = nullptr;
  ~ConfigHandle() { ctcal_config_free(cfg); }
};

int fail(ctcal_status status) {
  std::fprintf(stderr, "error: %s\n", ctcal_last_error());
  return exit_code_for(status);
}

// resolves config precedence (defaults < file < flags) and prints the
// resolved document plus its digest
int resolve_config(ConfigHandle& handle, const std::string& config_path,
                   const std::vector<std::pair<std::string, std::string>>& overrides) {
  ctcal_status s = config_path.empty()
                       ? ctcal_config_default(&handle.cfg)
                       : ctcal_config_load(config_path.c_str(), &handle.cfg);
  if (s != CTCAL_OK) return fail(s);
  for (const auto& [key, value] : overrides) {
    s = ctcal_config_set(handle.cfg, key.c_str(), value.c_str());
    if (s != CTCAL_OK) return fail(s);
  }
  char* dump = nullptr;
  if ((s = ctcal_config_dump(handle.cfg, &dump)) != CTCAL_OK) return fail(s);
  char digest[65];
  if ((s = ctcal_config_digest(handle.cfg, digest)) != CTCAL_OK) {
    ctcal_string_free(dump);
    return fail(s);
  }
  std::printf("config: %s\n", dump);
  std::printf("config-digest: %s\n", digest);
  ctcal_string_free(dump);
  return 0;
}

int finish(ctcal_status status, char** summary) {
  if (status != CTCAL_OK) return fail(status);
  std::printf("%s\n", *summary);
  ctcal_string_free(*summary);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ctcal: segmentation priors, conformal calibration, and "
               "evaluation metrics for CBCT-to-CT translation"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file")->capture_default_str();

  // phantom gen
  auto* phantom = app.add_subcommand("phantom", "procedural dataset tools");
  phantom->require_subcommand(1);
  auto* gen = phantom->add_subcommand("gen", "generate a paired phantom dataset");
  int gen_patients = 1, gen_slices = 1;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--patients", gen_patients, "number of synthetic patients")
      ->required();
  gen->add_option("--slices", gen_slices, "slices per patient")->required();
  gen->add_option("--seed", gen_seed, "master seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();

  // segment
  auto* seg = app.add_subcommand("segment", "extract body and bone priors");
  std::string seg_input, seg_body, seg_bone, seg_truth;
  seg->add_option("--input", seg_input, "input CT volume")->required();
  seg->add_option("--out-body", seg_body, "output body mask")->required();
  seg->add_option("--out-bone", seg_bone, "output bone mask")->required();
  seg->add_option("--truth-dir", seg_truth,
                  "directory with analytic truth masks; prints Dice");

  // translate
  auto* xlat = app.add_subcommand("translate", "run a translator stub");
  std::string xlat_manifest, xlat_fit, xlat_mode, xlat_out;
  int xlat_samples = 0;
  std::uint64_t xlat_seed = 0;
  xlat->add_option("--manifest", xlat_manifest, "dataset manifest")->required();
  xlat->add_option("--fit-manifest", xlat_fit,
                   "manifest used to fit the translator (defaults to --manifest)");
  xlat->add_option("--mode", xlat_mode, "cbct | seg | c+seg")->required();
  xlat->add_option("--out", xlat_out, "output directory")->required();
  xlat->add_option("--samples", xlat_samples, "stochastic samples per slice");
  xlat->add_option("--seed", xlat_seed, "sampler seed");

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "fit a conformal calibration");
  std::string cal_manifest, cal_method, cal_out;
  double cal_alpha = 0.1;
  cal->add_option("--manifest", cal_manifest, "calibration manifest")->required();
  cal->add_option("--method", cal_method,
                  "pw-scp | pw-scp-adj | pw-crc | pw-crc-adj")
      ->required();
  cal->add_option("--alpha", cal_alpha, "miscoverage level")->capture_default_str();
  cal->add_option("--out", cal_out, "output calibration file")->required();

  // predict
  auto* pred = app.add_subcommand("predict", "emit per-pixel interval volumes");
  std::string pred_calib, pred_manifest, pred_out, pred_maps;
  pred->add_option("--calib", pred_calib, "calibration file")->required();
  pred->add_option("--manifest", pred_manifest, "dataset manifest")->required();
  pred->add_option("--out", pred_out, "output directory")->required();
  pred->add_option("--map-out", pred_maps, "write PGM uncertainty maps here");

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "compute the metrics report");
  std::string eval_manifest, eval_calib, eval_calib_adj, eval_bins, eval_out;
  eval->add_option("--manifest", eval_manifest, "dataset manifest")->required();
  eval->add_option("--calib", eval_calib, "calibration file (base columns)")
      ->required();
  eval->add_option("--calib-adj", eval_calib_adj,
                   "adjusted calibration (adj columns)");
  eval->add_option("--bins", eval_bins,
                   "stratification HU edges, e.g. \"[-200,150,350]\"");
  eval->add_option("--out", eval_out, "output CSV")->required();

  // perturb
  auto* pert = app.add_subcommand("perturb", "affine-perturb prior masks");
  std::string pert_manifest, pert_out;
  int pert_level = 0;
  std::uint64_t pert_seed = 0;
  pert->add_option("--manifest", pert_manifest, "dataset manifest")->required();
  pert->add_option("--level", pert_level, "perturbation level 0..4")->required();
  pert->add_option("--seed", pert_seed, "perturbation seed")->required();
  pert->add_option("--out", pert_out, "output directory")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "run a full experiment matrix");
  std::string bench_experiment, bench_out;
  std::uint64_t bench_seed = 0;
  bool bench_dry = false;
  bench->add_option("--experiment", bench_experiment,
                    "table1-phantom | fig3-noise")
      ->required();
  bench->add_option("--out", bench_out, "output directory")->required();
  bench->add_option("--seed", bench_seed, "experiment seed");
  bench->add_flag("--dry-run", bench_dry, "validate the config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  // flags that are part of the provenance fold into the config document
  std::vector<std::pair<std::string, std::string>> overrides;
  if (*cal) overrides.emplace_back("alpha", std::to_string(cal_alpha));
  if (*xlat) {
    overrides.emplace_back("mode", xlat_mode);
    overrides.emplace_back("seed", std::to_string(xlat_seed));
  }
  if (*eval && !eval_bins.empty()) overrides.emplace_back("eval.bins", eval_bins);

  ConfigHandle handle;
  if (const int rc = resolve_config(handle, config_path, overrides)) return rc;

  char* summary = nullptr;
  if (*gen) {
    const ctcal_status s = ctcal_cmd_phantom_gen(handle.cfg, gen_patients, gen_slices,
                                        gen_seed, gen_out.c_str(), &summary);
    return finish(s, &summary);
  }
  if (*seg) {
    const ctcal_status s = ctcal_cmd_segment(handle.cfg, seg_input.c_str(), seg_body.c_str(),
                                    seg_bone.c_str(),
                                    seg_truth.empty() ? nullptr : seg_truth.c_str(),
                                    &summary);
    return finish(s, &summary);
  }
  if (*xlat) {
    const ctcal_status s = ctcal_cmd_translate(handle.cfg, xlat_manifest.c_str(),
                                      xlat_fit.empty() ? nullptr : xlat_fit.c_str(),
                                      xlat_mode.c_str(), xlat_out.c_str(),
                                      xlat_samples, xlat_seed, &summary);
    return finish(s, &summary);
  }
  if (*cal) {
    const ctcal_status s = ctcal_cmd_calibrate(handle.cfg, cal_manifest.c_str(),
                                      cal_method.c_str(), cal_alpha,
                                      cal_out.c_str(), &summary);
    return finish(s, &summary);
  }
  if (*pred) {
    const ctcal_status s = ctcal_cmd_predict(handle.cfg, pred_calib.c_str(),
                                    pred_manifest.c_str(), pred_out.c_str(),
                                    pred_maps.empty() ? nullptr : pred_maps.c_str(),
                                    &summary);
    return finish(s, &summary);
  }
  if (*eval) {
    const ctcal_status s =
        ctcal_cmd_evaluate(handle.cfg, eval_manifest.c_str(), eval_calib.c_str(),
                           eval_calib_adj.empty() ? nullptr : eval_calib_adj.c_str(),
                           eval_out.c_str(), &summary);
    return finish(s, &summary);
  }
  if (*pert) {
    const ctcal_status s = ctcal_cmd_perturb(handle.cfg, pert_manifest.c_str(), pert_level,
                                    pert_seed, pert_out.c_str(), &summary);
    return finish(s, &summary);
  }
  if (*bench) {
    const ctcal_status s = ctcal_cmd_bench(handle.cfg, bench_experiment.c_str(),
                                  bench_out.c_str(), bench_seed, bench_dry ? 1 : 0,
                                  &summary);
    return finish(s, &summary);
  }
  return kExitUsage;
}
