#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <filesystem>

#include "ctcal/io.hpp"
#include "ctcal/pipeline.hpp"
#include "test_util.hpp"

using namespace ctcal;
using namespace ctcal::testutil;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

RunConfig small_config() {
  RunConfig cfg;
  cfg.phantom.height = 64;
  cfg.phantom.width = 64;
  cfg.phantom.n_bone_rings = 1;
  cfg.phantom.n_air_pockets = 1;
  return cfg;
}

json run(const pipeline::CommandResult& r) { return json::parse(r.summary_json); }

}  // namespace

TEST_CASE("phantom gen writes volumes, truth masks, and a manifest") {
  TempDir dir("pipe_gen");
  const RunConfig cfg = small_config();
  const json summary = run(pipeline::phantom_gen(cfg, 2, 2, 7, dir.file("data")));
  CHECK(summary["records"] == 16);  // 4 files per slice

  const DatasetManifest m = read_manifest(dir.file("data/manifest.csv"));
  CHECK(m.patient_count() == 2);
  const ImageGrid ct = read_volume(dir.file("data/p000_s000_ct.ctvol"));
  CHECK(ct.height() == 64);
  const BinaryMask body = read_mask_volume(dir.file("data/p000_s000_mask_body.ctvol"));
  CHECK(body.count() > 0);
}

TEST_CASE("phantom gen replays byte-identically") {
  TempDir dir("pipe_gen_replay");
  const RunConfig cfg = small_config();
  pipeline::phantom_gen(cfg, 1, 2, 42, dir.file("a"));
  pipeline::phantom_gen(cfg, 1, 2, 42, dir.file("b"));
  for (const auto& entry : fs::directory_iterator(dir.file("a"))) {
    const std::string name = entry.path().filename().string();
    CHECK(read_file_bytes(dir.file("a/" + name)) ==
          read_file_bytes(dir.file("b/" + name)));
  }
}

TEST_CASE("translate then calibrate then predict then evaluate") {
  TempDir dir("pipe_e2e");
  RunConfig cfg = small_config();
  pipeline::phantom_gen(cfg, 12, 1, 3, dir.file("data"));

  const json xs = run(pipeline::translate_cmd(cfg, dir.file("data/manifest.csv"),
                                              std::nullopt, TranslateMode::CbctSeg,
                                              dir.file("xlat"), 4, 9));
  CHECK(xs["translated"] == 12);

  const json cs = run(pipeline::calibrate_cmd(cfg, dir.file("xlat/manifest.csv"),
                                              MethodId::PwScp, 0.1,
                                              dir.file("scp.ctcal")));
  CHECK(cs["n_c"] == 12);
  CHECK(cs["patients"] == 12);

  const json ps = run(pipeline::predict_cmd(cfg, dir.file("scp.ctcal"),
                                            dir.file("xlat/manifest.csv"),
                                            dir.file("pred"), dir.file("maps")));
  CHECK(ps["predicted"] == 12);
  CHECK(fs::exists(dir.file("pred/p000_s000_lower.ctvol")));
  CHECK(fs::exists(dir.file("pred/p000_s000_upper.ctvol")));
  CHECK(fs::exists(dir.file("maps/p000_s000_umap.pgm")));
  const ImageGrid lower = read_volume(dir.file("pred/p000_s000_lower.ctvol"));
  CHECK(lower.units() == Units::Normalized);

  const json es = run(pipeline::evaluate_cmd(cfg, dir.file("xlat/manifest.csv"),
                                             dir.file("scp.ctcal"), std::nullopt,
                                             dir.file("results.csv")));
  CHECK(es["slices"] == 12);
  CHECK(double(es["mcov_base"]) >= 0.0);
  CHECK(double(es["mcov_base"]) <= 1.0);

  // the CSV has one row per slice plus the trailing aggregate
  const std::string csv = read_file_bytes(dir.file("results.csv"));
  const auto rows = std::count(csv.begin(), csv.end(), '\n');
  CHECK(rows == 1 + 12 + 1);
  CHECK(csv.find("aggregate") != std::string::npos);
}

TEST_CASE("CRC path through calibrate and predict") {
  TempDir dir("pipe_crc");
  RunConfig cfg = small_config();
  cfg.alpha = 0.2;  // calibrate embeds the resolved alpha in the digest
  pipeline::phantom_gen(cfg, 12, 1, 5, dir.file("data"));
  pipeline::translate_cmd(cfg, dir.file("data/manifest.csv"), std::nullopt,
                          TranslateMode::Cbct, dir.file("xlat"), 8, 11);
  const json cs = run(pipeline::calibrate_cmd(cfg, dir.file("xlat/manifest.csv"),
                                              MethodId::PwCrc, 0.2,
                                              dir.file("crc.ctcal")));
  CHECK(double(cs["lambda_hat"]) >= 0.0);
  const json ps = run(pipeline::predict_cmd(cfg, dir.file("crc.ctcal"),
                                            dir.file("xlat/manifest.csv"),
                                            dir.file("pred"), std::nullopt));
  CHECK(ps["predicted"] == 12);
  const ImageGrid lo = read_volume(dir.file("pred/p003_s000_lower.ctvol"));
  const ImageGrid hi = read_volume(dir.file("pred/p003_s000_upper.ctvol"));
  for (std::size_t p = 0; p < lo.size(); ++p)
    CHECK(lo.values()[p] <= hi.values()[p]);
}

TEST_CASE("predict rejects a config digest mismatch") {
  TempDir dir("pipe_digest");
  RunConfig cfg = small_config();
  pipeline::phantom_gen(cfg, 10, 1, 5, dir.file("data"));
  pipeline::translate_cmd(cfg, dir.file("data/manifest.csv"), std::nullopt,
                          TranslateMode::Seg, dir.file("xlat"), 0, 1);
  pipeline::calibrate_cmd(cfg, dir.file("xlat/manifest.csv"), MethodId::PwScp, 0.1,
                          dir.file("cal.ctcal"));
  RunConfig other = cfg;
  other.alpha = 0.2;  // a different resolved config
  try {
    pipeline::predict_cmd(other, dir.file("cal.ctcal"), dir.file("xlat/manifest.csv"),
                          dir.file("pred"), std::nullopt);
    FAIL("expected DigestMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DigestMismatch);
  }
}

TEST_CASE("saturated calibration is a typed failure with a hint") {
  TempDir dir("pipe_sat");
  RunConfig cfg = small_config();
  pipeline::phantom_gen(cfg, 3, 1, 5, dir.file("data"));
  pipeline::translate_cmd(cfg, dir.file("data/manifest.csv"), std::nullopt,
                          TranslateMode::Seg, dir.file("xlat"), 0, 1);
  try {
    pipeline::calibrate_cmd(cfg, dir.file("xlat/manifest.csv"), MethodId::PwScp, 0.1,
                            dir.file("cal.ctcal"));
    FAIL("expected Saturated");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Saturated);
    CHECK(std::string(e.what()).find("9") != std::string::npos);
  }
  CHECK_FALSE(fs::exists(dir.file("cal.ctcal")));
}

TEST_CASE("perturb level 0 copies masks byte-identically") {
  TempDir dir("pipe_perturb");
  RunConfig cfg = small_config();
  pipeline::phantom_gen(cfg, 2, 1, 5, dir.file("data"));
  pipeline::perturb_cmd(cfg, dir.file("data/manifest.csv"), 0, 123, dir.file("l0"));
  CHECK(read_file_bytes(dir.file("l0/p000_s000_mask_body.ctvol")) ==
        read_file_bytes(dir.file("data/p000_s000_mask_body.ctvol")));

  pipeline::perturb_cmd(cfg, dir.file("data/manifest.csv"), 4, 123, dir.file("l4"));
  CHECK(read_file_bytes(dir.file("l4/p000_s000_mask_body.ctvol")) !=
        read_file_bytes(dir.file("data/p000_s000_mask_body.ctvol")));
  // the perturbed manifest still resolves: masks local, volumes referenced
  const DatasetManifest m = read_manifest(dir.file("l4/manifest.csv"));
  CHECK(m.records.size() == 8);

  try {
    pipeline::perturb_cmd(cfg, dir.file("data/manifest.csv"), 5, 1, dir.file("bad"));
    FAIL("expected InvalidArgument");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidArgument);
  }
}

TEST_CASE("seg translation works without any cbct files") {
  TempDir dir("pipe_seg_only");
  RunConfig cfg = small_config();
  pipeline::phantom_gen(cfg, 2, 1, 5, dir.file("data"));
  // strip the cbct rows and files
  DatasetManifest m = read_manifest(dir.file("data/manifest.csv"));
  DatasetManifest no_cbct;
  for (const auto& r : m.records) {
    if (r.role == Role::Cbct) {
      fs::remove(dir.file("data/" + r.path));
      continue;
    }
    no_cbct.add(r);
  }
  write_manifest(dir.file("data/manifest.csv"), no_cbct);
  const json xs = run(pipeline::translate_cmd(cfg, dir.file("data/manifest.csv"),
                                              std::nullopt, TranslateMode::Seg,
                                              dir.file("xlat"), 0, 1));
  CHECK(xs["translated"] == 2);
}

TEST_CASE("bench dry run validates without writing") {
  TempDir dir("pipe_dry");
  const RunConfig cfg = small_config();
  const json summary =
      run(pipeline::bench_cmd(cfg, "table1-phantom", dir.file("bench"), 1, true));
  CHECK(summary["dry_run"] == true);
  CHECK_FALSE(fs::exists(dir.file("bench/table1.csv")));
  CHECK_THROWS_AS(
      pipeline::bench_cmd(cfg, "unknown-exp", dir.file("bench"), 1, true), Error);
}
