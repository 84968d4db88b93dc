#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctcal/metrics.hpp"
#include "ctcal/rng.hpp"
#include "test_util.hpp"

using namespace ctcal;
using namespace ctcal::testutil;

namespace {

// naive double-loop references, kept deliberately independent of the
// implementation path they check

double oracle_masked_mae(const ImageGrid& a, const ImageGrid& b,
                         const BinaryMask& m) {
  double acc = 0.0;
  long n = 0;
  for (int i = 0; i < a.height(); ++i)
    for (int j = 0; j < a.width(); ++j)
      if (m.at(i, j)) {
        acc += std::fabs(double(a.at(i, j)) - double(b.at(i, j)));
        ++n;
      }
  return acc / n;
}

BinaryMask oracle_soft_mask(const BinaryMask& body, const BinaryMask& bhat,
                            const BinaryMask& bone, const BinaryMask& bonehat) {
  BinaryMask out(body.height(), body.width());
  for (int i = 0; i < body.height(); ++i)
    for (int j = 0; j < body.width(); ++j) {
      const bool in = body.at(i, j) && bhat.at(i, j);
      const bool excl = bone.at(i, j) || bonehat.at(i, j);
      out.at(i, j) = in && !excl ? 1 : 0;
    }
  return out;
}

double oracle_dice(const BinaryMask& p, const BinaryMask& q) {
  long inter = 0, total = 0;
  for (int i = 0; i < p.height(); ++i)
    for (int j = 0; j < p.width(); ++j) {
      if (p.at(i, j) && q.at(i, j)) ++inter;
      total += p.at(i, j) + q.at(i, j);
    }
  if (total == 0) return 1.0;
  return 2.0 * inter / double(total);
}

double oracle_coverage(const IntervalField& iv, const ImageGrid& ct,
                       const BinaryMask& m) {
  long covered = 0, n = 0;
  for (int i = 0; i < ct.height(); ++i)
    for (int j = 0; j < ct.width(); ++j)
      if (m.at(i, j)) {
        ++n;
        if (iv.lower.at(i, j) <= ct.at(i, j) && ct.at(i, j) <= iv.upper.at(i, j))
          ++covered;
      }
  return double(covered) / n;
}

IntervalField random_intervals(int h, int w, std::uint64_t seed) {
  ImageGrid lo = random_grid(h, w, Units::Normalized, seed, -1.0f, 0.5f);
  ImageGrid hi = lo;
  Rng rng(seed ^ 0xabcdef);
  for (auto& v : hi.values())
    v = std::min(1.0f, v + float(rng.uniform(0.0, 0.8)));
  return {std::move(lo), std::move(hi)};
}

}  // namespace

TEST_CASE("masked MAE pinned examples") {
  const NormalizationSpec spec{-1000.0f, 2000.0f};
  const ImageGrid ct = grid_from(1, 2, Units::Normalized, {0.0f, 0.1f});
  const ImageGrid same = ct;
  CHECK(masked_mae(same, ct, full_mask(1, 2), spec) == doctest::Approx(0.0));

  const ImageGrid sct = grid_from(1, 2, Units::Normalized, {0.01f, 0.13f});
  // mean normalized diff 0.02 over a 1500 HU half-range
  CHECK(masked_mae(sct, ct, full_mask(1, 2), spec) == doctest::Approx(30.0));
}

TEST_CASE("masked MAE requires a nonempty mask and matched shapes") {
  const ImageGrid g(2, 2, Units::HU);
  CHECK_THROWS_AS((void)masked_mae(g, g, BinaryMask(2, 2)), Error);
  const ImageGrid other(2, 3, Units::HU);
  CHECK_THROWS_AS((void)masked_mae(g, other, full_mask(2, 2)), Error);
}

TEST_CASE("masked MAE equals the double-loop oracle") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const ImageGrid a = random_grid(8, 8, Units::HU, seed, -500.0f, 500.0f);
    const ImageGrid b = random_grid(8, 8, Units::HU, seed + 1000, -500.0f, 500.0f);
    const BinaryMask m = random_mask(8, 8, seed + 2000, 0.6);
    if (m.count() == 0) continue;
    CHECK(masked_mae(a, b, m) ==
          doctest::Approx(oracle_masked_mae(a, b, m)).epsilon(1e-6));
  }
}

TEST_CASE("soft mask pinned examples") {
  const BinaryMask body = mask_from(2, 2, {1, 1, 1, 0});
  const BinaryMask bhat = mask_from(2, 2, {1, 0, 1, 1});
  const BinaryMask none(2, 2);
  // no bone anywhere: intersection of the body masks
  CHECK(soft_mask(body, bhat, none, none) == mask_from(2, 2, {1, 0, 1, 0}));
  // empty predicted body: empty soft mask
  CHECK(soft_mask(body, none, none, none).count() == 0);
}

TEST_CASE("soft mask equals the set-formula oracle") {
  for (std::uint64_t seed = 0; seed < 80; ++seed) {
    const BinaryMask body = random_mask(8, 8, seed, 0.7);
    const BinaryMask bhat = random_mask(8, 8, seed + 1, 0.7);
    const BinaryMask bone = random_mask(8, 8, seed + 2, 0.2);
    const BinaryMask bonehat = random_mask(8, 8, seed + 3, 0.2);
    CHECK(soft_mask(body, bhat, bone, bonehat) ==
          oracle_soft_mask(body, bhat, bone, bonehat));
  }
}

TEST_CASE("soft MAE pinned behavior") {
  const NormalizationSpec spec{-1000.0f, 2000.0f};
  const BinaryMask body = full_mask(2, 2);
  const BinaryMask none(2, 2);
  const ImageGrid ct(2, 2, Units::Normalized, 0.0f);
  const ImageGrid sct =
      grid_from(2, 2, Units::Normalized, {0.1f, 0.1f, 0.3f, 0.3f});
  // uniform weights over four soft pixels
  CHECK(soft_mae(sct, ct, body, body, none, none, spec) ==
        doctest::Approx(0.2 * 1500.0));

  // errors placed only on bone pixels do not move the metric
  BinaryMask bone(2, 2);
  bone.at(0, 0) = 1;
  ImageGrid sct2 = sct;
  sct2.at(0, 0) = 0.9f;
  const double with_err = soft_mae(sct2, ct, body, body, bone, none, spec);
  const double without = soft_mae(sct, ct, body, body, bone, none, spec);
  CHECK(with_err == doctest::Approx(without));
}

TEST_CASE("empty soft mask is a typed error") {
  const ImageGrid ct(2, 2, Units::Normalized, 0.0f);
  const BinaryMask none(2, 2);
  try {
    (void)soft_mae(ct, ct, none, none, none, none, NormalizationSpec{});
    FAIL("expected EmptySoftMask");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptySoftMask);
  }
}

TEST_CASE("dice pinned examples and conventions") {
  const BinaryMask a = mask_from(2, 3, {1, 1, 1, 0, 0, 0});
  CHECK(dice(a, a) == doctest::Approx(1.0));
  const BinaryMask b = mask_from(2, 3, {0, 0, 0, 1, 1, 1});
  CHECK(dice(a, b) == doctest::Approx(0.0));
  const BinaryMask c = mask_from(2, 3, {1, 1, 0, 1, 0, 0});
  CHECK(dice(a, c) == doctest::Approx(4.0 / 6.0));
  // both-empty convention
  const BinaryMask none(2, 3);
  CHECK(dice(none, none) == 1.0);
}

TEST_CASE("dice is symmetric, bounded, and matches the oracle") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const BinaryMask p = random_mask(8, 8, seed, 0.4);
    const BinaryMask q = random_mask(8, 8, seed + 500, 0.4);
    const double d = dice(p, q);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d == doctest::Approx(dice(q, p)));
    CHECK(d == doctest::Approx(oracle_dice(p, q)).epsilon(1e-9));
    if (d == doctest::Approx(1.0)) CHECK(p == q);
  }
}

TEST_CASE("marginal coverage pinned examples") {
  const ImageGrid ct = grid_from(2, 2, Units::Normalized, {0.0f, 0.4f, 0.6f, -0.7f});
  ImageGrid lo(2, 2, Units::Normalized, -0.5f);
  ImageGrid hi(2, 2, Units::Normalized, 0.5f);
  CHECK(marginal_coverage({lo, hi}, ct, full_mask(2, 2)) == doctest::Approx(0.5));

  // full-range intervals always cover
  ImageGrid l1(2, 2, Units::Normalized, -1.0f);
  ImageGrid u1(2, 2, Units::Normalized, 1.0f);
  CHECK(marginal_coverage({l1, u1}, ct, full_mask(2, 2)) == 1.0);

  // closed-interval convention: degenerate intervals at the truth cover
  CHECK(marginal_coverage({ct, ct}, ct, full_mask(2, 2)) == 1.0);
}

TEST_CASE("marginal coverage equals the oracle") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const ImageGrid ct = random_grid(8, 8, Units::Normalized, seed);
    const IntervalField iv = random_intervals(8, 8, seed + 100);
    const BinaryMask m = random_mask(8, 8, seed + 200, 0.7);
    if (m.count() == 0) continue;
    CHECK(marginal_coverage(iv, ct, m) ==
          doctest::Approx(oracle_coverage(iv, ct, m)).epsilon(1e-9));
  }
}

TEST_CASE("stratified coverage error pinned examples") {
  // two groups split at 0; coverages 0.8 and 1.0 under alpha 0.1
  StratificationBins bins{{0.0f}};
  ImageGrid ct(1, 10, Units::Normalized);
  ImageGrid lo(1, 10, Units::Normalized);
  ImageGrid hi(1, 10, Units::Normalized);
  for (int j = 0; j < 5; ++j) {  // group 0: values below zero
    ct.at(0, j) = -0.5f;
    lo.at(0, j) = j < 4 ? -0.6f : 0.2f;  // one miss
    hi.at(0, j) = j < 4 ? -0.4f : 0.4f;
  }
  // adjust to coverage 0.8 in group 0: one miss in five
  lo.at(0, 4) = 0.2f;
  for (int j = 5; j < 10; ++j) {  // group 1 fully covered
    ct.at(0, j) = 0.5f;
    lo.at(0, j) = 0.4f;
    hi.at(0, j) = 0.6f;
  }
  const double err =
      stratified_coverage_error({lo, hi}, ct, full_mask(1, 10), bins, 0.1);
  CHECK(err == doctest::Approx((std::abs(0.9 - 0.8) + std::abs(0.9 - 1.0)) / 2.0));
}

TEST_CASE("stratified coverage skips empty groups") {
  StratificationBins bins{{-0.5f, 0.5f}};  // three groups
  const ImageGrid ct(2, 2, Units::Normalized, 0.0f);  // only the middle group
  const IntervalField iv{ImageGrid(2, 2, Units::Normalized, -0.1f),
                         ImageGrid(2, 2, Units::Normalized, 0.1f)};
  std::vector<double> per_group;
  const double err =
      stratified_coverage_error(iv, ct, full_mask(2, 2), bins, 0.1, &per_group);
  CHECK(err == doctest::Approx(0.1));  // |0.9 - 1.0| over one nonempty group
  REQUIRE(per_group.size() == 3);
  CHECK(std::isnan(per_group[0]));
  CHECK(per_group[1] == doctest::Approx(1.0));
  CHECK(std::isnan(per_group[2]));
}

TEST_CASE("stratified coverage equals a direct group-wise computation") {
  StratificationBins bins{{-0.4f, 0.1f, 0.6f}};
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const ImageGrid ct = random_grid(8, 8, Units::Normalized, seed);
    const IntervalField iv = random_intervals(8, 8, seed + 10);
    const BinaryMask m = random_mask(8, 8, seed + 20, 0.8);
    if (m.count() == 0) continue;
    const double alpha = 0.1;

    double expect = 0.0;
    int nonempty = 0;
    for (std::size_t g = 0; g < bins.group_count(); ++g) {
      long n = 0, cov = 0;
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
          if (!m.at(i, j)) continue;
          if (bins.group_of(ct.at(i, j)) != g) continue;
          ++n;
          if (iv.lower.at(i, j) <= ct.at(i, j) && ct.at(i, j) <= iv.upper.at(i, j))
            ++cov;
        }
      if (n == 0) continue;
      expect += std::abs((1.0 - alpha) - double(cov) / n);
      ++nonempty;
    }
    expect /= nonempty;
    CHECK(stratified_coverage_error(iv, ct, m, bins, alpha) ==
          doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("mean interval size pinned examples") {
  ImageGrid lo(2, 2, Units::Normalized, -0.2f);
  ImageGrid hi(2, 2, Units::Normalized, 0.3f);
  CHECK(mean_interval_size({lo, hi}, full_mask(2, 2)) == doctest::Approx(0.5));
  CHECK(mean_interval_size({lo, lo}, full_mask(2, 2)) == doctest::Approx(0.0));
  // optional HU reporting
  const NormalizationSpec spec{-1000.0f, 2000.0f};
  CHECK(mean_interval_size({lo, hi}, full_mask(2, 2), spec) ==
        doctest::Approx(750.0));
}

TEST_CASE("uncertainty map is log1p of the size") {
  ImageGrid lo(1, 3, Units::Normalized, 0.0f);
  ImageGrid hi = grid_from(1, 3, Units::Normalized,
                           {0.0f, float(std::exp(1.0) - 1.0), 0.9f});
  const ImageGrid map = uncertainty_map({lo, hi}, Units::Normalized);
  CHECK(map.at(0, 0) == doctest::Approx(0.0));
  CHECK(map.at(0, 1) == doctest::Approx(1.0));
  // monotone in the interval size
  CHECK(map.at(0, 2) > map.at(0, 0));
  CHECK(map.at(0, 1) > map.at(0, 2));
}

TEST_CASE("metrics CSV column order is stable") {
  CHECK(metrics_csv_header() ==
        "patient_id,slice_index,mae_hu,soft_mae_hu,dice_body,dice_bone,"
        "mcov_base,mcov_adj,pcov_base,pcov_adj,size_base,size_adj");
  MetricsReport r;
  r.patient_id = "p000";
  r.slice_index = 3;
  r.mae_hu = 12.5;
  r.dice_body = 0.5;
  r.dice_bone = 0.25;
  r.marginal_coverage = 0.9;
  const std::string row = metrics_csv_row(r);
  CHECK(row == "p000,3,12.5,,0.5,0.25,0.9,,,,,");
}

TEST_CASE("aggregate averages the present fields") {
  MetricsReport a, b;
  a.mae_hu = 10.0;
  b.mae_hu = 20.0;
  a.soft_mae_hu = 4.0;  // only one row carries the optional metric
  a.dice_body = b.dice_body = 1.0;
  const MetricsReport agg = aggregate_reports({a, b});
  CHECK(agg.mae_hu == doctest::Approx(15.0));
  CHECK(agg.soft_mae_hu.value() == doctest::Approx(4.0));
  CHECK(agg.patient_id == "aggregate");
}
