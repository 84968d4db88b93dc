#include "ctcal/conformal.hpp"

#include <algorithm>
#include <cmath>

#include "ctcal/parallel.hpp"

namespace ctcal {

namespace {

// ceil with a small backoff so exact-integer products do not round one rank
// high under floating arithmetic (e.g. 0.9 * 110 evaluating above 99).
int robust_ceil(double x) {
  return static_cast<int>(std::ceil(x - 1e-9));
}

void check_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what) {
  if (!a.same_shape(b)) raise(ErrorCode::ShapeMismatch, what);
}

}  // namespace

void IntervalField::validate() const {
  if (!lower.same_shape(upper))
    raise(ErrorCode::ShapeMismatch, "interval bound shapes differ");
  if (lower.units() != upper.units())
    raise(ErrorCode::UnitMismatch, "interval bound units differ");
  for (std::size_t p = 0; p < lower.size(); ++p)
    if (lower.values()[p] > upper.values()[p])
      raise(ErrorCode::InvalidArgument, "interval with lower > upper");
}

ImageGrid conformity_scores(const ImageGrid& sct, const ImageGrid& ct) {
  check_same_shape(sct, ct, "score inputs have different shapes");
  if (sct.units() != ct.units())
    raise(ErrorCode::UnitMismatch, "score inputs have different units");
  ImageGrid out(sct.height(), sct.width(), Units::Score);
  for (std::size_t p = 0; p < out.size(); ++p)
    out.values()[p] = std::abs(sct.values()[p] - ct.values()[p]);
  return out;
}

ScpRank scp_rank(int n_c, double n_p, double alpha, bool adjusted) {
  if (n_c < 1) raise(ErrorCode::InvalidArgument, "n_c must be >= 1");
  if (!(alpha > 0.0 && alpha < 1.0))
    raise(ErrorCode::InvalidArgument, "alpha must be in (0, 1)");
  if (adjusted && !(n_p >= 1.0))
    raise(ErrorCode::InvalidArgument, "adjusted rank requires n_p >= 1");
  const double effective = adjusted ? (n_c + n_p) : (n_c + 1.0);
  ScpRank r;
  r.rank = std::max(1, robust_ceil((1.0 - alpha) * effective));
  r.saturated = r.rank > n_c;
  return r;
}

namespace {

ScpCalibration calibrate_stack(const std::vector<const float*>& stacks, int n_c,
                               int height, int width, const ScpOptions& opts) {
  if (n_c < 1) raise(ErrorCode::EmptyCalibration, "calibration set is empty");
  if (opts.patients < 1)
    raise(ErrorCode::InvalidArgument, "patient count must be >= 1");
  opts.norm.validate();

  ScpCalibration cal;
  cal.alpha = opts.alpha;
  cal.n_c = n_c;
  cal.patients = opts.patients;
  cal.n_p = static_cast<double>(n_c) / opts.patients;
  cal.adjusted = opts.adjusted;
  cal.eval_mask_policy = opts.eval_mask_policy;
  cal.norm = opts.norm;

  const ScpRank rank = scp_rank(n_c, cal.n_p, opts.alpha, opts.adjusted);
  cal.saturated = rank.saturated;
  if (rank.saturated) {
    cal.qhat = ImageGrid(height, width, Units::Score, kSaturatedScore);
    return cal;
  }

  cal.qhat = ImageGrid(height, width, Units::Score);
  const std::int64_t total = static_cast<std::int64_t>(height) * width;
  const std::int64_t chunk = std::max(1, opts.chunk_pixels);
  const std::int64_t n_chunks = (total + chunk - 1) / chunk;
  const std::size_t k = static_cast<std::size_t>(rank.rank);

  parallel_for(0, n_chunks, opts.threads, [&](std::int64_t c0, std::int64_t c1) {
    std::vector<float> buf(static_cast<std::size_t>(chunk) * n_c);
    for (std::int64_t c = c0; c < c1; ++c) {
      const std::int64_t p0 = c * chunk;
      const std::int64_t p1 = std::min(total, p0 + chunk);
      const std::int64_t npix = p1 - p0;
      // transpose this pixel-column chunk to slice-contiguous rows
      for (int s = 0; s < n_c; ++s) {
        const float* src = stacks[static_cast<std::size_t>(s)] + p0;
        for (std::int64_t p = 0; p < npix; ++p)
          buf[static_cast<std::size_t>(p) * n_c + s] = src[p];
      }
      for (std::int64_t p = 0; p < npix; ++p) {
        float* row = buf.data() + static_cast<std::size_t>(p) * n_c;
        std::nth_element(row, row + (k - 1), row + n_c);
        cal.qhat.values()[static_cast<std::size_t>(p0 + p)] = row[k - 1];
      }
    }
  });
  return cal;
}

}  // namespace

ScpCalibration calibrate_pw_scp(
    const std::vector<std::pair<const ImageGrid*, const ImageGrid*>>& cal,
    const ScpOptions& opts) {
  if (cal.empty()) raise(ErrorCode::EmptyCalibration, "calibration set is empty");
  std::vector<ImageGrid> scores;
  scores.reserve(cal.size());
  for (const auto& [sct, ct] : cal) {
    if (!sct || !ct) raise(ErrorCode::InvalidArgument, "null calibration grid");
    scores.push_back(conformity_scores(*sct, *ct));
    if (!scores.back().same_shape(scores.front()))
      raise(ErrorCode::ShapeMismatch, "calibration slices have different shapes");
  }
  std::vector<const float*> stacks;
  stacks.reserve(scores.size());
  for (const auto& s : scores) stacks.push_back(s.data());
  return calibrate_stack(stacks, static_cast<int>(scores.size()),
                         scores.front().height(), scores.front().width(), opts);
}

ScpCalibration calibrate_pw_scp_scores(const std::vector<const ImageGrid*>& scores,
                                       const ScpOptions& opts) {
  if (scores.empty()) raise(ErrorCode::EmptyCalibration, "calibration set is empty");
  std::vector<const float*> stacks;
  stacks.reserve(scores.size());
  for (const ImageGrid* s : scores) {
    if (!s) raise(ErrorCode::InvalidArgument, "null score grid");
    if (!s->same_shape(*scores.front()))
      raise(ErrorCode::ShapeMismatch, "score grids have different shapes");
    stacks.push_back(s->data());
  }
  return calibrate_stack(stacks, static_cast<int>(scores.size()),
                         scores.front()->height(), scores.front()->width(), opts);
}

ScpCalibration calibrate_pw_scp_stream(const std::function<ImageGrid(int)>& provider,
                                       int n_c, const ScpOptions& opts) {
  if (n_c < 1) raise(ErrorCode::EmptyCalibration, "calibration set is empty");
  std::vector<float> stack;
  int height = 0, width = 0;
  for (int s = 0; s < n_c; ++s) {
    ImageGrid g = provider(s);
    if (s == 0) {
      height = g.height();
      width = g.width();
      stack.resize(static_cast<std::size_t>(n_c) * g.size());
    } else if (g.height() != height || g.width() != width) {
      raise(ErrorCode::ShapeMismatch, "calibration slices have different shapes");
    }
    std::copy(g.values().begin(), g.values().end(),
              stack.begin() + static_cast<std::size_t>(s) * g.size());
  }
  std::vector<const float*> stacks(static_cast<std::size_t>(n_c));
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int s = 0; s < n_c; ++s) stacks[static_cast<std::size_t>(s)] = stack.data() + plane * s;
  return calibrate_stack(stacks, n_c, height, width, opts);
}

IntervalField predict_scp(const ImageGrid& sct, const ScpCalibration& calib) {
  check_same_shape(sct, calib.qhat, "sct shape differs from calibration");
  if (sct.units() != Units::Normalized)
    raise(ErrorCode::UnitMismatch, "predict_scp expects a normalized sct");
  IntervalField out;
  out.lower = ImageGrid(sct.height(), sct.width(), Units::Normalized);
  out.upper = ImageGrid(sct.height(), sct.width(), Units::Normalized);
  for (std::size_t p = 0; p < sct.size(); ++p) {
    const float q = calib.qhat.values()[p];
    out.lower.values()[p] = std::max(sct.values()[p] - q, -1.0f);
    out.upper.values()[p] = std::min(sct.values()[p] + q, 1.0f);
  }
  return out;
}

IntervalField heuristic_bounds(const std::vector<const ImageGrid*>& samples,
                               double q_lo, double q_hi) {
  if (samples.size() < 2)
    raise(ErrorCode::TooFewSamples, "heuristic bounds require K >= 2 samples");
  if (!(q_lo >= 0.0 && q_lo < q_hi && q_hi <= 1.0))
    raise(ErrorCode::InvalidArgument, "bound quantiles must satisfy 0 <= lo < hi <= 1");
  const ImageGrid& first = *samples.front();
  for (const ImageGrid* s : samples) {
    if (!s) raise(ErrorCode::InvalidArgument, "null sample grid");
    check_same_shape(*s, first, "sample shapes differ");
    if (s->units() != first.units())
      raise(ErrorCode::UnitMismatch, "sample units differ");
  }
  const std::size_t k = samples.size();
  // index ceil(q*K) with index 0 meaning the minimum
  auto rank_of = [&](double q) -> std::size_t {
    const auto r = static_cast<std::int64_t>(std::ceil(q * static_cast<double>(k) - 1e-9));
    return static_cast<std::size_t>(std::clamp<std::int64_t>(r, 1, static_cast<std::int64_t>(k)));
  };
  const std::size_t r_lo = rank_of(q_lo);
  const std::size_t r_hi = rank_of(q_hi);

  IntervalField out;
  out.lower = ImageGrid(first.height(), first.width(), first.units());
  out.upper = ImageGrid(first.height(), first.width(), first.units());
  std::vector<float> scratch(k);
  for (std::size_t p = 0; p < first.size(); ++p) {
    for (std::size_t s = 0; s < k; ++s) scratch[s] = samples[s]->values()[p];
    std::sort(scratch.begin(), scratch.end());
    out.lower.values()[p] = scratch[r_lo - 1];
    out.upper.values()[p] = scratch[r_hi - 1];
  }
  return out;
}

IntervalField heuristic_bounds(const std::vector<ImageGrid>& samples,
                               double q_lo, double q_hi) {
  std::vector<const ImageGrid*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& s : samples) ptrs.push_back(&s);
  return heuristic_bounds(ptrs, q_lo, q_hi);
}

double miscoverage_risk(const IntervalField& bounds, const ImageGrid& ct,
                        const BinaryMask& mask, double lambda) {
  check_same_shape(bounds.lower, ct, "bounds shape differs from ct");
  if (!mask.same_shape(ct))
    raise(ErrorCode::ShapeMismatch, "mask shape differs from ct");
  std::size_t in_mask = 0;
  std::size_t missed = 0;
  for (std::size_t p = 0; p < ct.size(); ++p) {
    if (!mask.bits()[p]) continue;
    ++in_mask;
    const double y = ct.values()[p];
    const double deficit = std::max(static_cast<double>(bounds.lower.values()[p]) - y,
                                    y - bounds.upper.values()[p]);
    if (deficit > lambda) ++missed;
  }
  if (in_mask == 0) raise(ErrorCode::EmptyMask, "miscoverage mask is empty");
  return static_cast<double>(missed) / static_cast<double>(in_mask);
}

CrcCalibration calibrate_pw_crc(const std::vector<CrcCalSlice>& cal,
                                const CrcOptions& opts) {
  if (cal.empty()) raise(ErrorCode::EmptyCalibration, "calibration set is empty");
  if (!(opts.alpha > 0.0 && opts.alpha < 1.0))
    raise(ErrorCode::InvalidArgument, "alpha must be in (0, 1)");
  if (!(opts.b >= 1.0))
    raise(ErrorCode::ConfigError, "risk bound B must be >= 1 for miscoverage loss");
  if (opts.patients < 1)
    raise(ErrorCode::InvalidArgument, "patient count must be >= 1");
  if (!(opts.q_lo >= 0.0 && opts.q_lo < opts.q_hi && opts.q_hi <= 1.0))
    raise(ErrorCode::InvalidArgument, "bound quantiles must satisfy 0 <= lo < hi <= 1");
  opts.norm.validate();

  const int n_c = static_cast<int>(cal.size());
  const double n_p = static_cast<double>(n_c) / opts.patients;

  // coefficients of the guarantee: c1 * R(lambda) + c2 <= alpha
  double c1, c2;
  if (opts.adjusted) {
    c1 = n_c / (n_c + n_p);
    c2 = opts.b * n_p / (n_c + n_p);  // equals B / (P + 1)
  } else {
    c1 = static_cast<double>(n_c) / (n_c + 1);
    c2 = opts.b / (n_c + 1);
  }
  if (c2 > opts.alpha + 1e-12) {
    // both variants bottom out at the same count: B/(n+1) <= alpha
    const int hint = robust_ceil(opts.b / opts.alpha - 1.0);
    raise(ErrorCode::Infeasible,
          std::string("risk bound exceeds alpha even at zero empirical risk; ") +
              (opts.adjusted ? "need at least " + std::to_string(hint) + " patients"
                             : "need n_c >= " + std::to_string(hint)));
  }

  // collect positive deficits with per-image weights 1 / (n_c * |mask|)
  struct Candidate {
    double deficit;
    double weight;
  };
  std::vector<Candidate> cands;
  std::size_t total_mask_px = 0;
  for (const auto& slice : cal) {
    if (!slice.bounds || !slice.ct || !slice.mask)
      raise(ErrorCode::InvalidArgument, "null CRC calibration slice");
    check_same_shape(slice.bounds->lower, *slice.ct, "bounds shape differs from ct");
    if (!slice.mask->same_shape(*slice.ct))
      raise(ErrorCode::ShapeMismatch, "mask shape differs from ct");
    const std::size_t m = slice.mask->count();
    if (m == 0) raise(ErrorCode::EmptyMask, "CRC calibration mask is empty");
    total_mask_px += m;
  }
  for (const auto& slice : cal) {
    const std::size_t m = slice.mask->count();
    const double weight =
        opts.pixel_level_loss
            ? 1.0 / static_cast<double>(total_mask_px)
            : 1.0 / (static_cast<double>(n_c) * static_cast<double>(m));
    for (std::size_t p = 0; p < slice.ct->size(); ++p) {
      if (!slice.mask->bits()[p]) continue;
      const double y = slice.ct->values()[p];
      const double deficit =
          std::max(static_cast<double>(slice.bounds->lower.values()[p]) - y,
                   y - slice.bounds->upper.values()[p]);
      if (deficit > 0.0) cands.push_back({deficit, weight});
    }
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return a.deficit != b.deficit ? a.deficit < b.deficit : a.weight < b.weight;
  });

  double risk = 0.0;  // R(0): every stored deficit is a miss at lambda = 0
  for (const auto& c : cands) risk += c.weight;

  CrcCalibration out;
  out.alpha = opts.alpha;
  out.b = opts.b;
  out.n_c = n_c;
  out.n_p = n_p;
  out.patients = opts.patients;
  out.adjusted = opts.adjusted;
  out.q_lo = opts.q_lo;
  out.q_hi = opts.q_hi;
  out.eval_mask_policy = opts.eval_mask_policy;
  out.norm = opts.norm;

  auto satisfied = [&](double r) { return c1 * r + c2 <= opts.alpha + 1e-12; };
  if (satisfied(risk)) {
    out.lambda_hat = 0.0;
    return out;
  }
  std::size_t i = 0;
  while (i < cands.size()) {
    const double lambda = cands[i].deficit;
    // pixels with deficit == lambda become covered exactly at lambda
    while (i < cands.size() && cands[i].deficit == lambda) {
      risk -= cands[i].weight;
      ++i;
    }
    if (satisfied(std::max(risk, 0.0))) {
      out.lambda_hat = lambda;
      return out;
    }
  }
  // feasibility guarantees the scan terminates inside the loop
  out.lambda_hat = cands.empty() ? 0.0 : cands.back().deficit;
  return out;
}

IntervalField predict_crc(const IntervalField& bounds, const CrcCalibration& calib) {
  bounds.validate();
  if (bounds.lower.units() != Units::Normalized)
    raise(ErrorCode::UnitMismatch, "predict_crc expects normalized bounds");
  const float lam = static_cast<float>(calib.lambda_hat);
  IntervalField out;
  out.lower = ImageGrid(bounds.lower.height(), bounds.lower.width(), Units::Normalized);
  out.upper = ImageGrid(bounds.lower.height(), bounds.lower.width(), Units::Normalized);
  for (std::size_t p = 0; p < out.lower.size(); ++p) {
    out.lower.values()[p] = std::max(bounds.lower.values()[p] - lam, -1.0f);
    out.upper.values()[p] = std::min(bounds.upper.values()[p] + lam, 1.0f);
  }
  return out;
}

}  // namespace ctcal
