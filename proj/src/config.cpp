#include "ctcal/config.hpp"

#include <json.hpp>

#include "ctcal/io.hpp"
#include "ctcal/sha256.hpp"

namespace ctcal {

namespace {

using nlohmann::json;

json to_json(const RunConfig& c) {
  json j;
  j["alpha"] = c.alpha;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["mode"] = translate_mode_name(c.mode);
  j["normalization"] = {{"hu_min", c.normalization.hu_min},
                        {"hu_max", c.normalization.hu_max}};
  j["body_seg"] = {{"threshold_hu", c.body_seg.threshold_hu},
                   {"min_component_frac", c.body_seg.min_component_frac},
                   {"closing_kernel", c.body_seg.closing_kernel.to_string()}};
  j["bone_seg"] = {{"high_hu", c.bone_seg.high_hu},
                   {"medium_hu", c.bone_seg.medium_hu},
                   {"low_hu", c.bone_seg.low_hu},
                   {"bridge_kernel", c.bone_seg.bridge_kernel.to_string()},
                   {"include_low_connected", c.bone_seg.include_low_connected},
                   {"min_component_px", c.bone_seg.min_component_px}};
  j["phantom"] = {{"height", c.phantom.height},
                  {"width", c.phantom.width},
                  {"body_axis_i", c.phantom.body_axis_i},
                  {"body_axis_j", c.phantom.body_axis_j},
                  {"body_axis_jitter", c.phantom.body_axis_jitter},
                  {"n_bone_rings", c.phantom.n_bone_rings},
                  {"bone_hu_range", {c.phantom.bone_hu_lo, c.phantom.bone_hu_hi}},
                  {"soft_hu_range", {c.phantom.soft_hu_lo, c.phantom.soft_hu_hi}},
                  {"n_air_pockets", c.phantom.n_air_pockets},
                  {"texture_scale_hu", c.phantom.texture_scale_hu}};
  j["degradation"] = {{"noise_sigma_hu", c.degradation.noise_sigma_hu},
                      {"cupping_amp_hu", c.degradation.cupping_amp_hu},
                      {"n_streaks", c.degradation.n_streaks},
                      {"streak_amp_hu", c.degradation.streak_amp_hu},
                      {"fov_radius_frac", c.degradation.fov_radius_frac},
                      {"misreg_max_px", c.degradation.misreg_max_px}};
  j["sampler"] = {{"k", c.sampler.k},
                  {"noise_sigma", c.sampler.noise_sigma},
                  {"correlation_len_px", c.sampler.correlation_len_px},
                  {"residual_gain", c.sampler.residual_gain}};
  j["translator"] = {{"lut_knots", c.lut_knots},
                     {"bone_blend", c.bone_blend},
                     {"lut_body_erode_px", c.lut_body_erode_px},
                     {"soft_smooth_px", c.soft_smooth_px},
                     {"air_repair_hu", c.air_repair_hu},
                     {"air_opening_px", c.air_opening_px}};
  j["crc"] = {{"b", c.crc_b},
              {"bound_quantiles", {c.crc_q_lo, c.crc_q_hi}},
              {"pixel_level_loss", c.crc_pixel_level_loss}};
  j["eval"] = {{"mask_policy",
                c.eval_mask_policy == EvalMaskPolicy::Body ? "body" : "full"},
               {"bins", c.bins},
               {"clip_interval_size", c.clip_interval_size},
               {"interval_size_hu", c.interval_size_hu}};
  return j;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  out = j.at(key).get<T>();
}

void read_range(const json& j, const char* key, float& lo, float& hi) {
  const auto arr = j.at(key);
  if (!arr.is_array() || arr.size() != 2)
    raise(ErrorCode::ConfigError, std::string(key) + " must be a [lo, hi] pair");
  lo = arr[0].get<float>();
  hi = arr[1].get<float>();
}

void from_json(const json& j, RunConfig& c) {
  try {
    read_field(j, "alpha", c.alpha);
    read_field(j, "seed", c.seed);
    read_field(j, "threads", c.threads);
    c.mode = parse_translate_mode(j.at("mode").get<std::string>());
    {
      const auto& n = j.at("normalization");
      read_field(n, "hu_min", c.normalization.hu_min);
      read_field(n, "hu_max", c.normalization.hu_max);
    }
    {
      const auto& b = j.at("body_seg");
      read_field(b, "threshold_hu", c.body_seg.threshold_hu);
      read_field(b, "min_component_frac", c.body_seg.min_component_frac);
      c.body_seg.closing_kernel =
          MorphKernel::parse(b.at("closing_kernel").get<std::string>());
    }
    {
      const auto& b = j.at("bone_seg");
      read_field(b, "high_hu", c.bone_seg.high_hu);
      read_field(b, "medium_hu", c.bone_seg.medium_hu);
      read_field(b, "low_hu", c.bone_seg.low_hu);
      c.bone_seg.bridge_kernel =
          MorphKernel::parse(b.at("bridge_kernel").get<std::string>());
      read_field(b, "include_low_connected", c.bone_seg.include_low_connected);
      read_field(b, "min_component_px", c.bone_seg.min_component_px);
    }
    {
      const auto& p = j.at("phantom");
      read_field(p, "height", c.phantom.height);
      read_field(p, "width", c.phantom.width);
      read_field(p, "body_axis_i", c.phantom.body_axis_i);
      read_field(p, "body_axis_j", c.phantom.body_axis_j);
      read_field(p, "body_axis_jitter", c.phantom.body_axis_jitter);
      read_field(p, "n_bone_rings", c.phantom.n_bone_rings);
      read_range(p, "bone_hu_range", c.phantom.bone_hu_lo, c.phantom.bone_hu_hi);
      read_range(p, "soft_hu_range", c.phantom.soft_hu_lo, c.phantom.soft_hu_hi);
      read_field(p, "n_air_pockets", c.phantom.n_air_pockets);
      read_field(p, "texture_scale_hu", c.phantom.texture_scale_hu);
    }
    {
      const auto& d = j.at("degradation");
      read_field(d, "noise_sigma_hu", c.degradation.noise_sigma_hu);
      read_field(d, "cupping_amp_hu", c.degradation.cupping_amp_hu);
      read_field(d, "n_streaks", c.degradation.n_streaks);
      read_field(d, "streak_amp_hu", c.degradation.streak_amp_hu);
      read_field(d, "fov_radius_frac", c.degradation.fov_radius_frac);
      read_field(d, "misreg_max_px", c.degradation.misreg_max_px);
    }
    {
      const auto& s = j.at("sampler");
      read_field(s, "k", c.sampler.k);
      read_field(s, "noise_sigma", c.sampler.noise_sigma);
      read_field(s, "correlation_len_px", c.sampler.correlation_len_px);
      read_field(s, "residual_gain", c.sampler.residual_gain);
    }
    {
      const auto& t = j.at("translator");
      read_field(t, "lut_knots", c.lut_knots);
      read_field(t, "bone_blend", c.bone_blend);
      read_field(t, "lut_body_erode_px", c.lut_body_erode_px);
      read_field(t, "soft_smooth_px", c.soft_smooth_px);
      read_field(t, "air_repair_hu", c.air_repair_hu);
      read_field(t, "air_opening_px", c.air_opening_px);
    }
    {
      const auto& r = j.at("crc");
      read_field(r, "b", c.crc_b);
      const auto q = r.at("bound_quantiles");
      if (!q.is_array() || q.size() != 2)
        raise(ErrorCode::ConfigError, "crc.bound_quantiles must be [lo, hi]");
      c.crc_q_lo = q[0].get<double>();
      c.crc_q_hi = q[1].get<double>();
      read_field(r, "pixel_level_loss", c.crc_pixel_level_loss);
    }
    {
      const auto& e = j.at("eval");
      const std::string policy = e.at("mask_policy").get<std::string>();
      if (policy == "body")
        c.eval_mask_policy = EvalMaskPolicy::Body;
      else if (policy == "full")
        c.eval_mask_policy = EvalMaskPolicy::Full;
      else
        raise(ErrorCode::ConfigError, "eval.mask_policy must be body or full");
      c.bins = e.at("bins").get<std::vector<float>>();
      read_field(e, "clip_interval_size", c.clip_interval_size);
      read_field(e, "interval_size_hu", c.interval_size_hu);
    }
  } catch (const json::exception& e) {
    raise(ErrorCode::ConfigError, std::string("bad config value: ") + e.what());
  }
}

// rejects keys that do not exist in the reference document
void check_known_keys(const json& reference, const json& user,
                      const std::string& prefix) {
  if (!user.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!reference.is_object() || !reference.contains(key))
      raise(ErrorCode::ConfigError, "unknown config key: " + path);
    if (value.is_object()) check_known_keys(reference.at(key), value, path);
  }
}

void merge_into(json& base, const json& overlay) {
  for (const auto& [key, value] : overlay.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object())
      merge_into(base[key], value);
    else
      base[key] = value;
  }
}

}  // namespace

void RunConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0))
    raise(ErrorCode::ConfigError, "alpha must be in (0, 1)");
  if (threads < 0) raise(ErrorCode::ConfigError, "threads must be >= 0");
  normalization.validate();
  body_seg.validate();
  bone_seg.validate();
  phantom.validate();
  degradation.validate();
  sampler.validate();
  translator().validate();
  if (!(crc_b >= 1.0)) raise(ErrorCode::ConfigError, "crc.b must be >= 1");
  if (!(crc_q_lo >= 0.0 && crc_q_lo < crc_q_hi && crc_q_hi <= 1.0))
    raise(ErrorCode::ConfigError, "crc.bound_quantiles must satisfy 0 <= lo < hi <= 1");
  stratification().validate();
}

TranslatorConfig RunConfig::translator() const {
  TranslatorConfig t;
  t.lut_knots = lut_knots;
  t.bone_blend = bone_blend;
  t.lut_body_erode_px = lut_body_erode_px;
  t.soft_smooth_px = soft_smooth_px;
  t.air_repair_hu = air_repair_hu;
  t.air_opening_px = air_opening_px;
  t.body_seg = body_seg;
  t.bone_seg = bone_seg;
  return t;
}

std::string RunConfig::canonical_json() const {
  // nlohmann::json objects are key-sorted, so dump() is canonical
  return to_json(*this).dump();
}

std::string RunConfig::digest_hex() const { return sha256_hex(canonical_json()); }

void RunConfig::apply_json_text(const std::string& text, const std::string& origin) {
  json overlay;
  try {
    overlay = json::parse(text);
  } catch (const json::exception& e) {
    raise(ErrorCode::ConfigError, origin + ": " + e.what());
  }
  if (!overlay.is_object())
    raise(ErrorCode::ConfigError, origin + ": config root must be an object");
  json base = to_json(*this);
  check_known_keys(base, overlay, "");
  merge_into(base, overlay);
  from_json(base, *this);
  validate();
}

void RunConfig::set_key(const std::string& dotted_key, const std::string& value) {
  json leaf;
  try {
    leaf = json::parse(value);
  } catch (const json::exception&) {
    leaf = value;  // plain strings (e.g. mode names) need no quoting
  }
  json overlay;
  json* node = &overlay;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot - start);
    if (part.empty()) raise(ErrorCode::ConfigError, "empty config key segment");
    if (dot == std::string::npos) {
      (*node)[part] = leaf;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
  apply_json_text(overlay.dump(), "flag " + dotted_key);
}

RunConfig RunConfig::load(const std::string& path) {
  RunConfig cfg;
  cfg.apply_json_text(read_file_bytes(path), path);
  return cfg;
}

}  // namespace ctcal
