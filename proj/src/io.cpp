#include "ctcal/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ctcal/sha256.hpp"

namespace ctcal {

namespace {

constexpr char kVolMagic[8] = {'C', 'T', 'V', 'O', 'L', '0', '0', '1'};
constexpr char kCalMagic[8] = {'C', 'T', 'C', 'A', 'L', '0', '0', '1'};
constexpr std::uint32_t kVolVersion = 1;
constexpr int kMaxDim = 1 << 16;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  put_u32(out, std::bit_cast<std::uint32_t>(v));
}

void put_f64(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

// sequential reader over an in-memory file image
struct Cursor {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > bytes.size())
      raise(ErrorCode::TruncatedPayload, std::string("file ends inside ") + what);
  }
  void read_raw(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  }
  std::uint8_t u8(const char* what) {
    std::uint8_t v;
    read_raw(&v, 1, what);
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes[pos + static_cast<std::size_t>(i)]);
    pos += 8;
    return std::bit_cast<double>(v);
  }
  void expect_end() const {
    if (pos != bytes.size())
      raise(ErrorCode::FormatError, "trailing bytes after payload");
  }
};

void check_dims(std::uint32_t h, std::uint32_t w) {
  if (h < 1 || w < 1 || h > kMaxDim || w > kMaxDim)
    raise(ErrorCode::FormatError, "implausible volume dimensions");
}

std::string volume_bytes(int height, int width, std::uint8_t units,
                         const float* values) {
  std::string out;
  const std::size_t n = static_cast<std::size_t>(height) * width;
  out.reserve(24 + n * 4);
  out.append(kVolMagic, sizeof(kVolMagic));
  put_u32(out, kVolVersion);
  put_u32(out, static_cast<std::uint32_t>(height));
  put_u32(out, static_cast<std::uint32_t>(width));
  out.push_back(static_cast<char>(units));
  out.append(3, '\0');
  for (std::size_t i = 0; i < n; ++i) put_f32(out, values[i]);
  return out;
}

struct VolumePayload {
  int height = 0;
  int width = 0;
  std::uint8_t units = 0;
  std::vector<float> values;
};

VolumePayload parse_volume(const std::string& bytes, const std::string& path) {
  Cursor c{bytes};
  char magic[8];
  c.read_raw(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kVolMagic, sizeof(magic)) != 0)
    raise(ErrorCode::BadMagic, "not a CTVOL001 file: " + path);
  const std::uint32_t version = c.u32("version");
  if (version != kVolVersion)
    raise(ErrorCode::FormatError, "unsupported volume version");
  VolumePayload v;
  const std::uint32_t h = c.u32("height");
  const std::uint32_t w = c.u32("width");
  check_dims(h, w);
  v.height = static_cast<int>(h);
  v.width = static_cast<int>(w);
  v.units = c.u8("units");
  if (v.units > 2) raise(ErrorCode::BadUnits, "unknown units tag");
  for (int i = 0; i < 3; ++i) {
    if (c.u8("reserved") != 0)
      raise(ErrorCode::FormatError, "reserved header bytes must be zero");
  }
  const std::size_t n = static_cast<std::size_t>(v.height) * v.width;
  v.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.values[i] = c.f32("payload");
  c.expect_end();
  return v;
}

}  // namespace

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::IoFailure, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) raise(ErrorCode::IoFailure, "read failed: " + path);
  return std::move(ss).str();
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::IoFailure, "cannot create " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) raise(ErrorCode::IoFailure, "write failed: " + path);
}

void write_volume(const std::string& path, const ImageGrid& grid) {
  std::uint8_t units;
  switch (grid.units()) {
    case Units::Normalized: units = 0; break;
    case Units::HU: units = 1; break;
    default:
      raise(ErrorCode::BadUnits, "score grids are not serializable as volumes");
  }
  write_file_bytes(path, volume_bytes(grid.height(), grid.width(), units, grid.data()));
}

void write_volume(const std::string& path, const BinaryMask& mask) {
  std::vector<float> values(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    values[i] = mask.bits()[i] ? 1.0f : 0.0f;
  write_file_bytes(path, volume_bytes(mask.height(), mask.width(), 2, values.data()));
}

ImageGrid read_volume(const std::string& path) {
  VolumePayload v = parse_volume(read_file_bytes(path), path);
  if (v.units == 2)
    raise(ErrorCode::BadUnits, "expected an image volume, found a mask: " + path);
  ImageGrid grid = ImageGrid::from_values(
      v.height, v.width, v.units == 0 ? Units::Normalized : Units::HU,
      std::move(v.values));
  grid.validate();
  return grid;
}

BinaryMask read_mask_volume(const std::string& path) {
  VolumePayload v = parse_volume(read_file_bytes(path), path);
  if (v.units != 2)
    raise(ErrorCode::BadUnits, "expected a mask volume: " + path);
  BinaryMask mask(v.height, v.width);
  for (std::size_t i = 0; i < v.values.size(); ++i) {
    if (v.values[i] == 0.0f)
      mask.bits()[i] = 0;
    else if (v.values[i] == 1.0f)
      mask.bits()[i] = 1;
    else
      raise(ErrorCode::FormatError, "mask payload value not 0/1: " + path);
  }
  return mask;
}

// -- calibration container ----------------------------------------------

const char* method_name(MethodId id) {
  switch (id) {
    case MethodId::PwScp: return "pw-scp";
    case MethodId::PwScpAdj: return "pw-scp-adj";
    case MethodId::PwCrc: return "pw-crc";
    case MethodId::PwCrcAdj: return "pw-crc-adj";
  }
  return "pw-scp";
}

MethodId parse_method(const std::string& text) {
  if (text == "pw-scp") return MethodId::PwScp;
  if (text == "pw-scp-adj") return MethodId::PwScpAdj;
  if (text == "pw-crc") return MethodId::PwCrc;
  if (text == "pw-crc-adj") return MethodId::PwCrcAdj;
  raise(ErrorCode::InvalidArgument, "unknown method: " + text);
}

namespace {

std::string calibration_prologue(MethodId method, double alpha, int n_c,
                                 int patients, double n_p,
                                 EvalMaskPolicy policy,
                                 const NormalizationSpec& norm,
                                 const std::string& config_json) {
  std::string out;
  out.append(kCalMagic, sizeof(kCalMagic));
  out.push_back(static_cast<char>(method));
  out.push_back(static_cast<char>(policy));
  out.append(2, '\0');
  put_f64(out, alpha);
  put_u32(out, static_cast<std::uint32_t>(n_c));
  put_u32(out, static_cast<std::uint32_t>(patients));
  put_f64(out, n_p);
  put_f32(out, norm.hu_min);
  put_f32(out, norm.hu_max);
  put_u32(out, static_cast<std::uint32_t>(config_json.size()));
  out += config_json;
  const auto digest = sha256(config_json);
  out.append(reinterpret_cast<const char*>(digest.data()), digest.size());
  return out;
}

struct CalPrologue {
  MethodId method;
  EvalMaskPolicy policy;
  double alpha;
  int n_c;
  int patients;
  double n_p;
  NormalizationSpec norm;
  std::string config_json;
};

CalPrologue parse_prologue(Cursor& c, const std::string& path) {
  char magic[8];
  c.read_raw(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCalMagic, sizeof(magic)) != 0)
    raise(ErrorCode::BadMagic, "not a CTCAL001 file: " + path);
  CalPrologue p;
  const std::uint8_t method = c.u8("method");
  if (method < 1 || method > 4)
    raise(ErrorCode::FormatError, "unknown calibration method id");
  p.method = static_cast<MethodId>(method);
  const std::uint8_t policy = c.u8("mask policy");
  if (policy > 1) raise(ErrorCode::FormatError, "unknown mask policy");
  p.policy = static_cast<EvalMaskPolicy>(policy);
  for (int i = 0; i < 2; ++i)
    if (c.u8("reserved") != 0)
      raise(ErrorCode::FormatError, "reserved header bytes must be zero");
  p.alpha = c.f64("alpha");
  if (!(p.alpha > 0.0 && p.alpha < 1.0))
    raise(ErrorCode::FormatError, "alpha outside (0, 1)");
  p.n_c = static_cast<int>(c.u32("n_c"));
  p.patients = static_cast<int>(c.u32("patients"));
  if (p.n_c < 1 || p.patients < 1)
    raise(ErrorCode::FormatError, "calibration counts must be >= 1");
  p.n_p = c.f64("n_p");
  p.norm.hu_min = c.f32("hu_min");
  p.norm.hu_max = c.f32("hu_max");
  if (!(p.norm.hu_min < p.norm.hu_max))
    raise(ErrorCode::FormatError, "bad normalization window");
  const std::uint32_t config_len = c.u32("config length");
  if (config_len > (1u << 24))
    raise(ErrorCode::FormatError, "implausible config length");
  p.config_json.resize(config_len);
  if (config_len > 0) c.read_raw(p.config_json.data(), config_len, "config document");
  std::uint8_t digest[32];
  c.read_raw(digest, sizeof(digest), "config digest");
  const auto expect = sha256(p.config_json);
  if (std::memcmp(digest, expect.data(), sizeof(digest)) != 0)
    raise(ErrorCode::DigestMismatch, "config digest mismatch: " + path);
  return p;
}

}  // namespace

void write_scp_calibration(const std::string& path, const ScpCalibration& cal) {
  const MethodId method = cal.adjusted ? MethodId::PwScpAdj : MethodId::PwScp;
  std::string out =
      calibration_prologue(method, cal.alpha, cal.n_c, cal.patients, cal.n_p,
                           cal.eval_mask_policy, cal.norm, cal.config_json);
  out.push_back(cal.saturated ? 1 : 0);
  out.append(3, '\0');
  put_u32(out, static_cast<std::uint32_t>(cal.qhat.height()));
  put_u32(out, static_cast<std::uint32_t>(cal.qhat.width()));
  for (float v : cal.qhat.values()) put_f32(out, v);
  write_file_bytes(path, out);
}

void write_crc_calibration(const std::string& path, const CrcCalibration& cal) {
  const MethodId method = cal.adjusted ? MethodId::PwCrcAdj : MethodId::PwCrc;
  std::string out =
      calibration_prologue(method, cal.alpha, cal.n_c, cal.patients, cal.n_p,
                           cal.eval_mask_policy, cal.norm, cal.config_json);
  put_f64(out, cal.lambda_hat);
  put_f64(out, cal.b);
  put_f64(out, cal.q_lo);
  put_f64(out, cal.q_hi);
  write_file_bytes(path, out);
}

MethodId peek_calibration_method(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  Cursor c{bytes};
  char magic[8];
  c.read_raw(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCalMagic, sizeof(magic)) != 0)
    raise(ErrorCode::BadMagic, "not a CTCAL001 file: " + path);
  const std::uint8_t method = c.u8("method");
  if (method < 1 || method > 4)
    raise(ErrorCode::FormatError, "unknown calibration method id");
  return static_cast<MethodId>(method);
}

ScpCalibration read_scp_calibration(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  Cursor c{bytes};
  CalPrologue p = parse_prologue(c, path);
  if (p.method != MethodId::PwScp && p.method != MethodId::PwScpAdj)
    raise(ErrorCode::MethodMismatch, "calibration is not PW-SCP: " + path);
  ScpCalibration cal;
  cal.alpha = p.alpha;
  cal.n_c = p.n_c;
  cal.patients = p.patients;
  cal.n_p = p.n_p;
  cal.adjusted = p.method == MethodId::PwScpAdj;
  cal.eval_mask_policy = p.policy;
  cal.norm = p.norm;
  cal.config_json = std::move(p.config_json);
  const std::uint8_t saturated = c.u8("saturated flag");
  if (saturated > 1) raise(ErrorCode::FormatError, "bad saturated flag");
  cal.saturated = saturated == 1;
  for (int i = 0; i < 3; ++i)
    if (c.u8("reserved") != 0)
      raise(ErrorCode::FormatError, "reserved payload bytes must be zero");
  const std::uint32_t h = c.u32("qhat height");
  const std::uint32_t w = c.u32("qhat width");
  check_dims(h, w);
  std::vector<float> values(static_cast<std::size_t>(h) * w);
  for (auto& v : values) {
    v = c.f32("qhat payload");
    if (!(v >= 0.0f) || !std::isfinite(v))
      raise(ErrorCode::FormatError, "qhat values must be finite and >= 0");
  }
  c.expect_end();
  cal.qhat = ImageGrid::from_values(static_cast<int>(h), static_cast<int>(w),
                                    Units::Score, std::move(values));
  return cal;
}

CrcCalibration read_crc_calibration(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  Cursor c{bytes};
  CalPrologue p = parse_prologue(c, path);
  if (p.method != MethodId::PwCrc && p.method != MethodId::PwCrcAdj)
    raise(ErrorCode::MethodMismatch, "calibration is not PW-CRC: " + path);
  CrcCalibration cal;
  cal.alpha = p.alpha;
  cal.n_c = p.n_c;
  cal.patients = p.patients;
  cal.n_p = p.n_p;
  cal.adjusted = p.method == MethodId::PwCrcAdj;
  cal.eval_mask_policy = p.policy;
  cal.norm = p.norm;
  cal.config_json = std::move(p.config_json);
  cal.lambda_hat = c.f64("lambda");
  cal.b = c.f64("risk bound");
  cal.q_lo = c.f64("q_lo");
  cal.q_hi = c.f64("q_hi");
  c.expect_end();
  if (!(cal.lambda_hat >= 0.0) || !std::isfinite(cal.lambda_hat))
    raise(ErrorCode::FormatError, "lambda must be finite and >= 0");
  if (!(cal.q_lo >= 0.0 && cal.q_lo < cal.q_hi && cal.q_hi <= 1.0))
    raise(ErrorCode::FormatError, "bad bound quantiles");
  return cal;
}

// -- manifest CSV ------------------------------------------------------

const char* role_name(Role role) {
  switch (role) {
    case Role::Cbct: return "cbct";
    case Role::Ct: return "ct";
    case Role::Pct: return "pct";
    case Role::Sct: return "sct";
    case Role::MaskBody: return "mask_body";
    case Role::MaskBone: return "mask_bone";
    case Role::Sample: return "sample";
  }
  return "ct";
}

Role parse_role(const std::string& text) {
  if (text == "cbct") return Role::Cbct;
  if (text == "ct") return Role::Ct;
  if (text == "pct") return Role::Pct;
  if (text == "sct") return Role::Sct;
  if (text == "mask_body") return Role::MaskBody;
  if (text == "mask_bone") return Role::MaskBone;
  if (text == "sample") return Role::Sample;
  raise(ErrorCode::BadRole, "unknown role: " + text);
}

namespace {

using RecordKey = std::tuple<std::string, int, std::string, int>;

RecordKey key_of(const SliceRecord& r) {
  return {r.patient_id, r.slice_index, role_name(r.role),
          r.sample_index.value_or(-1)};
}

constexpr const char* kManifestHeader =
    "patient_id,slice_index,role,sample_index,path";

}  // namespace

void DatasetManifest::validate() const {
  if (records.empty())
    raise(ErrorCode::FormatError, "manifest has no records");
  std::set<RecordKey> seen;
  std::set<std::pair<std::string, int>> cbct_keys, ct_keys;
  for (const auto& r : records) {
    if (r.patient_id.empty())
      raise(ErrorCode::FormatError, "record with empty patient_id");
    if (r.slice_index < 0)
      raise(ErrorCode::FormatError, "record with negative slice_index");
    if ((r.role == Role::Sample) != r.sample_index.has_value())
      raise(ErrorCode::FormatError,
            "sample_index must be present exactly for sample records");
    if (!seen.insert(key_of(r)).second)
      raise(ErrorCode::DuplicateRecord,
            "duplicate record for " + r.patient_id + " slice " +
                std::to_string(r.slice_index) + " role " + role_name(r.role));
    if (r.role == Role::Cbct) cbct_keys.insert({r.patient_id, r.slice_index});
    if (r.role == Role::Ct) ct_keys.insert({r.patient_id, r.slice_index});
  }
  for (const auto& k : cbct_keys)
    if (!ct_keys.count(k))
      raise(ErrorCode::MissingPair, "cbct without matching ct: " + k.first +
                                        " slice " + std::to_string(k.second));
}

void DatasetManifest::sort_records() {
  std::sort(records.begin(), records.end(),
            [](const SliceRecord& a, const SliceRecord& b) {
              return key_of(a) < key_of(b);
            });
}

const SliceRecord* DatasetManifest::find(const std::string& patient_id,
                                         int slice_index, Role role,
                                         std::optional<int> sample_index) const {
  for (const auto& r : records) {
    if (r.patient_id == patient_id && r.slice_index == slice_index &&
        r.role == role && r.sample_index == sample_index)
      return &r;
  }
  return nullptr;
}

std::vector<const SliceRecord*> DatasetManifest::with_role(Role role) const {
  std::vector<const SliceRecord*> out;
  for (const auto& r : records)
    if (r.role == role) out.push_back(&r);
  return out;
}

int DatasetManifest::patient_count() const {
  std::set<std::string> ids;
  for (const auto& r : records) ids.insert(r.patient_id);
  return static_cast<int>(ids.size());
}

DatasetManifest read_manifest(const std::string& path) {
  const std::string bytes = read_file_bytes(path);
  std::istringstream in(bytes);
  std::string line;
  if (!std::getline(in, line))
    raise(ErrorCode::FormatError, "empty manifest: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    raise(ErrorCode::FormatError, "bad manifest header: " + path);

  DatasetManifest manifest;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      if (in.eof()) break;
      raise(ErrorCode::FormatError,
            "blank line " + std::to_string(line_no) + " in " + path);
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 5)
      raise(ErrorCode::FormatError,
            "expected 5 fields on line " + std::to_string(line_no));
    SliceRecord r;
    r.patient_id = fields[0];
    try {
      r.slice_index = std::stoi(fields[1]);
    } catch (const std::exception&) {
      raise(ErrorCode::FormatError, "bad slice_index on line " + std::to_string(line_no));
    }
    r.role = parse_role(fields[2]);
    if (!fields[3].empty()) {
      try {
        r.sample_index = std::stoi(fields[3]);
      } catch (const std::exception&) {
        raise(ErrorCode::FormatError,
              "bad sample_index on line " + std::to_string(line_no));
      }
    }
    r.path = fields[4];
    manifest.records.push_back(std::move(r));
  }
  manifest.sort_records();
  manifest.validate();
  return manifest;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  DatasetManifest sorted = manifest;
  sorted.sort_records();
  sorted.validate();
  std::string out = kManifestHeader;
  out.push_back('\n');
  for (const auto& r : sorted.records) {
    for (const std::string* field : {&r.patient_id, &r.path}) {
      if (field->find_first_of(",\n\r") != std::string::npos)
        raise(ErrorCode::FormatError, "manifest fields may not contain commas");
    }
    out += r.patient_id;
    out += ',';
    out += std::to_string(r.slice_index);
    out += ',';
    out += role_name(r.role);
    out += ',';
    if (r.sample_index) out += std::to_string(*r.sample_index);
    out += ',';
    out += r.path;
    out += '\n';
  }
  write_file_bytes(path, out);
}

// -- NIfTI-1 ------------------------------------------------------------

std::vector<ImageGrid> import_nifti(const std::string& path, int slice_axis) {
  if (slice_axis < 0 || slice_axis > 2)
    raise(ErrorCode::InvalidArgument, "slice_axis must be 0, 1, or 2");
  const std::string bytes = read_file_bytes(path);
  if (bytes.size() >= 2 && static_cast<std::uint8_t>(bytes[0]) == 0x1f &&
      static_cast<std::uint8_t>(bytes[1]) == 0x8b)
    raise(ErrorCode::CompressedInput, "gzip-compressed NIfTI is not supported");
  if (bytes.size() < 352)
    raise(ErrorCode::TruncatedPayload, "file shorter than a NIfTI-1 header");

  auto i16 = [&](std::size_t off) -> std::int16_t {
    return static_cast<std::int16_t>(static_cast<std::uint8_t>(bytes[off]) |
                                     (static_cast<std::uint8_t>(bytes[off + 1]) << 8));
  };
  auto i32 = [&](std::size_t off) -> std::int32_t {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes[off + static_cast<std::size_t>(i)]);
    return static_cast<std::int32_t>(v);
  };
  auto f32 = [&](std::size_t off) -> float {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes[off + static_cast<std::size_t>(i)]);
    return std::bit_cast<float>(v);
  };

  // little-endian NIfTI-1 only; byte-swapped headers fail the size check
  if (i32(0) != 348)
    raise(ErrorCode::BadNiftiMagic, "missing NIfTI-1 header size: " + path);
  if (!(bytes[344] == 'n' && bytes[345] == '+' && bytes[346] == '1' &&
        bytes[347] == '\0'))
    raise(ErrorCode::BadNiftiMagic, "bad NIfTI magic (need single-file n+1)");

  const std::int16_t ndim = i16(40);
  if (ndim < 2 || ndim > 4)
    raise(ErrorCode::FormatError, "unsupported NIfTI dimensionality");
  const int nx = i16(42);
  const int ny = i16(44);
  const int nz = ndim >= 3 ? i16(46) : 1;
  if (nx < 1 || ny < 1 || nz < 1 || nx > kMaxDim || ny > kMaxDim || nz > kMaxDim)
    raise(ErrorCode::FormatError, "implausible NIfTI dimensions");
  if (ndim == 4 && i16(48) > 1)
    raise(ErrorCode::FormatError, "multi-volume NIfTI is not supported");

  const std::int16_t datatype = i16(70);
  const std::int16_t bitpix = i16(72);
  int bytes_per;
  if (datatype == 4) {
    bytes_per = 2;  // int16
    if (bitpix != 16) raise(ErrorCode::FormatError, "bitpix mismatch for int16");
  } else if (datatype == 16) {
    bytes_per = 4;  // float32
    if (bitpix != 32) raise(ErrorCode::FormatError, "bitpix mismatch for float32");
  } else {
    raise(ErrorCode::UnsupportedDatatype,
          "only int16 and float32 NIfTI are supported");
  }

  float slope = f32(112);
  const float inter = f32(116);
  if (slope == 0.0f) slope = 1.0f;  // NIfTI convention
  const float vox_offset = f32(108);
  if (!(vox_offset >= 348.0f))
    raise(ErrorCode::FormatError, "bad vox_offset");
  const std::size_t data_start = static_cast<std::size_t>(vox_offset);
  const std::size_t total = static_cast<std::size_t>(nx) * ny * nz;
  if (bytes.size() < data_start + total * static_cast<std::size_t>(bytes_per))
    raise(ErrorCode::TruncatedPayload, "NIfTI data shorter than header promises");

  auto voxel = [&](int x, int y, int z) -> float {
    const std::size_t idx =
        static_cast<std::size_t>(x) +
        static_cast<std::size_t>(nx) * (static_cast<std::size_t>(y) +
                                        static_cast<std::size_t>(ny) * z);
    const std::size_t off = data_start + idx * static_cast<std::size_t>(bytes_per);
    float raw;
    if (datatype == 4)
      raw = static_cast<float>(i16(off));
    else
      raw = f32(off);
    return slope * raw + inter;
  };

  std::vector<ImageGrid> slices;
  if (slice_axis == 2) {
    slices.reserve(static_cast<std::size_t>(nz));
    for (int z = 0; z < nz; ++z) {
      ImageGrid g(ny, nx, Units::HU);
      for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) g.at(y, x) = voxel(x, y, z);
      slices.push_back(std::move(g));
    }
  } else if (slice_axis == 1) {
    slices.reserve(static_cast<std::size_t>(ny));
    for (int y = 0; y < ny; ++y) {
      ImageGrid g(nz, nx, Units::HU);
      for (int z = 0; z < nz; ++z)
        for (int x = 0; x < nx; ++x) g.at(z, x) = voxel(x, y, z);
      slices.push_back(std::move(g));
    }
  } else {
    slices.reserve(static_cast<std::size_t>(nx));
    for (int x = 0; x < nx; ++x) {
      ImageGrid g(nz, ny, Units::HU);
      for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y) g.at(z, y) = voxel(x, y, z);
      slices.push_back(std::move(g));
    }
  }
  for (auto& s : slices) s.validate();
  return slices;
}

// -- PGM ---------------------------------------------------------------

void export_pgm(const ImageGrid& grid, const std::string& path, float range_min,
                float range_max) {
  if (!(range_min < range_max))
    raise(ErrorCode::InvalidArgument, "PGM range requires min < max");
  std::string out = "P5\n" + std::to_string(grid.width()) + " " +
                    std::to_string(grid.height()) + "\n255\n";
  const double span = static_cast<double>(range_max) - range_min;
  for (float v : grid.values()) {
    const double t = (static_cast<double>(v) - range_min) / span;
    // round half up; midpoint maps to 128
    const double scaled = std::floor(t * 255.0 + 0.5);
    const int byte = static_cast<int>(std::clamp(scaled, 0.0, 255.0));
    out.push_back(static_cast<char>(byte));
  }
  write_file_bytes(path, out);
}

}  // namespace ctcal
