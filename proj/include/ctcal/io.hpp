#pragma once

#include <string>
#include <vector>

#include "ctcal/conformal.hpp"
#include "ctcal/core.hpp"
#include "ctcal/manifest.hpp"

namespace ctcal {

// -- CTVOL volume container ---------------------------------------------
// 24-byte header: magic "CTVOL001", u32 version = 1, u32 height, u32 width,
// u8 units (0 normalized, 1 HU, 2 mask), 3 zero bytes; then h*w little-endian
// f32 values, row-major. Masks are stored as 0.0/1.0.

void write_volume(const std::string& path, const ImageGrid& grid);
void write_volume(const std::string& path, const BinaryMask& mask);

// BadUnits when the file holds a mask.
ImageGrid read_volume(const std::string& path);

// BadUnits when the file holds an image.
BinaryMask read_mask_volume(const std::string& path);

// -- CTCAL calibration container ------------------------------------------
// magic "CTCAL001", method id (1 PW-SCP, 2 PW-SCP-ADJ, 3 PW-CRC,
// 4 PW-CRC-ADJ), run metadata, the canonical config document, its SHA-256
// digest, then the method payload (per-pixel qhat grid, or lambda plus bound
// quantiles). Loads fail closed on digest or method/payload mismatch.

enum class MethodId : std::uint8_t {
  PwScp = 1,
  PwScpAdj = 2,
  PwCrc = 3,
  PwCrcAdj = 4,
};

const char* method_name(MethodId id);
MethodId parse_method(const std::string& text);

void write_scp_calibration(const std::string& path, const ScpCalibration& cal);
void write_crc_calibration(const std::string& path, const CrcCalibration& cal);

MethodId peek_calibration_method(const std::string& path);
ScpCalibration read_scp_calibration(const std::string& path);
CrcCalibration read_crc_calibration(const std::string& path);

// -- Manifest CSV -----------------------------------------------------------
// Header `patient_id,slice_index,role,sample_index,path`, UTF-8, no quoting;
// records are written in deterministic sorted order.

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);

// -- Minimal NIfTI-1 import ---------------------------------------------
// Uncompressed single-file .nii, little-endian, datatype int16 or float32.
// scl_slope/scl_inter are applied to produce HU slices along slice_axis.

std::vector<ImageGrid> import_nifti(const std::string& path, int slice_axis);

// -- PGM export -------------------------------------------------------------
// Binary P5, 8-bit, linear window [range_min, range_max], round-half-up.

void export_pgm(const ImageGrid& grid, const std::string& path, float range_min,
                float range_max);

// shared low-level helpers (exposed for tests)
std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace ctcal
