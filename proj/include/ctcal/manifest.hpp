#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ctcal/error.hpp"

namespace ctcal {

enum class Role { Cbct, Ct, Pct, Sct, MaskBody, MaskBone, Sample };

const char* role_name(Role role);
Role parse_role(const std::string& text);

struct SliceRecord {
  std::string patient_id;
  int slice_index = 0;
  Role role = Role::Ct;
  std::optional<int> sample_index;  // present iff role == Sample
  std::string path;
};

/// Patient-grouped records linking the on-disk volumes of a dataset.
struct DatasetManifest {
  std::vector<SliceRecord> records;

  // Uniqueness of (patient, slice, role, sample) plus the pairing rule:
  // every cbct record has a ct record at the same (patient, slice).
  void validate() const;

  // Deterministic order: patient, slice, role name, sample index.
  void sort_records();

  const SliceRecord* find(const std::string& patient_id, int slice_index, Role role,
                          std::optional<int> sample_index = std::nullopt) const;

  std::vector<const SliceRecord*> with_role(Role role) const;

  int patient_count() const;

  void add(SliceRecord record) { records.push_back(std::move(record)); }
};

}  // namespace ctcal
