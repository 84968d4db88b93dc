#pragma once

#include <optional>
#include <string>

#include "ctcal/config.hpp"
#include "ctcal/io.hpp"

namespace ctcal::pipeline {

/// Machine-readable result of one command, serialized as a JSON object.
struct CommandResult {
  std::string summary_json;
};

CommandResult phantom_gen(const RunConfig& cfg, int patients, int slices,
                          std::uint64_t seed, const std::string& out_dir);

CommandResult segment(const RunConfig& cfg, const std::string& input_path,
                      const std::string& out_body, const std::string& out_bone,
                      const std::optional<std::string>& truth_dir);

CommandResult translate_cmd(const RunConfig& cfg, const std::string& manifest_path,
                            const std::optional<std::string>& fit_manifest_path,
                            TranslateMode mode, const std::string& out_dir,
                            int samples, std::uint64_t seed);

CommandResult calibrate_cmd(const RunConfig& cfg, const std::string& manifest_path,
                            MethodId method, double alpha,
                            const std::string& out_path);

CommandResult predict_cmd(const RunConfig& cfg, const std::string& calib_path,
                          const std::string& manifest_path,
                          const std::string& out_dir,
                          const std::optional<std::string>& map_dir);

CommandResult evaluate_cmd(const RunConfig& cfg, const std::string& manifest_path,
                           const std::string& calib_path,
                           const std::optional<std::string>& calib_adj_path,
                           const std::string& out_csv);

CommandResult perturb_cmd(const RunConfig& cfg, const std::string& manifest_path,
                          int level, std::uint64_t seed,
                          const std::string& out_dir);

CommandResult bench_cmd(const RunConfig& cfg, const std::string& experiment,
                        const std::string& out_dir, std::uint64_t seed,
                        bool dry_run);

}  // namespace ctcal::pipeline
