#pragma once

// CLI command implementations. Each command is idempotent given identical
// inputs, never mutates its input directories, and stamps its artifact
// directory with the resolved config, its hash and the seed.

#include <string>
#include <vector>

#include "mvd/config.hpp"

namespace mvd {

void write_run_info(const std::string& out_dir, const RunConfig& config,
                    const std::string& command);

std::vector<Capture> load_captures(const std::string& data_dir);

int cmd_render_data(const RunConfig& config, const std::string& out_dir);

int cmd_train_vae(const RunConfig& config, const std::string& kind, const std::string& data_dir,
                  const std::string& out_dir);

int cmd_train_dit(const RunConfig& config, const std::string& data_dir,
                  const std::string& image_vae_path, const std::string& raymap_vae_path,
                  const std::string& out_dir, bool resume);

int cmd_sample(const RunConfig& config, const std::string& checkpoint_path,
               const std::string& capture_dir, const std::string& out_dir,
               const std::vector<int>& known_frames, int max_frames);

int cmd_complete(const RunConfig& config, const std::string& checkpoint_path,
                 const std::string& capture_dir, const std::string& out_dir);

int cmd_pose(const RunConfig& config, const std::string& checkpoint_path,
             const std::string& capture_dir, const std::string& out_dir);

int cmd_eval(const RunConfig& config, const std::string& checkpoint_path,
             const std::string& data_dir, const std::string& out_dir, double threshold_deg,
             const std::string& loss_log_path);

}  // namespace mvd
