// Experiment commands behind the command-line tool. Each command reads its
// settings from an ExperimentConfig, derives every random stream from the
// root seed, writes its artifacts under `output` and returns the JSON summary
// it also stores as output/summary.json.
//
// Config keys per command (defaults in brackets):
//   simulate           input (HR cube; else a synthetic scene of
//                      bands x height x width [16 64 64]), scale [4],
//                      msi_bands [4], srf_path, srf_c [0.01], kernel
//                      [motion:7:0.5:1], snr_hsi, snr_msi [inf]
//   pretrain-backbone  bands, height, width, scale, msi_bands, srf_path,
//                      snr_hsi, train_scenes [12], backbone_width [32],
//                      backbone_depth [4], epochs [150], batch_size [6],
//                      train_lr [1e-4]
//   meta-pretrain      as pretrain-backbone plus backbone (checkpoint),
//                      meta_tasks [16], meta_epochs [100], alpha [1e-3],
//                      meta_lr [1e-3], tasks_per_batch [4], est_kernel_size
//                      [9], recon_width [32], fusion_depth [2], embed [16]
//   fuse               lr_hsi, hr_msi, backbone, recon_init, est_kernel_size,
//                      outer_iters [40], inner_iters [10], lr_degeneration
//                      [1e-4], lr_reconstruction [1e-3], mode [alternating],
//                      eta, xi [1e-6], recon_zero_init [1], and optional
//                      truth, kernel_truth, srf_truth for error columns
//   ablate             as fuse with truth required; regularizer
//                      (none | tikhonov:W | tv:W) adds a MAP row
//   evaluate           truth (reference) and input (estimate)
//   export             input, rgb [three evenly spaced bands], truth,
//                      kernel_file, srf_file
//
// Kernel specs: gaussian:SIZE:SIGMA, motion:LENGTH:ANGLE:THICKNESS (angle in
// radians) or file:PATH.

#ifndef HSIFUSE_COMMANDS_H_
#define HSIFUSE_COMMANDS_H_

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include <json.hpp>

#include "hsifuse/degeneration.h"
#include "hsifuse/io.h"

namespace hsifuse {

KernelSpec parse_kernel_spec(const std::string& text);
std::array<int, 3> parse_band_triplet(const std::string& text, int bands);

using Command = std::function<nlohmann::json(const ExperimentConfig&,
                                             std::uint64_t seed)>;

// Name -> command, in the order shown by the tool's help.
const std::map<std::string, Command>& commands();

nlohmann::json run_simulate(const ExperimentConfig& cfg, std::uint64_t seed);
nlohmann::json run_pretrain_backbone(const ExperimentConfig& cfg,
                                     std::uint64_t seed);
nlohmann::json run_meta_pretrain(const ExperimentConfig& cfg,
                                 std::uint64_t seed);
nlohmann::json run_fuse(const ExperimentConfig& cfg, std::uint64_t seed);
nlohmann::json run_ablate(const ExperimentConfig& cfg, std::uint64_t seed);
nlohmann::json run_evaluate(const ExperimentConfig& cfg, std::uint64_t seed);
nlohmann::json run_export(const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace hsifuse

#endif  // HSIFUSE_COMMANDS_H_
