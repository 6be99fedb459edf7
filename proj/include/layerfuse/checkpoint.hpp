// SPDX-License-Identifier: Apache-2.0
//
// Probe checkpoints (.lfpb):
//   "LFPB" | u64 little-endian JSON length | JSON header | float64 LE parameters
// The JSON header carries the resolved config, parameter names/shapes in
// payload order, and caller-supplied provenance (plan, seed, ...).
#pragma once

#include <filesystem>

#include <json.hpp>

#include "layerfuse/probes.hpp"

namespace layerfuse::probes {

nlohmann::json config_to_json(const ProbeConfig &cfg);
ProbeConfig config_from_json(const nlohmann::json &j);

struct Checkpoint {
  Probe probe;
  nlohmann::json provenance;
};

void save_checkpoint(const std::filesystem::path &path, const Probe &probe,
                     const nlohmann::json &provenance);
Checkpoint load_checkpoint(const std::filesystem::path &path);

} // namespace layerfuse::probes
