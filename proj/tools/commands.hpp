#pragma once

#include <string>
#include <vector>

#include "config.hpp"

namespace fovea::cli {

/// Full command names, e.g. "analyze budget-curve".
const std::vector<std::string>& command_names();

/// Runs one command: validates its config sections, writes outputs and
/// manifest.json into rc.out_dir. Throws ConfigError or fovea::Error.
void run_command(const std::string& name, RunConfig& rc);

}  // namespace fovea::cli
