#pragma once

#include <cmath>
#include <filesystem>
#include <random>

#include "fovea/optics.hpp"

namespace testing {

inline std::filesystem::path data_dir() { return FOVEA_DATA_DIR; }

inline fovea::optics::SystemConfig default_config() {
    return fovea::optics::SystemConfig::load(data_dir() / "systems" / "default_system.json");
}

inline const fovea::optics::OpticalSystem& default_system() {
    static const fovea::optics::OpticalSystem sys(default_config());
    return sys;
}

inline double rel_err(double a, double b, double floor = 1e-12) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing
