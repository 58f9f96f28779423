#pragma once

#include <filesystem>
#include <vector>

#include "geoworld/scene.hpp"

namespace geoworld::png {

/// One row pair per rollout: RGB frames on top, depth (near = bright) below.
/// Frames must share one size.
void write_grid(const std::filesystem::path& path, const std::vector<std::vector<scene::Frame>>& rows);

}  // namespace geoworld::png
