#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "regprompt/geometry.hpp"

namespace regprompt {

/// Exact squared Euclidean distance (mm^2) from every voxel centre to the nearest voxel with
/// seeds[idx] != 0, anisotropic spacing, separable lower-envelope algorithm (Felzenszwalb & Huttenlocher).
/// Voxels are x-fastest. With no seeds every entry is +infinity.
[[nodiscard]] std::vector<double> squared_distance_transform(const Index3& dims, const Vec3& spacing,
                                                             std::span<const std::uint8_t> seeds);

}  // namespace regprompt
