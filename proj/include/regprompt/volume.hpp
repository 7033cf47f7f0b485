#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "regprompt/error.hpp"
#include "regprompt/geometry.hpp"

namespace regprompt {

/// Continuous voxel-index coordinate (u, v, w); integer values hit voxel centres.
struct VoxelCoord {
    double u = 0.0, v = 0.0, w = 0.0;

    friend constexpr bool operator==(const VoxelCoord&, const VoxelCoord&) = default;
    [[nodiscard]] bool finite() const { return std::isfinite(u) && std::isfinite(v) && std::isfinite(w); }
};

/// Sampling lattice of a volume: voxel counts, spacing (mm) and origin (mm, world position of voxel 0).
struct Grid {
    Index3 dims;
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin;

    [[nodiscard]] std::size_t voxel_count() const { return dims.count(); }
    [[nodiscard]] std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims.y) + static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(dims.x) +
               static_cast<std::size_t>(i);
    }
    [[nodiscard]] Vec3 to_world(double u, double v, double w) const {
        return {origin.x + u * spacing.x, origin.y + v * spacing.y, origin.z + w * spacing.z};
    }
    [[nodiscard]] Vec3 to_world(const VoxelCoord& c) const { return to_world(c.u, c.v, c.w); }
    [[nodiscard]] VoxelCoord to_voxel(const Vec3& p) const {
        return {(p.x - origin.x) / spacing.x, (p.y - origin.y) / spacing.y, (p.z - origin.z) / spacing.z};
    }
    /// True when c lies within [0, n-1] on every axis.
    [[nodiscard]] bool contains(const VoxelCoord& c) const {
        return c.u >= 0.0 && c.v >= 0.0 && c.w >= 0.0 && c.u <= dims.x - 1 && c.v <= dims.y - 1 &&
               c.w <= dims.z - 1;
    }

    friend bool operator==(const Grid&, const Grid&) = default;
};

/// Throws DataError unless the grid has positive dims and positive finite spacing.
void validate_grid(const Grid& g);

enum class VolumeKind { intensity, binary_mask };

/// Scalar 3D image, x-fastest storage. Immutable once constructed.
class Volume3D {
public:
    Volume3D() = default;
    /// Validates all invariants; throws DataError on violation.
    Volume3D(Grid grid, VolumeKind kind, std::vector<float> data);

    /// Zero-filled volume on a grid.
    static Volume3D zeros(const Grid& grid, VolumeKind kind);

    [[nodiscard]] const Grid& grid() const { return grid_; }
    [[nodiscard]] const Index3& dims() const { return grid_.dims; }
    [[nodiscard]] const Vec3& spacing() const { return grid_.spacing; }
    [[nodiscard]] const Vec3& origin() const { return grid_.origin; }
    [[nodiscard]] VolumeKind kind() const { return kind_; }
    [[nodiscard]] bool is_mask() const { return kind_ == VolumeKind::binary_mask; }
    [[nodiscard]] std::span<const float> data() const { return data_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }

    [[nodiscard]] float at(int i, int j, int k) const { return data_[grid_.index(i, j, k)]; }
    [[nodiscard]] float operator[](std::size_t idx) const { return data_[idx]; }

    /// Releases the buffer for reuse by a builder.
    [[nodiscard]] std::vector<float> take_data() && { return std::move(data_); }

    friend bool operator==(const Volume3D&, const Volume3D&) = default;

private:
    Grid grid_;
    VolumeKind kind_ = VolumeKind::intensity;
    std::vector<float> data_;
};

enum class Interpolation { trilinear, nearest };
enum class OutOfBounds { zero, clamp };

/// Samples v at continuous voxel coordinate c. Under OutOfBounds::zero, lattice neighbours outside the
/// volume contribute 0; under clamp the coordinate is clamped into [0, n-1].
[[nodiscard]] double sample(const Volume3D& v, const VoxelCoord& c, Interpolation interp, OutOfBounds oob);

/// Output on grid_of where each voxel takes moving sampled at map(world position of that voxel).
/// The map takes and returns world coordinates (mm). Masks must use nearest interpolation.
template <typename PointMap>
[[nodiscard]] Volume3D resample_through(const Volume3D& moving, const Grid& grid_of, const PointMap& map,
                                        Interpolation interp, OutOfBounds oob = OutOfBounds::zero) {
    if (moving.is_mask() && interp != Interpolation::nearest)
        throw PreconditionError("binary masks must be resampled with nearest interpolation");
    std::vector<float> out(grid_of.voxel_count());
    std::size_t idx = 0;
    for (int k = 0; k < grid_of.dims.z; ++k)
        for (int j = 0; j < grid_of.dims.y; ++j)
            for (int i = 0; i < grid_of.dims.x; ++i, ++idx) {
                const Vec3 mapped = map(grid_of.to_world(i, j, k));
                out[idx] = static_cast<float>(
                    sample(moving, moving.grid().to_voxel(mapped), interp, oob));
            }
    return Volume3D(grid_of, moving.kind(), std::move(out));
}

/// Center-crop or symmetrically zero-pad to target_dims, then clip intensities to [lo, hi].
/// Odd margins put the extra voxel on the high-index side.
[[nodiscard]] Volume3D preprocess(const Volume3D& v, const Index3& target_dims, double lo, double hi);

/// Start offset for centering an axis of length n into length target; negative values mean padding.
[[nodiscard]] int center_offset(int n, int target);

/// Sub-volume of v covering voxels [begin, begin + dims) per axis (bounds must lie inside v).
[[nodiscard]] Volume3D crop(const Volume3D& v, const Index3& begin, const Index3& dims);

/// Number of nonzero voxels.
[[nodiscard]] std::size_t count_nonzero(const Volume3D& v);

/// Binarizes v with value > threshold.
[[nodiscard]] Volume3D threshold_mask(const Volume3D& v, double threshold);

}  // namespace regprompt
