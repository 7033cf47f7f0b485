#include "regprompt/volume.hpp"

#include <algorithm>
#include <string>

namespace regprompt {

void validate_grid(const Grid& g) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (g.dims[a] <= 0) throw DataError("volume dimensions must be positive");
        if (!(g.spacing[a] > 0.0) || !std::isfinite(g.spacing[a]))
            throw DataError("volume spacing must be positive and finite");
        if (!std::isfinite(g.origin[a])) throw DataError("volume origin must be finite");
    }
}

Volume3D::Volume3D(Grid grid, VolumeKind kind, std::vector<float> data)
    : grid_(grid), kind_(kind), data_(std::move(data)) {
    validate_grid(grid_);
    if (data_.size() != grid_.voxel_count())
        throw DataError("voxel count mismatch: expected " + std::to_string(grid_.voxel_count()) + ", got " +
                        std::to_string(data_.size()));
    if (kind_ == VolumeKind::binary_mask) {
        for (float f : data_)
            if (f != 0.0f && f != 1.0f) throw DataError("binary mask contains a value outside {0, 1}");
    }
}

Volume3D Volume3D::zeros(const Grid& grid, VolumeKind kind) {
    return Volume3D(grid, kind, std::vector<float>(grid.voxel_count(), 0.0f));
}

namespace {

inline double fetch_zero(const Volume3D& v, int i, int j, int k) {
    const auto& d = v.dims();
    if (i < 0 || j < 0 || k < 0 || i >= d.x || j >= d.y || k >= d.z) return 0.0;
    return v.at(i, j, k);
}

}  // namespace

double sample(const Volume3D& v, const VoxelCoord& c, Interpolation interp, OutOfBounds oob) {
    const auto& d = v.dims();
    double u = c.u, w = c.w, vv = c.v;
    if (oob == OutOfBounds::clamp) {
        u = std::clamp(u, 0.0, static_cast<double>(d.x - 1));
        vv = std::clamp(vv, 0.0, static_cast<double>(d.y - 1));
        w = std::clamp(w, 0.0, static_cast<double>(d.z - 1));
    }
    if (interp == Interpolation::nearest) {
        const double fi = std::floor(u + 0.5), fj = std::floor(vv + 0.5), fk = std::floor(w + 0.5);
        if (fi < 0 || fj < 0 || fk < 0 || fi > d.x - 1 || fj > d.y - 1 || fk > d.z - 1) return 0.0;
        return v.at(static_cast<int>(fi), static_cast<int>(fj), static_cast<int>(fk));
    }
    // Far outside: every neighbour is zero.
    if (u <= -1.0 || vv <= -1.0 || w <= -1.0 || u >= d.x || vv >= d.y || w >= d.z) return 0.0;
    const double fu = std::floor(u), fv = std::floor(vv), fw = std::floor(w);
    const int i = static_cast<int>(fu), j = static_cast<int>(fv), k = static_cast<int>(fw);
    const double tx = u - fu, ty = vv - fv, tz = w - fw;
    double acc = 0.0;
    for (int dk = 0; dk < 2; ++dk) {
        const double wz = dk ? tz : 1.0 - tz;
        if (wz == 0.0) continue;
        for (int dj = 0; dj < 2; ++dj) {
            const double wy = dj ? ty : 1.0 - ty;
            if (wy == 0.0) continue;
            for (int di = 0; di < 2; ++di) {
                const double wx = di ? tx : 1.0 - tx;
                if (wx == 0.0) continue;
                acc += wx * wy * wz * fetch_zero(v, i + di, j + dj, k + dk);
            }
        }
    }
    return acc;
}

int center_offset(int n, int target) {
    // Crop: margin split with the extra voxel removed on the high side (floor on the low side).
    // Pad: same rule mirrored, extra padding voxel on the high side.
    if (n >= target) return (n - target) / 2;
    return -((target - n) / 2);
}

Volume3D crop(const Volume3D& v, const Index3& begin, const Index3& dims) {
    for (std::size_t a = 0; a < 3; ++a)
        if (begin[a] < 0 || dims[a] <= 0 || begin[a] + dims[a] > v.dims()[a])
            throw PreconditionError("crop window outside volume");
    Grid g{dims, v.spacing(), v.grid().to_world(begin.x, begin.y, begin.z)};
    std::vector<float> out;
    out.reserve(g.voxel_count());
    for (int k = 0; k < dims.z; ++k)
        for (int j = 0; j < dims.y; ++j)
            for (int i = 0; i < dims.x; ++i) out.push_back(v.at(begin.x + i, begin.y + j, begin.z + k));
    return Volume3D(g, v.kind(), std::move(out));
}

Volume3D preprocess(const Volume3D& v, const Index3& target_dims, double lo, double hi) {
    if (target_dims.x <= 0 || target_dims.y <= 0 || target_dims.z <= 0)
        throw PreconditionError("target dimensions must be positive");
    if (!(lo < hi)) throw PreconditionError("clip range requires lo < hi");

    Index3 offset;
    for (std::size_t a = 0; a < 3; ++a) offset[a] = center_offset(v.dims()[a], target_dims[a]);

    Grid g{target_dims, v.spacing(), v.grid().to_world(offset.x, offset.y, offset.z)};
    std::vector<float> out(g.voxel_count());
    const auto flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
    std::size_t idx = 0;
    for (int k = 0; k < target_dims.z; ++k)
        for (int j = 0; j < target_dims.y; ++j)
            for (int i = 0; i < target_dims.x; ++i, ++idx) {
                const int si = i + offset.x, sj = j + offset.y, sk = k + offset.z;
                float value = 0.0f;
                if (si >= 0 && sj >= 0 && sk >= 0 && si < v.dims().x && sj < v.dims().y && sk < v.dims().z)
                    value = v.at(si, sj, sk);
                out[idx] = v.is_mask() ? value : std::clamp(value, flo, fhi);
            }
    return Volume3D(g, v.kind(), std::move(out));
}

std::size_t count_nonzero(const Volume3D& v) {
    return static_cast<std::size_t>(std::count_if(v.data().begin(), v.data().end(), [](float f) { return f != 0.0f; }));
}

Volume3D threshold_mask(const Volume3D& v, double threshold) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > threshold ? 1.0f : 0.0f;
    return Volume3D(v.grid(), VolumeKind::binary_mask, std::move(out));
}

}  // namespace regprompt
