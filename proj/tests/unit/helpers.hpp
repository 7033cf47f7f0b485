#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "regprompt/phantom.hpp"
#include "regprompt/volume.hpp"

namespace testutil {

using namespace regprompt;

inline Volume3D make_volume(Index3 dims, std::vector<float> data, Vec3 spacing = {1, 1, 1}, Vec3 origin = {},
                            VolumeKind kind = VolumeKind::intensity) {
    return Volume3D(Grid{dims, spacing, origin}, kind, std::move(data));
}

template <typename F>
Volume3D generate(const Grid& g, F&& f, VolumeKind kind = VolumeKind::intensity) {
    std::vector<float> d(g.voxel_count());
    std::size_t idx = 0;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i) d[idx++] = static_cast<float>(f(i, j, k));
    return Volume3D(g, kind, std::move(d));
}

inline Volume3D random_mask(std::mt19937_64& rng, const Index3& dims, double p) {
    std::bernoulli_distribution b(p);
    std::vector<float> d(dims.count());
    for (auto& v : d) v = b(rng) ? 1.0f : 0.0f;
    return Volume3D(Grid{dims, {1, 1, 1}, {}}, VolumeKind::binary_mask, std::move(d));
}

/// Coarse phantom (2 mm in-plane, 4 mm slices) covering the same field of view as the default one.
inline PhantomSpec small_spec() {
    PhantomSpec s;
    s.dims = {64, 64, 12};
    s.spacing = {2.0, 2.0, 4.0};
    return s;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("regprompt_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace testutil
