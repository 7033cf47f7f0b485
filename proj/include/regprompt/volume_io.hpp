#pragma once

#include <filesystem>
#include <vector>

#include "regprompt/volume.hpp"

namespace regprompt {

enum class VolumeFormat { nifti1, raw_json };

/// `.nii` / `.hdr` select NIfTI-1, anything else the raw+json sidecar pair.
[[nodiscard]] VolumeFormat format_from_path(const std::filesystem::path& path);

/// For raw+json, `path` names the `.json` sidecar (the `.raw` payload sits beside it).
[[nodiscard]] Volume3D load_volume(const std::filesystem::path& path, VolumeFormat format);
[[nodiscard]] Volume3D load_volume(const std::filesystem::path& path);

void save_volume(const Volume3D& v, const std::filesystem::path& path, VolumeFormat format);
void save_volume(const Volume3D& v, const std::filesystem::path& path);

/// Multi-channel float field on a grid (channel-interleaved, x-fastest), raw+json only.
struct VectorVolume {
    Grid grid;
    int channels = 3;
    std::vector<float> data;
};

void save_vector_volume(const VectorVolume& v, const std::filesystem::path& json_path);
[[nodiscard]] VectorVolume load_vector_volume(const std::filesystem::path& json_path);

}  // namespace regprompt
