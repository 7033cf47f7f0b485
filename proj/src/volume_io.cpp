#include "regprompt/volume_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include <json.hpp>

namespace regprompt {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kNiftiHeaderSize = 348;
constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

std::vector<char> read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open " + p.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const char* bytes, std::size_t n) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out.write(bytes, static_cast<std::streamsize>(n));
    if (!out) throw Error("write failed for " + p.string());
}

template <typename T>
T read_at(const char* base, std::size_t offset, bool swap) {
    T value;
    std::memcpy(&value, base + offset, sizeof(T));
    if (swap) {
        auto* b = reinterpret_cast<unsigned char*>(&value);
        std::reverse(b, b + sizeof(T));
    }
    return value;
}

template <typename T>
void write_at(char* base, std::size_t offset, T value) {
    std::memcpy(base + offset, &value, sizeof(T));
}

fs::path raw_path_for(const fs::path& json_path) {
    fs::path raw = json_path;
    raw.replace_extension(".raw");
    return raw;
}

json grid_to_json(const Grid& g) {
    return {{"dims", {g.dims.x, g.dims.y, g.dims.z}},
            {"spacing", {g.spacing.x, g.spacing.y, g.spacing.z}},
            {"origin", {g.origin.x, g.origin.y, g.origin.z}}};
}

Grid grid_from_json(const json& j) {
    try {
        const auto d = j.at("dims").get<std::vector<int>>();
        const auto s = j.at("spacing").get<std::vector<double>>();
        const auto o = j.at("origin").get<std::vector<double>>();
        if (d.size() != 3 || s.size() != 3 || o.size() != 3)
            throw DataError("dims, spacing and origin need exactly 3 entries");
        Grid g{{d[0], d[1], d[2]}, {s[0], s[1], s[2]}, {o[0], o[1], o[2]}};
        validate_grid(g);
        return g;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed volume sidecar: ") + e.what());
    }
}

std::vector<float> read_f32_payload(const fs::path& raw, std::size_t expected_values) {
    const auto bytes = read_file(raw);
    if (bytes.size() != expected_values * sizeof(float))
        throw DataError("payload size mismatch in " + raw.string() + ": expected " +
                        std::to_string(expected_values * sizeof(float)) + " bytes, got " +
                        std::to_string(bytes.size()));
    std::vector<float> data(expected_values);
    std::memcpy(data.data(), bytes.data(), bytes.size());
    return data;
}

Volume3D load_raw_json(const fs::path& path) {
    json j;
    try {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open " + path.string());
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed volume sidecar " + path.string() + ": " + e.what());
    }
    const Grid g = grid_from_json(j);
    const std::string dtype = j.value("dtype", "");
    if (dtype != "f32") throw DataError("unsupported dtype '" + dtype + "' (expected f32)");
    if (j.value("channels", 1) != 1) throw DataError("multi-channel payload is not a scalar volume");
    const std::string kind = j.value("kind", "intensity");
    if (kind != "intensity" && kind != "mask") throw DataError("unknown volume kind '" + kind + "'");
    return Volume3D(g, kind == "mask" ? VolumeKind::binary_mask : VolumeKind::intensity,
                    read_f32_payload(raw_path_for(path), g.voxel_count()));
}

void save_raw_json(const Volume3D& v, const fs::path& path) {
    json j = grid_to_json(v.grid());
    j["dtype"] = "f32";
    j["kind"] = v.is_mask() ? "mask" : "intensity";
    const std::string text = j.dump(2) + "\n";
    write_file(path, text.data(), text.size());
    write_file(raw_path_for(path), reinterpret_cast<const char*>(v.data().data()), v.size() * sizeof(float));
}

Volume3D load_nifti(const fs::path& path) {
    const auto header = read_file(path);
    if (header.size() < kNiftiHeaderSize) throw DataError("malformed NIfTI header: file shorter than 348 bytes");
    const char* h = header.data();

    const auto sizeof_hdr = read_at<std::int32_t>(h, 0, false);
    bool swap = false;
    if (sizeof_hdr != static_cast<std::int32_t>(kNiftiHeaderSize)) {
        if (read_at<std::int32_t>(h, 0, true) != static_cast<std::int32_t>(kNiftiHeaderSize))
            throw DataError("malformed NIfTI header: sizeof_hdr != 348");
        swap = true;
    }
    const bool single_file = std::memcmp(h + 344, "n+1\0", 4) == 0;
    const bool pair_file = std::memcmp(h + 344, "ni1\0", 4) == 0;
    if (!single_file && !pair_file) throw DataError("malformed NIfTI header: bad magic");

    const auto ndim = read_at<std::int16_t>(h, 40, swap);
    if (ndim < 1 || ndim > 7) throw DataError("malformed NIfTI header: dim[0] out of range");
    Index3 dims{1, 1, 1};
    for (int a = 0; a < 3; ++a)
        if (a < ndim) dims[static_cast<std::size_t>(a)] = read_at<std::int16_t>(h, 42 + 2 * a, swap);
    for (int a = 3; a < ndim; ++a)
        if (read_at<std::int16_t>(h, 42 + 2 * a, swap) > 1) throw DataError("4D and higher NIfTI volumes are not supported");

    Vec3 spacing{1, 1, 1};
    for (int a = 0; a < 3; ++a) {
        const float p = read_at<float>(h, 80 + 4 * a, swap);
        spacing[static_cast<std::size_t>(a)] = p > 0.0f ? static_cast<double>(std::abs(p)) : 1.0;
    }
    const Vec3 origin{read_at<float>(h, 268, swap), read_at<float>(h, 272, swap), read_at<float>(h, 276, swap)};
    Grid g{dims, spacing, origin};
    validate_grid(g);

    const auto datatype = read_at<std::int16_t>(h, 70, swap);
    std::size_t bytes_per_voxel = 0;
    switch (datatype) {
        case kDtUint8: bytes_per_voxel = 1; break;
        case kDtInt16: bytes_per_voxel = 2; break;
        case kDtFloat32: bytes_per_voxel = 4; break;
        default: throw DataError("unsupported NIfTI datatype " + std::to_string(datatype));
    }

    std::vector<char> pair_payload;
    const char* payload = nullptr;
    std::size_t available = 0;
    if (single_file) {
        const auto vox_offset = static_cast<std::size_t>(read_at<float>(h, 108, swap));
        if (vox_offset < 352) throw DataError("malformed NIfTI header: vox_offset < 352");
        if (vox_offset > header.size()) throw DataError("voxel count mismatch: payload truncated");
        payload = h + vox_offset;
        available = header.size() - vox_offset;
    } else {
        fs::path img = path;
        img.replace_extension(".img");
        pair_payload = read_file(img);
        const auto vox_offset = static_cast<std::size_t>(read_at<float>(h, 108, swap));
        if (vox_offset > pair_payload.size()) throw DataError("voxel count mismatch: payload truncated");
        payload = pair_payload.data() + vox_offset;
        available = pair_payload.size() - vox_offset;
    }
    const std::size_t n = g.voxel_count();
    if (available < n * bytes_per_voxel) throw DataError("voxel count mismatch: payload truncated");

    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (datatype) {
            case kDtUint8: data[i] = static_cast<unsigned char>(payload[i]); break;
            case kDtInt16: data[i] = read_at<std::int16_t>(payload, 2 * i, swap); break;
            default: data[i] = read_at<float>(payload, 4 * i, swap); break;
        }
    }
    char descrip[81] = {};
    std::memcpy(descrip, h + 148, 80);
    const bool mask_tag = std::string(descrip).rfind("mask", 0) == 0;
    const bool binary = std::all_of(data.begin(), data.end(), [](float f) { return f == 0.0f || f == 1.0f; });
    return Volume3D(g, mask_tag && binary ? VolumeKind::binary_mask : VolumeKind::intensity, std::move(data));
}

void save_nifti(const Volume3D& v, const fs::path& path) {
    constexpr std::size_t vox_offset = 352;
    const bool mask = v.is_mask();
    const std::size_t bytes_per_voxel = mask ? 1 : 4;
    std::vector<char> out(vox_offset + v.size() * bytes_per_voxel, 0);
    char* h = out.data();
    write_at<std::int32_t>(h, 0, static_cast<std::int32_t>(kNiftiHeaderSize));
    h[39] = 0;
    const std::array<std::int16_t, 8> dim{3,
                                          static_cast<std::int16_t>(v.dims().x),
                                          static_cast<std::int16_t>(v.dims().y),
                                          static_cast<std::int16_t>(v.dims().z),
                                          1, 1, 1, 1};
    for (std::size_t a = 0; a < 8; ++a) write_at<std::int16_t>(h, 40 + 2 * a, dim[a]);
    write_at<std::int16_t>(h, 70, mask ? kDtUint8 : kDtFloat32);
    write_at<std::int16_t>(h, 72, static_cast<std::int16_t>(bytes_per_voxel * 8));
    const std::array<float, 8> pixdim{1.0f,
                                      static_cast<float>(v.spacing().x),
                                      static_cast<float>(v.spacing().y),
                                      static_cast<float>(v.spacing().z),
                                      1, 1, 1, 1};
    for (std::size_t a = 0; a < 8; ++a) write_at<float>(h, 76 + 4 * a, pixdim[a]);
    write_at<float>(h, 108, static_cast<float>(vox_offset));
    write_at<float>(h, 112, 1.0f);
    h[123] = 2;  // xyzt_units: mm
    const char* descrip = mask ? "mask" : "intensity";
    std::memcpy(h + 148, descrip, std::strlen(descrip));
    write_at<std::int16_t>(h, 252, 1);  // qform_code: scanner
    write_at<float>(h, 268, static_cast<float>(v.origin().x));
    write_at<float>(h, 272, static_cast<float>(v.origin().y));
    write_at<float>(h, 276, static_cast<float>(v.origin().z));
    std::memcpy(h + 344, "n+1\0", 4);

    char* payload = h + vox_offset;
    if (mask) {
        for (std::size_t i = 0; i < v.size(); ++i) payload[i] = v[i] != 0.0f ? 1 : 0;
    } else {
        std::memcpy(payload, v.data().data(), v.size() * sizeof(float));
    }
    write_file(path, out.data(), out.size());
}

}  // namespace

VolumeFormat format_from_path(const fs::path& path) {
    const auto ext = path.extension().string();
    return (ext == ".nii" || ext == ".hdr") ? VolumeFormat::nifti1 : VolumeFormat::raw_json;
}

Volume3D load_volume(const fs::path& path, VolumeFormat format) {
    return format == VolumeFormat::nifti1 ? load_nifti(path) : load_raw_json(path);
}

Volume3D load_volume(const fs::path& path) { return load_volume(path, format_from_path(path)); }

void save_volume(const Volume3D& v, const fs::path& path, VolumeFormat format) {
    if (format == VolumeFormat::nifti1) {
        for (std::size_t a = 0; a < 3; ++a)
            if (v.dims()[a] > 32767) throw DataError("dimension exceeds NIfTI-1 limit");
        save_nifti(v, path);
    } else {
        save_raw_json(v, path);
    }
}

void save_volume(const Volume3D& v, const fs::path& path) { save_volume(v, path, format_from_path(path)); }

void save_vector_volume(const VectorVolume& v, const fs::path& json_path) {
    validate_grid(v.grid);
    if (v.data.size() != v.grid.voxel_count() * static_cast<std::size_t>(v.channels))
        throw DataError("vector volume size mismatch");
    json j = grid_to_json(v.grid);
    j["dtype"] = "f32";
    j["kind"] = "field";
    j["channels"] = v.channels;
    const std::string text = j.dump(2) + "\n";
    write_file(json_path, text.data(), text.size());
    write_file(raw_path_for(json_path), reinterpret_cast<const char*>(v.data.data()), v.data.size() * sizeof(float));
}

VectorVolume load_vector_volume(const fs::path& json_path) {
    json j;
    try {
        std::ifstream in(json_path);
        if (!in) throw DataError("cannot open " + json_path.string());
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw DataError("malformed field sidecar: " + std::string(e.what()));
    }
    VectorVolume v;
    v.grid = grid_from_json(j);
    v.channels = j.value("channels", 1);
    if (v.channels < 1) throw DataError("channel count must be positive");
    v.data = read_f32_payload(raw_path_for(json_path), v.grid.voxel_count() * static_cast<std::size_t>(v.channels));
    return v;
}

}  // namespace regprompt
