#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "regprompt/metrics.hpp"
#include "regprompt/prompts.hpp"
#include "regprompt/transform.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

struct Ellipsoid {
    Vec3 center;
    Vec3 radii;
};

/// Synthetic knee: two bone ellipsoids, each capped on the joint side by a cartilage shell.
/// World coordinates are centred on the grid.
struct PhantomSpec {
    Index3 dims{128, 128, 24};
    Vec3 spacing{1.0, 1.0, 2.0};
    Ellipsoid femur{{0.0, -30.0, 0.0}, {35.0, 28.0, 18.0}};
    Ellipsoid tibia{{0.0, 34.0, 0.0}, {32.0, 24.0, 16.0}};
    double cartilage_thickness_mm = 3.0;
    /// Cartilage covers the part of the bone surface whose normalised offset towards the joint exceeds this.
    double cap_fraction = 0.4;
    double background = 50.0;
    double bone = 400.0;
    double cartilage = 1500.0;
    double noise_sigma = 20.0;
    /// Pull-back map from patient world to template world: patient(x) = template(deformation(x)).
    std::optional<CompositeTransform> deformation;

    /// Throws PreconditionError on degenerate geometry (e.g. shell thinner than one voxel).
    void validate() const;
    [[nodiscard]] Grid grid() const;
};

/// Labels of a world point in the undeformed template.
enum class Tissue : std::uint8_t { background, femur, tibia, femoral_cartilage, tibial_cartilage };
[[nodiscard]] Tissue tissue_at(const PhantomSpec& spec, const Vec3& template_point);

struct Phantom {
    Volume3D image;
    MaskSet masks;
    PromptSet prompts;
};

/// Deterministic per (spec, seed). Prompts: on every slice holding a structure, 3 positive points at
/// the deepest in-slice voxels (spread apart) and 2 negative background points far from the structure.
[[nodiscard]] Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& id = "phantom");

/// Default prompts derived from ground-truth masks.
[[nodiscard]] PromptSet default_prompts(const MaskSet& masks, const std::string& owner);

struct DeformationSpec {
    double max_translation_mm = 8.0;
    double max_rotation_deg = 10.0;     ///< about z; rotations about x and y use a quarter of this
    double max_log_scale = 0.0953;      ///< ln 1.1
    double ffd_spacing_mm = 24.0;
    double ffd_max_mm = 4.0;            ///< 0 disables the FFD part
};

/// Random smooth pull-back map about the world origin. The FFD part is rescaled so its largest
/// displacement over `grid` is exactly ffd_max_mm.
[[nodiscard]] CompositeTransform random_deformation(const DeformationSpec& d, const Grid& grid, std::uint64_t seed);

/// Independent sub-seed k of a master seed (splitmix64 finaliser).
[[nodiscard]] std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k);

/// A new image plus N references, each a randomly deformed copy of the template with its own noise.
struct PhantomCase {
    Phantom target;
    std::vector<Phantom> references;
    std::vector<CompositeTransform> deformations;  ///< target first, then references
};

/// Patient p (0 = target) uses deformation seed derive_seed(seed, 2p) and noise seed derive_seed(seed, 2p + 1).
/// Ids are "new" and "ref1" ... "refN".
[[nodiscard]] PhantomCase make_case(const PhantomSpec& spec, const DeformationSpec& deform, int references,
                                    std::uint64_t seed);

nlohmann::json phantom_spec_to_json(const PhantomSpec& spec);
[[nodiscard]] PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

}  // namespace regprompt
