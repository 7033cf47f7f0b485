#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "regprompt/transform.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

enum class AffineDof { rigid_scale9, full12 };

struct RegistrationConfig {
    int pyramid_levels = 3;
    AffineDof affine_dof = AffineDof::rigid_scale9;
    double bending_weight = 0.65;
    /// Final FFD control spacing in voxels of the fixed image (per axis, converted with its spacing).
    double control_spacing_voxels = 5.0;
    /// Overrides control_spacing_voxels when set (mm per axis).
    std::optional<Vec3> control_spacing_mm;
    int affine_max_iters = 200;
    int ffd_max_iters = 300;
    double convergence_tol = 1e-6;
    int convergence_window = 5;
    bool enable_ffd = true;
    double armijo_c = 1e-4;
    double step_shrink = 0.5;
    double max_step_voxels = 2.0;

    /// Throws PreconditionError on invalid values.
    void validate() const;
};

nlohmann::json config_to_json(const RegistrationConfig& cfg);
/// Missing keys keep their defaults; unknown keys and bad values raise DataError.
[[nodiscard]] RegistrationConfig config_from_json(const nlohmann::json& j);

struct LevelSummary {
    std::string stage;  ///< "affine" or "ffd"
    int level = 0;      ///< 0 = coarsest
    Index3 dims;
    int iterations = 0;
    double initial_cost = 0.0;
    double final_cost = 0.0;
    std::string stop_reason;
    std::vector<double> cost_trace;  ///< accepted objective values, starting with the initial one
};

struct RegistrationResult {
    CompositeTransform transform;
    double final_cost = 0.0;
    std::vector<double> cost_trace;  ///< all levels concatenated
    std::vector<LevelSummary> levels;
};

nlohmann::json result_summary_json(const RegistrationResult& r);

/// Mean squared intensity difference over fixed voxels whose mapped point lands inside the voxel footprint
/// of moving (centres +- half a voxel; sampling clamps to the outermost centres).
/// Throws RegistrationError when no voxel overlaps.
[[nodiscard]] double ssd(const Volume3D& fixed, const Volume3D& moving, const SpatialTransform& t);

/// Affine-only registration (pull-back map fixed world -> moving world).
[[nodiscard]] RegistrationResult register_affine(const Volume3D& fixed, const Volume3D& moving,
                                                 const RegistrationConfig& cfg);

/// FFD stage on top of a fixed affine initialisation; minimises SSD + bending_weight * bending energy.
[[nodiscard]] RegistrationResult register_ffd(const Volume3D& fixed, const Volume3D& moving,
                                              const AffineTransform& init, const RegistrationConfig& cfg);

/// Affine then (unless disabled) FFD.
[[nodiscard]] RegistrationResult register_images(const Volume3D& fixed, const Volume3D& moving,
                                                 const RegistrationConfig& cfg);

/// 2x2x2 block average with spacing doubled (partial blocks at odd edges are averaged over what exists).
[[nodiscard]] Volume3D downsample(const Volume3D& v);

/// Rotation, scale, translation (and optional shear) about a fixed centre. Rotation, log-scale and shear
/// parameters are stored multiplied by `radius` so one unit of any parameter moves points by roughly 1 mm.
class AffineParameterization {
public:
    AffineParameterization(Vec3 center, double radius, AffineDof dof);

    [[nodiscard]] std::size_t size() const { return dof_ == AffineDof::full12 ? 12 : 9; }
    [[nodiscard]] AffineTransform to_transform(std::span<const double> p) const;
    /// d(matrix)/d(p_j) for the non-translation parameters j >= 3.
    [[nodiscard]] Mat3 matrix_derivative(std::span<const double> p, std::size_t j) const;
    /// Parameters reproducing a transform whose matrix is rotation * shear * scale (translation only: exact).
    [[nodiscard]] std::vector<double> identity() const { return std::vector<double>(size(), 0.0); }

    [[nodiscard]] const Vec3& center() const { return center_; }
    [[nodiscard]] double radius() const { return radius_; }

private:
    Vec3 center_;
    double radius_;
    AffineDof dof_;
};

/// Mean-SSD objective over affine parameters with analytic gradient.
class AffineObjective {
public:
    AffineObjective(const Volume3D& fixed, const Volume3D& moving, AffineParameterization param);

    /// Throws RegistrationError on empty overlap.
    [[nodiscard]] double value(std::span<const double> p) const;
    double value_and_gradient(std::span<const double> p, std::span<double> gradient) const;
    [[nodiscard]] const AffineParameterization& parameterization() const { return param_; }

private:
    double evaluate(std::span<const double> p, std::span<double> gradient) const;

    const Volume3D& fixed_;
    const Volume3D& moving_;
    AffineParameterization param_;
};

/// SSD(fixed, moving o (A + ffd o A)) + bending_weight * bending_energy(ffd), over control displacements.
class FfdObjective {
public:
    FfdObjective(const Volume3D& fixed, const Volume3D& moving, AffineTransform affine, FFDTransform lattice,
                 double bending_weight);

    [[nodiscard]] std::size_t parameter_count() const { return 3 * lattice_.control_count(); }
    /// Parameters are control displacements flattened as (x, y, z) per control point.
    [[nodiscard]] double value(std::span<const double> phi) const;
    double value_and_gradient(std::span<const double> phi, std::span<double> gradient) const;
    /// SSD part only at the given parameters.
    [[nodiscard]] double similarity(std::span<const double> phi) const;

    [[nodiscard]] FFDTransform lattice_with(std::span<const double> phi) const;
    [[nodiscard]] const FFDTransform& lattice() const { return lattice_; }

private:
    double evaluate(std::span<const double> phi, std::span<double> gradient, bool with_bending) const;

    /// B-spline weights (x, y, z blocks of 4) and flat index of the first control point of a fixed voxel's
    /// support; base < 0 marks voxels whose support is clamped at the lattice border.
    struct Support {
        std::array<double, 12> w;
        std::int64_t base;
    };

    const Volume3D& fixed_;
    const Volume3D& moving_;
    AffineTransform affine_;
    FFDTransform lattice_;
    double bending_weight_;
    std::vector<Support> support_;
};

}  // namespace regprompt
