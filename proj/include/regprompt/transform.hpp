#pragma once

#include <array>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <json.hpp>

#include "regprompt/geometry.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

/// x -> matrix * x + translation, fixed-space world mm to moving-space world mm.
struct AffineTransform {
    Mat3 matrix = Mat3::identity();
    Vec3 translation;

    static AffineTransform identity() { return {}; }
    static AffineTransform translate(const Vec3& d) { return {Mat3::identity(), d}; }

    [[nodiscard]] Vec3 apply(const Vec3& x) const { return matrix * x + translation; }
    /// Analytic inverse; throws DataError when |det| <= 1e-9.
    [[nodiscard]] AffineTransform inverse() const;
    /// this(other(x)).
    [[nodiscard]] AffineTransform after(const AffineTransform& other) const;
    void validate() const;

    friend bool operator==(const AffineTransform&, const AffineTransform&) = default;
};

/// Uniform cubic B-spline basis on the local coordinate u in [0, 1).
namespace bspline {

inline void basis(double u, double w[4]) {
    const double u2 = u * u, u3 = u2 * u, m = 1.0 - u;
    w[0] = m * m * m / 6.0;
    w[1] = (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0;
    w[2] = (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0;
    w[3] = u3 / 6.0;
}

inline void basis_derivative(double u, double w[4]) {
    const double u2 = u * u, m = 1.0 - u;
    w[0] = -0.5 * m * m;
    w[1] = 1.5 * u2 - 2.0 * u;
    w[2] = -1.5 * u2 + u + 0.5;
    w[3] = 0.5 * u2;
}

}  // namespace bspline

/// Tensor-product cubic B-spline displacement field on a regular control lattice.
/// Control point (i, j, k) sits at origin + (i, j, k) * spacing; lattice indices are clamped outside.
class FFDTransform {
public:
    FFDTransform() = default;
    /// Throws DataError unless every lattice axis has >= 4 control points and spacing > 0.
    FFDTransform(Index3 grid_dims, Vec3 spacing, Vec3 origin, std::vector<Vec3> displacements = {});

    /// Smallest lattice covering [lo, hi] (world mm) such that no point in the box touches clamped indices.
    static FFDTransform covering(const Vec3& lo, const Vec3& hi, const Vec3& spacing);

    [[nodiscard]] const Index3& grid_dims() const { return dims_; }
    [[nodiscard]] const Vec3& spacing() const { return spacing_; }
    [[nodiscard]] const Vec3& origin() const { return origin_; }
    [[nodiscard]] std::span<const Vec3> displacements() const { return phi_; }
    [[nodiscard]] std::span<Vec3> displacements() { return phi_; }
    [[nodiscard]] std::size_t control_count() const { return phi_.size(); }
    [[nodiscard]] std::size_t control_index(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * static_cast<std::size_t>(dims_.y) + static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(dims_.x) +
               static_cast<std::size_t>(i);
    }
    [[nodiscard]] Vec3& at(int i, int j, int k) { return phi_[control_index(i, j, k)]; }
    [[nodiscard]] const Vec3& at(int i, int j, int k) const { return phi_[control_index(i, j, k)]; }

    /// Displacement (mm) at world point x.
    [[nodiscard]] Vec3 displacement(const Vec3& x) const;

    /// Same field on a lattice with half the spacing (exact cubic B-spline subdivision away from the border).
    [[nodiscard]] FFDTransform refined() const;

    /// Per-axis support lookup: 4 clamped control indices and basis weights for lattice coordinate l.
    struct AxisSupport {
        std::array<int, 4> index;
        std::array<double, 4> weight;
        std::array<double, 4> derivative;
    };
    [[nodiscard]] AxisSupport axis_support(std::size_t axis, double world) const;

    friend bool operator==(const FFDTransform&, const FFDTransform&) = default;

private:
    Index3 dims_;
    Vec3 spacing_{1, 1, 1};
    Vec3 origin_;
    std::vector<Vec3> phi_;
};

/// Displacement of the cubic B-spline FFD at x.
[[nodiscard]] inline Vec3 bspline_displacement(const FFDTransform& f, const Vec3& x) { return f.displacement(x); }

/// Mean over interior control knots of the summed squared second derivatives of the displacement
/// (mixed terms doubled), evaluated analytically at the knots. Dimensionless: derivatives are taken with
/// respect to lattice index and displacements are divided by the geometric-mean control spacing.
[[nodiscard]] double bending_energy(const FFDTransform& f);
/// As above; also accumulates d(energy)/d(phi) * scale into gradient (one Vec3 per control point).
double bending_energy(const FFDTransform& f, std::span<Vec3> gradient, double scale);

/// Affine followed by an FFD refinement in the affine-mapped frame:
/// T(x) = A(x) + ffd(A(x)).
struct CompositeTransform {
    AffineTransform affine;
    std::optional<FFDTransform> ffd;

    [[nodiscard]] Vec3 apply(const Vec3& x) const {
        const Vec3 y = affine.apply(x);
        return ffd ? y + ffd->displacement(y) : y;
    }

    friend bool operator==(const CompositeTransform&, const CompositeTransform&) = default;
};

/// Displacement vectors (mm) sampled on a reference grid; trilinear in between, clamped outside.
struct DenseDisplacementField {
    Grid grid;
    std::vector<Vec3> vectors;

    [[nodiscard]] Vec3 displacement(const Vec3& x) const;
    [[nodiscard]] Vec3 apply(const Vec3& x) const { return x + displacement(x); }
};

/// A chain of steps applied first to last; FFD and dense-field steps add their displacement.
class SpatialTransform {
public:
    using Step = std::variant<AffineTransform, FFDTransform, DenseDisplacementField>;

    SpatialTransform() = default;
    SpatialTransform(const AffineTransform& a) : steps_{a} {}
    SpatialTransform(const CompositeTransform& c);
    SpatialTransform(DenseDisplacementField f) : steps_{std::move(f)} {}

    [[nodiscard]] Vec3 apply(const Vec3& x) const;
    [[nodiscard]] Vec3 operator()(const Vec3& x) const { return apply(x); }

    /// The chain with displacement steps dropped, collapsed to one affine map.
    [[nodiscard]] AffineTransform affine_part() const;
    [[nodiscard]] const std::vector<Step>& steps() const { return steps_; }
    [[nodiscard]] bool is_identity() const { return steps_.empty(); }

    /// a(b(x)).
    friend SpatialTransform compose_point_map(const SpatialTransform& a, const SpatialTransform& b);

private:
    std::vector<Step> steps_;
};

[[nodiscard]] inline Vec3 apply_point(const SpatialTransform& t, const Vec3& x) { return t.apply(x); }

struct InversionStats {
    double max_residual_mm = 0.0;
    double mean_residual_mm = 0.0;
    double fraction_within_tol = 1.0;
    std::size_t interior_points = 0;
    int max_iterations_used = 0;
    std::size_t jacobian_violations = 0;
};

struct InverseField {
    DenseDisplacementField field;  ///< t^-1(y) = y + field(y) on the requested grid
    InversionStats stats;
};

/// Numerically inverts t on every point of grid by preconditioned fixed-point iteration.
/// Residuals |t(t^-1(u)) - u| are measured on the 2-voxel-eroded interior; throws InversionError
/// when fewer than 99% of those points reach tol_mm.
[[nodiscard]] InverseField invert(const SpatialTransform& t, const Grid& grid, double tol_mm = 0.1,
                                  int max_iter = 100);

/// Samples x -> t(x) - x on grid.
[[nodiscard]] DenseDisplacementField dense_displacement(const SpatialTransform& t, const Grid& grid);

nlohmann::json transform_to_json(const CompositeTransform& t);
/// Throws DataError on schema violations.
[[nodiscard]] CompositeTransform transform_from_json(const nlohmann::json& j);

}  // namespace regprompt
