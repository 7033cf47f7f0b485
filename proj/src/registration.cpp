#include "regprompt/registration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "regprompt/log.hpp"

namespace regprompt {

using nlohmann::json;

// ---------------------------------------------------------------------------------------------
// Config

void RegistrationConfig::validate() const {
    if (pyramid_levels < 1) throw PreconditionError("pyramid_levels must be >= 1");
    if (!(bending_weight >= 0.0) || !std::isfinite(bending_weight)) throw PreconditionError("bending_weight must be >= 0");
    if (!(control_spacing_voxels > 0.0)) throw PreconditionError("control_spacing_voxels must be > 0");
    if (control_spacing_mm)
        for (std::size_t a = 0; a < 3; ++a)
            if (!((*control_spacing_mm)[a] > 0.0)) throw PreconditionError("control_spacing_mm must be > 0");
    if (affine_max_iters < 0 || ffd_max_iters < 0) throw PreconditionError("iteration limits must be >= 0");
    if (convergence_window < 1) throw PreconditionError("convergence_window must be >= 1");
    if (!(armijo_c > 0.0 && armijo_c < 1.0)) throw PreconditionError("armijo_c must lie in (0, 1)");
    if (!(step_shrink > 0.0 && step_shrink < 1.0)) throw PreconditionError("step_shrink must lie in (0, 1)");
    if (!(max_step_voxels > 0.0)) throw PreconditionError("max_step_voxels must be > 0");
}

json config_to_json(const RegistrationConfig& c) {
    json j{{"pyramid_levels", c.pyramid_levels},
           {"affine_dof", c.affine_dof == AffineDof::full12 ? 12 : 9},
           {"similarity", "ssd"},
           {"bending_weight", c.bending_weight},
           {"control_spacing_voxels", c.control_spacing_voxels},
           {"affine_max_iters", c.affine_max_iters},
           {"ffd_max_iters", c.ffd_max_iters},
           {"convergence_tol", c.convergence_tol},
           {"convergence_window", c.convergence_window},
           {"enable_ffd", c.enable_ffd},
           {"armijo_c", c.armijo_c},
           {"step_shrink", c.step_shrink},
           {"max_step_voxels", c.max_step_voxels}};
    if (c.control_spacing_mm)
        j["control_spacing_mm"] = {c.control_spacing_mm->x, c.control_spacing_mm->y, c.control_spacing_mm->z};
    return j;
}

RegistrationConfig config_from_json(const json& j) {
    if (!j.is_object()) throw DataError("registration config must be a JSON object");
    RegistrationConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "pyramid_levels") c.pyramid_levels = value.get<int>();
            else if (key == "affine_dof") {
                const int dof = value.get<int>();
                if (dof != 9 && dof != 12) throw DataError("affine_dof must be 9 or 12");
                c.affine_dof = dof == 12 ? AffineDof::full12 : AffineDof::rigid_scale9;
            } else if (key == "similarity") {
                if (value.get<std::string>() != "ssd") throw DataError("only the ssd similarity is supported");
            } else if (key == "bending_weight") c.bending_weight = value.get<double>();
            else if (key == "control_spacing_voxels") c.control_spacing_voxels = value.get<double>();
            else if (key == "control_spacing_mm") {
                if (value.is_null()) continue;
                const auto s = value.get<std::vector<double>>();
                if (s.size() != 3) throw DataError("control_spacing_mm needs 3 entries");
                c.control_spacing_mm = Vec3{s[0], s[1], s[2]};
            } else if (key == "affine_max_iters") c.affine_max_iters = value.get<int>();
            else if (key == "ffd_max_iters") c.ffd_max_iters = value.get<int>();
            else if (key == "convergence_tol") c.convergence_tol = value.get<double>();
            else if (key == "convergence_window") c.convergence_window = value.get<int>();
            else if (key == "enable_ffd") c.enable_ffd = value.get<bool>();
            else if (key == "armijo_c") c.armijo_c = value.get<double>();
            else if (key == "step_shrink") c.step_shrink = value.get<double>();
            else if (key == "max_step_voxels") c.max_step_voxels = value.get<double>();
            else throw DataError("unknown registration config key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed registration config: ") + e.what());
    }
    try {
        c.validate();
    } catch (const PreconditionError& e) {
        throw DataError(e.what());
    }
    return c;
}

json result_summary_json(const RegistrationResult& r) {
    json levels = json::array();
    for (const auto& l : r.levels)
        levels.push_back({{"stage", l.stage},
                          {"level", l.level},
                          {"dims", {l.dims.x, l.dims.y, l.dims.z}},
                          {"iterations", l.iterations},
                          {"initial_cost", l.initial_cost},
                          {"final_cost", l.final_cost},
                          {"stop_reason", l.stop_reason}});
    return {{"final_cost", r.final_cost}, {"levels", std::move(levels)}};
}

// ---------------------------------------------------------------------------------------------
// Sampling helpers

namespace {

struct VoxelSampler {
    const float* data;
    Index3 dims;
    std::size_t sy, sz;

    explicit VoxelSampler(const Volume3D& v)
        : data(v.data().data()), dims(v.dims()),
          sy(static_cast<std::size_t>(v.dims().x)),
          sz(static_cast<std::size_t>(v.dims().x) * static_cast<std::size_t>(v.dims().y)) {}

    /// Inside the voxel footprint of the image: centres +- half a voxel.
    [[nodiscard]] bool inside(double u, double v, double w) const {
        return u >= -0.5 && v >= -0.5 && w >= -0.5 && u <= dims.x - 0.5 && v <= dims.y - 0.5 && w <= dims.z - 0.5;
    }

    /// Trilinear value and voxel-space gradient, coordinates clamped to the centre lattice (the clamped
    /// axis has zero derivative); caller checks inside().
    double value_gradient(double u, double v, double w, Vec3& grad) const {
        const bool cu = u < 0.0 || u > dims.x - 1, cv = v < 0.0 || v > dims.y - 1, cw = w < 0.0 || w > dims.z - 1;
        u = std::clamp(u, 0.0, static_cast<double>(dims.x - 1));
        v = std::clamp(v, 0.0, static_cast<double>(dims.y - 1));
        w = std::clamp(w, 0.0, static_cast<double>(dims.z - 1));
        const int i0 = std::min(static_cast<int>(u), std::max(dims.x - 2, 0));
        const int j0 = std::min(static_cast<int>(v), std::max(dims.y - 2, 0));
        const int k0 = std::min(static_cast<int>(w), std::max(dims.z - 2, 0));
        const std::size_t di = dims.x > 1 ? 1 : 0, dj = dims.y > 1 ? sy : 0, dk = dims.z > 1 ? sz : 0;
        const double tx = u - i0, ty = v - j0, tz = w - k0;
        const float* p = data + static_cast<std::size_t>(k0) * sz + static_cast<std::size_t>(j0) * sy +
                         static_cast<std::size_t>(i0);
        const double c000 = p[0], c100 = p[di], c010 = p[dj], c110 = p[dj + di];
        const double c001 = p[dk], c101 = p[dk + di], c011 = p[dk + dj], c111 = p[dk + dj + di];
        const double c00 = c000 + tx * (c100 - c000), c10 = c010 + tx * (c110 - c010);
        const double c01 = c001 + tx * (c101 - c001), c11 = c011 + tx * (c111 - c011);
        const double c0 = c00 + ty * (c10 - c00), c1 = c01 + ty * (c11 - c01);
        grad.z = c1 - c0;
        grad.y = (c10 - c00) * (1 - tz) + (c11 - c01) * tz;
        const double dx00 = c100 - c000, dx10 = c110 - c010, dx01 = c101 - c001, dx11 = c111 - c011;
        grad.x = (dx00 * (1 - ty) + dx10 * ty) * (1 - tz) + (dx01 * (1 - ty) + dx11 * ty) * tz;
        if (cu) grad.x = 0.0;
        if (cv) grad.y = 0.0;
        if (cw) grad.z = 0.0;
        return c0 + tz * (c1 - c0);
    }

    [[nodiscard]] double value(double u, double v, double w) const {
        Vec3 g;
        return value_gradient(u, v, w, g);
    }
};

/// Map voxel index -> a world-affine quantity: base + i*di + j*dj + k*dk.
struct IndexAffine {
    Vec3 base, di, dj, dk;
};

IndexAffine index_affine(const Grid& g, const AffineTransform& a, const Grid* target) {
    // world(i,j,k) = origin + diag(spacing) (i,j,k); then a; then optionally to target voxel coords.
    Vec3 base = a.apply(g.origin);
    Vec3 ex = a.matrix * Vec3{g.spacing.x, 0, 0};
    Vec3 ey = a.matrix * Vec3{0, g.spacing.y, 0};
    Vec3 ez = a.matrix * Vec3{0, 0, g.spacing.z};
    if (target) {
        base = divide(base - target->origin, target->spacing);
        ex = divide(ex, target->spacing);
        ey = divide(ey, target->spacing);
        ez = divide(ez, target->spacing);
    }
    return {base, ex, ey, ez};
}

double mean_or_throw(double sum, std::size_t count) {
    if (count == 0) throw RegistrationError("no overlap between the mapped fixed grid and the moving image");
    return sum / static_cast<double>(count);
}

double max_intensity(const Volume3D& v) {
    double m = 0.0;
    for (float f : v.data()) m = std::max(m, static_cast<double>(f));
    return m;
}

Volume3D scaled(const Volume3D& v, double factor) {
    std::vector<float> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * factor);
    return Volume3D(v.grid(), VolumeKind::intensity, std::move(out));
}

}  // namespace

double ssd(const Volume3D& fixed, const Volume3D& moving, const SpatialTransform& t) {
    const VoxelSampler ms(moving);
    double sum = 0.0;
    std::size_t count = 0;
    std::size_t idx = 0;
    const Grid& fg = fixed.grid();
    for (int k = 0; k < fg.dims.z; ++k)
        for (int j = 0; j < fg.dims.y; ++j)
            for (int i = 0; i < fg.dims.x; ++i, ++idx) {
                const VoxelCoord c = moving.grid().to_voxel(t.apply(fg.to_world(i, j, k)));
                if (!ms.inside(c.u, c.v, c.w)) continue;
                const double r = fixed[idx] - ms.value(c.u, c.v, c.w);
                sum += r * r;
                ++count;
            }
    return mean_or_throw(sum, count);
}

Volume3D downsample(const Volume3D& v) {
    const Grid& g = v.grid();
    Grid out;
    for (std::size_t a = 0; a < 3; ++a) {
        out.dims[a] = g.dims[a] > 1 ? (g.dims[a] + 1) / 2 : 1;
        const double factor = g.dims[a] > 1 ? 2.0 : 1.0;
        out.spacing[a] = g.spacing[a] * factor;
        out.origin[a] = g.origin[a] + (factor - 1.0) * 0.5 * g.spacing[a];
    }
    std::vector<float> data(out.voxel_count());
    std::size_t idx = 0;
    for (int k = 0; k < out.dims.z; ++k)
        for (int j = 0; j < out.dims.y; ++j)
            for (int i = 0; i < out.dims.x; ++i, ++idx) {
                double sum = 0.0;
                int n = 0;
                for (int dk = 0; dk < 2; ++dk)
                    for (int dj = 0; dj < 2; ++dj)
                        for (int di = 0; di < 2; ++di) {
                            const int si = g.dims.x > 1 ? 2 * i + di : i;
                            const int sj = g.dims.y > 1 ? 2 * j + dj : j;
                            const int sk = g.dims.z > 1 ? 2 * k + dk : k;
                            if ((g.dims.x == 1 && di) || (g.dims.y == 1 && dj) || (g.dims.z == 1 && dk)) continue;
                            if (si >= g.dims.x || sj >= g.dims.y || sk >= g.dims.z) continue;
                            sum += v.at(si, sj, sk);
                            ++n;
                        }
                data[idx] = static_cast<float>(sum / n);
            }
    return Volume3D(out, VolumeKind::intensity, std::move(data));
}

// ---------------------------------------------------------------------------------------------
// Affine parameterization

namespace {

Mat3 rot_x(double a, bool d) {
    const double c = std::cos(a), s = std::sin(a);
    return d ? Mat3{{0, 0, 0, 0, -s, -c, 0, c, -s}} : Mat3{{1, 0, 0, 0, c, -s, 0, s, c}};
}
Mat3 rot_y(double a, bool d) {
    const double c = std::cos(a), s = std::sin(a);
    return d ? Mat3{{-s, 0, c, 0, 0, 0, -c, 0, -s}} : Mat3{{c, 0, s, 0, 1, 0, -s, 0, c}};
}
Mat3 rot_z(double a, bool d) {
    const double c = std::cos(a), s = std::sin(a);
    return d ? Mat3{{-s, -c, 0, c, -s, 0, 0, 0, 0}} : Mat3{{c, -s, 0, s, c, 0, 0, 0, 1}};
}

}  // namespace

AffineParameterization::AffineParameterization(Vec3 center, double radius, AffineDof dof)
    : center_(center), radius_(radius), dof_(dof) {
    if (!(radius_ > 0.0)) throw PreconditionError("parameter radius must be positive");
}

namespace {

struct AffineParts {
    Mat3 rx, ry, rz, shear, scale;
};

AffineParts parts(std::span<const double> p, double radius, bool full) {
    AffineParts q;
    q.rx = rot_x(p[3] / radius, false);
    q.ry = rot_y(p[4] / radius, false);
    q.rz = rot_z(p[5] / radius, false);
    q.scale = Mat3::diagonal({std::exp(p[6] / radius), std::exp(p[7] / radius), std::exp(p[8] / radius)});
    q.shear = Mat3::identity();
    if (full) {
        q.shear(0, 1) = p[9] / radius;
        q.shear(0, 2) = p[10] / radius;
        q.shear(1, 2) = p[11] / radius;
    }
    return q;
}

}  // namespace

AffineTransform AffineParameterization::to_transform(std::span<const double> p) const {
    const AffineParts q = parts(p, radius_, dof_ == AffineDof::full12);
    const Mat3 m = q.rz * q.ry * q.rx * q.shear * q.scale;
    const Vec3 t{p[0], p[1], p[2]};
    return {m, center_ + t - m * center_};
}

Mat3 AffineParameterization::matrix_derivative(std::span<const double> p, std::size_t j) const {
    const AffineParts q = parts(p, radius_, dof_ == AffineDof::full12);
    const double inv_r = 1.0 / radius_;
    Mat3 d;
    switch (j) {
        case 3: d = q.rz * q.ry * rot_x(p[3] / radius_, true) * q.shear * q.scale; break;
        case 4: d = q.rz * rot_y(p[4] / radius_, true) * q.rx * q.shear * q.scale; break;
        case 5: d = rot_z(p[5] / radius_, true) * q.ry * q.rx * q.shear * q.scale; break;
        case 6:
        case 7:
        case 8: {
            Mat3 ds = Mat3::zero();
            const int a = static_cast<int>(j - 6);
            ds(a, a) = q.scale(a, a);
            d = q.rz * q.ry * q.rx * q.shear * ds;
            break;
        }
        case 9:
        case 10:
        case 11: {
            Mat3 dh = Mat3::zero();
            if (j == 9) dh(0, 1) = 1.0;
            if (j == 10) dh(0, 2) = 1.0;
            if (j == 11) dh(1, 2) = 1.0;
            d = q.rz * q.ry * q.rx * dh * q.scale;
            break;
        }
        default: throw PreconditionError("no matrix derivative for translation parameters");
    }
    for (double& v : d.m) v *= inv_r;
    return d;
}

// ---------------------------------------------------------------------------------------------
// Affine objective

AffineObjective::AffineObjective(const Volume3D& fixed, const Volume3D& moving, AffineParameterization param)
    : fixed_(fixed), moving_(moving), param_(param) {}

double AffineObjective::value(std::span<const double> p) const { return evaluate(p, {}); }

double AffineObjective::value_and_gradient(std::span<const double> p, std::span<double> gradient) const {
    if (gradient.size() != param_.size()) throw PreconditionError("gradient buffer size mismatch");
    return evaluate(p, gradient);
}

double AffineObjective::evaluate(std::span<const double> p, std::span<double> gradient) const {
    const AffineTransform a = param_.to_transform(p);
    const Grid& fg = fixed_.grid();
    const Grid& mg = moving_.grid();
    const IndexAffine map = index_affine(fg, a, &mg);
    const VoxelSampler ms(moving_);
    const float* fd = fixed_.data().data();
    const bool want_grad = !gradient.empty();
    const Vec3 inv_ms{1.0 / mg.spacing.x, 1.0 / mg.spacing.y, 1.0 / mg.spacing.z};
    const Vec3 c = param_.center();

    double sum = 0.0;
    std::size_t count = 0;
    Mat3 outer = Mat3::zero();  // sum r * grad_world (x) (x - c)
    Vec3 lin;                   // sum r * grad_world
    std::size_t idx = 0;
    for (int k = 0; k < fg.dims.z; ++k) {
        for (int j = 0; j < fg.dims.y; ++j) {
            Vec3 mv = map.base + map.dj * j + map.dk * k;
            const Vec3 row_rel = fg.to_world(0, j, k) - c;
            Mat3 row_outer = Mat3::zero();
            Vec3 row_lin;
            Vec3 row_gx;
            for (int i = 0; i < fg.dims.x; ++i, ++idx, mv += map.di) {
                if (!ms.inside(mv.x, mv.y, mv.z)) continue;
                Vec3 gv;
                const double m = ms.value_gradient(mv.x, mv.y, mv.z, gv);
                const double r = fd[idx] - m;
                sum += r * r;
                ++count;
                if (want_grad) {
                    const Vec3 gw = hadamard(gv, inv_ms) * r;
                    row_lin += gw;
                    row_gx += gw * static_cast<double>(i);
                }
            }
            if (want_grad) {
                // sum_i gw_i (x) (row_rel + i * sx e_x) = row_lin (x) row_rel + row_gx (x) (sx e_x)
                for (int r = 0; r < 3; ++r)
                    for (int q = 0; q < 3; ++q)
                        row_outer(r, q) = row_lin[static_cast<std::size_t>(r)] * row_rel[static_cast<std::size_t>(q)];
                for (int r = 0; r < 3; ++r) row_outer(r, 0) += row_gx[static_cast<std::size_t>(r)] * fg.spacing.x;
                for (std::size_t e = 0; e < 9; ++e) outer.m[e] += row_outer.m[e];
                lin += row_lin;
            }
        }
    }
    const double cost = mean_or_throw(sum, count);
    if (want_grad) {
        const double scale = -2.0 / static_cast<double>(count);
        gradient[0] = scale * lin.x;
        gradient[1] = scale * lin.y;
        gradient[2] = scale * lin.z;
        for (std::size_t jp = 3; jp < param_.size(); ++jp) {
            const Mat3 dm = param_.matrix_derivative(p, jp);
            double acc = 0.0;
            for (std::size_t e = 0; e < 9; ++e) acc += dm.m[e] * outer.m[e];
            gradient[jp] = scale * acc;
        }
    }
    return cost;
}

// ---------------------------------------------------------------------------------------------
// FFD objective

FfdObjective::FfdObjective(const Volume3D& fixed, const Volume3D& moving, AffineTransform affine,
                           FFDTransform lattice, double bending_weight)
    : fixed_(fixed), moving_(moving), affine_(affine), lattice_(std::move(lattice)), bending_weight_(bending_weight) {
    // The affine stays fixed during the FFD stage, so every fixed voxel keeps the same lattice support.
    const Grid& fg = fixed_.grid();
    const IndexAffine world = index_affine(fg, affine_, nullptr);
    const Vec3 lsp = lattice_.spacing(), lo = lattice_.origin();
    const Index3 ld = lattice_.grid_dims();
    support_.resize(fg.voxel_count());
    std::size_t idx = 0;
    for (int k = 0; k < fg.dims.z; ++k)
        for (int j = 0; j < fg.dims.y; ++j) {
            Vec3 y = world.base + world.dj * j + world.dk * k;
            for (int i = 0; i < fg.dims.x; ++i, ++idx, y += world.di) {
                Support& s = support_[idx];
                int first[3];
                bool clamped = false;
                for (std::size_t a = 0; a < 3; ++a) {
                    const double l = (y[a] - lo[a]) / lsp[a];
                    const double fl = std::floor(l);
                    bspline::basis(l - fl, &s.w[4 * a]);
                    first[a] = static_cast<int>(fl) - 1;
                    clamped = clamped || first[a] < 0 || first[a] + 3 > ld[a] - 1;
                }
                s.base = clamped ? -1 : static_cast<std::int64_t>(lattice_.control_index(first[0], first[1], first[2]));
            }
        }
}

double FfdObjective::value(std::span<const double> phi) const { return evaluate(phi, {}, true); }

double FfdObjective::similarity(std::span<const double> phi) const { return evaluate(phi, {}, false); }

double FfdObjective::value_and_gradient(std::span<const double> phi, std::span<double> gradient) const {
    if (gradient.size() != parameter_count()) throw PreconditionError("gradient buffer size mismatch");
    return evaluate(phi, gradient, true);
}

FFDTransform FfdObjective::lattice_with(std::span<const double> phi) const {
    if (phi.size() != parameter_count()) throw PreconditionError("parameter count mismatch");
    FFDTransform f = lattice_;
    auto d = f.displacements();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = {phi[3 * i], phi[3 * i + 1], phi[3 * i + 2]};
    return f;
}

double FfdObjective::evaluate(std::span<const double> phi, std::span<double> gradient, bool with_bending) const {
    if (phi.size() != parameter_count()) throw PreconditionError("parameter count mismatch");
    const Grid& fg = fixed_.grid();
    const Grid& mg = moving_.grid();
    const VoxelSampler ms(moving_);
    const float* fd = fixed_.data().data();
    const bool want_grad = !gradient.empty();
    if (want_grad) std::fill(gradient.begin(), gradient.end(), 0.0);

    const IndexAffine world = index_affine(fg, affine_, nullptr);
    const Vec3 lsp = lattice_.spacing(), lo = lattice_.origin();
    const Index3 ld = lattice_.grid_dims();
    const Vec3 inv_ms{1.0 / mg.spacing.x, 1.0 / mg.spacing.y, 1.0 / mg.spacing.z};
    const std::size_t lsy = static_cast<std::size_t>(ld.x), lsz = static_cast<std::size_t>(ld.x) * ld.y;

    double sum = 0.0;
    std::size_t count = 0;
    std::size_t idx = 0;
    // Flat control index of support point (a, b, c) is off[a] + row[4 * c + b].
    std::array<std::size_t, 4> off{};
    std::array<std::size_t, 16> row{};
    auto clamped_support = [&](const Vec3& y) {
        int ix[4], iy[4], iz[4];
        const auto fill = [](double l, int n, int out[4]) {
            const int base = static_cast<int>(std::floor(l)) - 1;
            for (int q = 0; q < 4; ++q) out[q] = std::clamp(base + q, 0, n - 1);
        };
        fill((y.x - lo.x) / lsp.x, ld.x, ix);
        fill((y.y - lo.y) / lsp.y, ld.y, iy);
        fill((y.z - lo.z) / lsp.z, ld.z, iz);
        for (int q = 0; q < 4; ++q) off[static_cast<std::size_t>(q)] = static_cast<std::size_t>(ix[q]);
        for (int c = 0; c < 4; ++c)
            for (int b = 0; b < 4; ++b)
                row[static_cast<std::size_t>(4 * c + b)] =
                    static_cast<std::size_t>(iz[c]) * lsz + static_cast<std::size_t>(iy[b]) * lsy;
    };
    std::array<std::size_t, 16> fast_row{};
    for (int c = 0; c < 4; ++c)
        for (int b = 0; b < 4; ++b) fast_row[static_cast<std::size_t>(4 * c + b)] = static_cast<std::size_t>(c) * lsz + static_cast<std::size_t>(b) * lsy;

    const double* p = phi.data();
    double* gp = want_grad ? gradient.data() : nullptr;
    for (int k = 0; k < fg.dims.z; ++k) {
        for (int j = 0; j < fg.dims.y; ++j) {
            Vec3 y = world.base + world.dj * j + world.dk * k;
            for (int i = 0; i < fg.dims.x; ++i, ++idx, y += world.di) {
                const Support& s = support_[idx];
                const double* wx = &s.w[0];
                const double* wy = &s.w[4];
                const double* wz = &s.w[8];
                if (s.base >= 0) {
                    const std::size_t b0 = static_cast<std::size_t>(s.base);
                    for (std::size_t q = 0; q < 4; ++q) off[q] = b0 + q;
                    row = fast_row;
                } else {
                    clamped_support(y);
                }
                double dx = 0, dy = 0, dz = 0;
                for (int c = 0; c < 4; ++c) {
                    double px = 0, py = 0, pz = 0;
                    for (int b = 0; b < 4; ++b) {
                        const std::size_t r = row[static_cast<std::size_t>(4 * c + b)];
                        const double* q0 = p + 3 * (r + off[0]);
                        const double* q1 = p + 3 * (r + off[1]);
                        const double* q2 = p + 3 * (r + off[2]);
                        const double* q3 = p + 3 * (r + off[3]);
                        const double rx = wx[0] * q0[0] + wx[1] * q1[0] + wx[2] * q2[0] + wx[3] * q3[0];
                        const double ry = wx[0] * q0[1] + wx[1] * q1[1] + wx[2] * q2[1] + wx[3] * q3[1];
                        const double rz = wx[0] * q0[2] + wx[1] * q1[2] + wx[2] * q2[2] + wx[3] * q3[2];
                        px += wy[b] * rx;
                        py += wy[b] * ry;
                        pz += wy[b] * rz;
                    }
                    dx += wz[c] * px;
                    dy += wz[c] * py;
                    dz += wz[c] * pz;
                }
                const double mu = (y.x + dx - mg.origin.x) * inv_ms.x;
                const double mv = (y.y + dy - mg.origin.y) * inv_ms.y;
                const double mw = (y.z + dz - mg.origin.z) * inv_ms.z;
                if (!ms.inside(mu, mv, mw)) continue;
                Vec3 gv;
                const double m = ms.value_gradient(mu, mv, mw, gv);
                const double r = fd[idx] - m;
                sum += r * r;
                ++count;
                if (want_grad) {
                    const double gx = r * gv.x * inv_ms.x, gy = r * gv.y * inv_ms.y, gz = r * gv.z * inv_ms.z;
                    for (int c = 0; c < 4; ++c)
                        for (int b = 0; b < 4; ++b) {
                            const double wbc = wz[c] * wy[b];
                            const std::size_t rr = row[static_cast<std::size_t>(4 * c + b)];
                            const double fx = wbc * gx, fy = wbc * gy, fz = wbc * gz;
                            for (std::size_t a = 0; a < 4; ++a) {
                                double* g = gp + 3 * (rr + off[a]);
                                g[0] += wx[a] * fx;
                                g[1] += wx[a] * fy;
                                g[2] += wx[a] * fz;
                            }
                        }
                }
            }
        }
    }
    double cost = mean_or_throw(sum, count);
    if (want_grad) {
        const double scale = -2.0 / static_cast<double>(count);
        for (double& g : gradient) g *= scale;
    }
    if (with_bending && bending_weight_ > 0.0) {
        const FFDTransform f = lattice_with(phi);
        if (want_grad) {
            std::vector<Vec3> bg(f.control_count());
            cost += bending_weight_ * bending_energy(f, bg, 1.0);
            for (std::size_t c = 0; c < bg.size(); ++c) {
                gradient[3 * c] += bending_weight_ * bg[c].x;
                gradient[3 * c + 1] += bending_weight_ * bg[c].y;
                gradient[3 * c + 2] += bending_weight_ * bg[c].z;
            }
        } else {
            cost += bending_weight_ * bending_energy(f);
        }
    }
    return cost;
}

// ---------------------------------------------------------------------------------------------
// Optimizer

namespace {

struct DescentOptions {
    int max_iters;
    double tol;
    int window;
    double armijo_c;
    double shrink;
};

/// Steepest descent with backtracking Armijo line search. `step_cap(p, g)` bounds the step length so the
/// proposed update moves points by at most the configured number of voxels.
template <typename ValueGrad, typename StepCap>
LevelSummary steepest_descent(std::vector<double>& p, const ValueGrad& value_grad, const StepCap& step_cap,
                              const DescentOptions& opt) {
    LevelSummary s;
    std::vector<double> g(p.size()), trial(p.size()), trial_g(p.size());
    double f = value_grad(p, g);
    s.initial_cost = f;
    s.cost_trace.push_back(f);
    double alpha = -1.0;
    bool grow = true;  // the previous step was accepted without backtracking
    s.stop_reason = "max-iterations";
    for (int it = 0; it < opt.max_iters; ++it) {
        double g2 = 0.0;
        for (double v : g) g2 += v * v;
        if (g2 == 0.0 || !std::isfinite(g2)) {
            s.stop_reason = "zero-gradient";
            break;
        }
        const double cap = step_cap(p, g);
        double a = alpha < 0.0 ? cap : std::min(grow ? 2.0 * alpha : alpha, cap);
        bool accepted = false;
        double f_new = f;
        int tries = 0;
        for (; tries < 40; ++tries) {
            for (std::size_t q = 0; q < p.size(); ++q) trial[q] = p[q] - a * g[q];
            try {
                f_new = value_grad(trial, trial_g);
            } catch (const RegistrationError&) {
                f_new = std::numeric_limits<double>::infinity();
            }
            if (f_new <= f - opt.armijo_c * a * g2) {
                accepted = true;
                break;
            }
            a *= opt.shrink;
        }
        if (!accepted) {
            s.stop_reason = "line-search";
            break;
        }
        p.swap(trial);
        g.swap(trial_g);
        f = f_new;
        alpha = a;
        grow = tries == 0;
        ++s.iterations;
        s.cost_trace.push_back(f);
        const std::size_t n = s.cost_trace.size();
        if (n > static_cast<std::size_t>(opt.window)) {
            const double past = s.cost_trace[n - 1 - static_cast<std::size_t>(opt.window)];
            const double rel = (past - f) / std::max(std::abs(past), 1e-300);
            if (rel < opt.tol) {
                s.stop_reason = "converged";
                break;
            }
        }
    }
    s.final_cost = f;
    return s;
}

struct Pyramid {
    std::vector<Volume3D> fixed, moving;  // index 0 = coarsest
};

Pyramid build_pyramid(const Volume3D& fixed, const Volume3D& moving, int levels) {
    Pyramid py;
    py.fixed.resize(static_cast<std::size_t>(levels));
    py.moving.resize(static_cast<std::size_t>(levels));
    py.fixed.back() = fixed;
    py.moving.back() = moving;
    for (int l = levels - 2; l >= 0; --l) {
        py.fixed[static_cast<std::size_t>(l)] = downsample(py.fixed[static_cast<std::size_t>(l) + 1]);
        py.moving[static_cast<std::size_t>(l)] = downsample(py.moving[static_cast<std::size_t>(l) + 1]);
    }
    return py;
}

struct Prescaled {
    Volume3D fixed, moving;
};

Prescaled prescale(const Volume3D& fixed, const Volume3D& moving) {
    const double m = max_intensity(fixed);
    const double factor = m > 0.0 ? 1.0 / m : 1.0;
    return {scaled(fixed, factor), scaled(moving, factor)};
}

double min_spacing(const Grid& g) { return std::min({g.spacing.x, g.spacing.y, g.spacing.z}); }

Vec3 grid_center(const Grid& g) {
    return g.to_world((g.dims.x - 1) * 0.5, (g.dims.y - 1) * 0.5, (g.dims.z - 1) * 0.5);
}

double grid_radius(const Grid& g) {
    double r2 = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
        const double n = g.dims[a];
        r2 += (n * n - 1.0) / 12.0 * g.spacing[a] * g.spacing[a];
    }
    return std::max(std::sqrt(r2), 1.0);
}

std::array<Vec3, 8> grid_corners(const Grid& g) {
    std::array<Vec3, 8> c;
    for (int q = 0; q < 8; ++q)
        c[static_cast<std::size_t>(q)] =
            g.to_world(q & 1 ? g.dims.x - 1 : 0, q & 2 ? g.dims.y - 1 : 0, q & 4 ? g.dims.z - 1 : 0);
    return c;
}

DescentOptions descent_options(const RegistrationConfig& cfg, int max_iters) {
    return {max_iters, cfg.convergence_tol, cfg.convergence_window, cfg.armijo_c, cfg.step_shrink};
}

Vec3 final_control_spacing(const RegistrationConfig& cfg, const Grid& fixed) {
    if (cfg.control_spacing_mm) return *cfg.control_spacing_mm;
    return fixed.spacing * cfg.control_spacing_voxels;
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// Registration drivers

RegistrationResult register_affine(const Volume3D& fixed, const Volume3D& moving, const RegistrationConfig& cfg) {
    cfg.validate();
    const Prescaled ps = prescale(fixed, moving);
    const Pyramid py = build_pyramid(ps.fixed, ps.moving, cfg.pyramid_levels);
    const AffineParameterization param(grid_center(fixed.grid()), grid_radius(fixed.grid()), cfg.affine_dof);
    const auto corners = grid_corners(fixed.grid());

    std::vector<double> p = param.identity();
    RegistrationResult result;
    for (int level = 0; level < cfg.pyramid_levels; ++level) {
        const auto& lf = py.fixed[static_cast<std::size_t>(level)];
        const auto& lm = py.moving[static_cast<std::size_t>(level)];
        const AffineObjective obj(lf, lm, param);
        const double cap_mm = cfg.max_step_voxels * min_spacing(lf.grid());
        auto value_grad = [&](std::span<const double> q, std::span<double> g) { return obj.value_and_gradient(q, g); };
        auto step_cap = [&](const std::vector<double>& q, const std::vector<double>& g) {
            double gn = 0.0;
            for (double v : g) gn += v * v;
            gn = std::sqrt(gn);
            const double probe = 1.0 / gn;
            std::vector<double> moved(q.size());
            for (std::size_t e = 0; e < q.size(); ++e) moved[e] = q[e] - probe * g[e];
            const AffineTransform a0 = param.to_transform(q), a1 = param.to_transform(moved);
            double d = 0.0;
            for (const Vec3& c : corners) d = std::max(d, (a1.apply(c) - a0.apply(c)).norm());
            return d > 0.0 ? probe * cap_mm / d : probe;
        };
        LevelSummary s = steepest_descent(p, value_grad, step_cap, descent_options(cfg, cfg.affine_max_iters));
        s.stage = "affine";
        s.level = level;
        s.dims = lf.dims();
        result.cost_trace.insert(result.cost_trace.end(), s.cost_trace.begin(), s.cost_trace.end());
        log::debug("registration.level", {{"stage", "affine"}, {"level", level}, {"iterations", s.iterations},
                                          {"cost", s.final_cost}, {"stop", s.stop_reason}});
        result.levels.push_back(std::move(s));
    }
    const AffineObjective full(ps.fixed, ps.moving, param);
    double final_cost = full.value(p);
    const std::vector<double> id = param.identity();
    const double identity_cost = full.value(id);
    if (final_cost > identity_cost) {
        p = id;
        final_cost = identity_cost;
        result.levels.back().stop_reason += "+reverted-to-identity";
    }
    result.transform.affine = param.to_transform(p);
    result.final_cost = final_cost;
    return result;
}

RegistrationResult register_ffd(const Volume3D& fixed, const Volume3D& moving, const AffineTransform& init,
                                const RegistrationConfig& cfg) {
    cfg.validate();
    init.validate();
    const Prescaled ps = prescale(fixed, moving);
    const Pyramid py = build_pyramid(ps.fixed, ps.moving, cfg.pyramid_levels);

    // Lattice lives in the affine-mapped frame and covers the mapped fixed grid plus one coarse voxel.
    const Grid& coarse = py.fixed.front().grid();
    Vec3 lo{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(), std::numeric_limits<double>::max()};
    Vec3 hi = -lo;
    for (const Vec3& c : grid_corners(fixed.grid())) {
        const Vec3 m = init.apply(c);
        for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], m[a]);
            hi[a] = std::max(hi[a], m[a]);
        }
    }
    const double margin = std::max({coarse.spacing.x, coarse.spacing.y, coarse.spacing.z});
    lo -= Vec3{margin, margin, margin};
    hi += Vec3{margin, margin, margin};
    const Vec3 final_spacing = final_control_spacing(cfg, fixed.grid());
    const double coarse_factor = std::pow(2.0, cfg.pyramid_levels - 1);
    FFDTransform lattice = FFDTransform::covering(lo, hi, final_spacing * coarse_factor);

    RegistrationResult result;
    std::vector<double> phi(3 * lattice.control_count(), 0.0);
    for (int level = 0; level < cfg.pyramid_levels; ++level) {
        if (level > 0) {
            FFDTransform current(lattice.grid_dims(), lattice.spacing(), lattice.origin());
            auto d = current.displacements();
            for (std::size_t c = 0; c < d.size(); ++c) d[c] = {phi[3 * c], phi[3 * c + 1], phi[3 * c + 2]};
            lattice = current.refined();
            phi.assign(3 * lattice.control_count(), 0.0);
            const auto rd = lattice.displacements();
            for (std::size_t c = 0; c < rd.size(); ++c) {
                phi[3 * c] = rd[c].x;
                phi[3 * c + 1] = rd[c].y;
                phi[3 * c + 2] = rd[c].z;
            }
        }
        const auto& lf = py.fixed[static_cast<std::size_t>(level)];
        const auto& lm = py.moving[static_cast<std::size_t>(level)];
        const FfdObjective obj(lf, lm, init, lattice, cfg.bending_weight);
        const double cap_mm = cfg.max_step_voxels * min_spacing(lf.grid());
        auto value_grad = [&](std::span<const double> q, std::span<double> g) { return obj.value_and_gradient(q, g); };
        auto step_cap = [&](const std::vector<double>&, const std::vector<double>& g) {
            double m = 0.0;
            for (std::size_t c = 0; c + 2 < g.size(); c += 3)
                m = std::max(m, std::sqrt(g[c] * g[c] + g[c + 1] * g[c + 1] + g[c + 2] * g[c + 2]));
            return m > 0.0 ? cap_mm / m : 0.0;
        };
        LevelSummary s = steepest_descent(phi, value_grad, step_cap, descent_options(cfg, cfg.ffd_max_iters));
        s.stage = "ffd";
        s.level = level;
        s.dims = lf.dims();
        result.cost_trace.insert(result.cost_trace.end(), s.cost_trace.begin(), s.cost_trace.end());
        log::debug("registration.level", {{"stage", "ffd"}, {"level", level}, {"iterations", s.iterations},
                                          {"cost", s.final_cost}, {"stop", s.stop_reason}});
        result.levels.push_back(std::move(s));
    }
    const FfdObjective full(ps.fixed, ps.moving, init, lattice, cfg.bending_weight);
    double final_cost = full.value(phi);
    const std::vector<double> zero(phi.size(), 0.0);
    const double zero_cost = full.value(zero);
    if (final_cost > zero_cost) {
        phi = zero;
        final_cost = zero_cost;
        result.levels.back().stop_reason += "+reverted-to-zero";
    }
    result.transform.affine = init;
    result.transform.ffd = full.lattice_with(phi);
    result.final_cost = final_cost;
    return result;
}

RegistrationResult register_images(const Volume3D& fixed, const Volume3D& moving, const RegistrationConfig& cfg) {
    RegistrationResult affine = register_affine(fixed, moving, cfg);
    if (!cfg.enable_ffd) return affine;
    RegistrationResult ffd = register_ffd(fixed, moving, affine.transform.affine, cfg);
    RegistrationResult out;
    out.transform = ffd.transform;
    out.final_cost = ffd.final_cost;
    out.cost_trace = std::move(affine.cost_trace);
    out.cost_trace.insert(out.cost_trace.end(), ffd.cost_trace.begin(), ffd.cost_trace.end());
    out.levels = std::move(affine.levels);
    out.levels.insert(out.levels.end(), ffd.levels.begin(), ffd.levels.end());
    return out;
}

}  // namespace regprompt
