#include "regprompt/transform.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "regprompt/log.hpp"

namespace regprompt {

using nlohmann::json;

// ---------------------------------------------------------------------------------------------
// Affine

AffineTransform AffineTransform::inverse() const {
    validate();
    const Mat3 inv = matrix.inverse();
    return {inv, -(inv * translation)};
}

AffineTransform AffineTransform::after(const AffineTransform& other) const {
    return {matrix * other.matrix, matrix * other.translation + translation};
}

void AffineTransform::validate() const {
    const double det = matrix.determinant();
    if (!std::isfinite(det) || std::abs(det) <= 1e-9) throw DataError("degenerate affine matrix (|det| <= 1e-9)");
}

// ---------------------------------------------------------------------------------------------
// FFD

FFDTransform::FFDTransform(Index3 grid_dims, Vec3 spacing, Vec3 origin, std::vector<Vec3> displacements)
    : dims_(grid_dims), spacing_(spacing), origin_(origin), phi_(std::move(displacements)) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (dims_[a] < 4) throw DataError("FFD control lattice needs >= 4 points per axis");
        if (!(spacing_[a] > 0.0) || !std::isfinite(spacing_[a])) throw DataError("FFD control spacing must be positive");
    }
    if (phi_.empty()) phi_.assign(dims_.count(), Vec3{});
    if (phi_.size() != dims_.count()) throw DataError("FFD displacement count does not match the control lattice");
}

FFDTransform FFDTransform::covering(const Vec3& lo, const Vec3& hi, const Vec3& spacing) {
    // Box points need lattice coordinates in [1, c-3] so that indices i-1..i+2 stay unclamped.
    Index3 dims;
    Vec3 origin;
    for (std::size_t a = 0; a < 3; ++a) {
        const double extent = std::max(0.0, hi[a] - lo[a]);
        const int intervals = static_cast<int>(std::ceil(extent / spacing[a] - 1e-9));
        dims[a] = std::max(4, intervals + 4);
        origin[a] = lo[a] - spacing[a];
    }
    return FFDTransform(dims, spacing, origin);
}

FFDTransform::AxisSupport FFDTransform::axis_support(std::size_t axis, double world) const {
    const double l = (world - origin_[axis]) / spacing_[axis];
    const double fl = std::floor(l);
    const double u = l - fl;
    const int base = static_cast<int>(fl) - 1;
    AxisSupport s{};
    double w[4], d[4];
    bspline::basis(u, w);
    bspline::basis_derivative(u, d);
    const int hi = dims_[axis] - 1;
    for (int n = 0; n < 4; ++n) {
        s.index[static_cast<std::size_t>(n)] = std::clamp(base + n, 0, hi);
        s.weight[static_cast<std::size_t>(n)] = w[n];
        s.derivative[static_cast<std::size_t>(n)] = d[n] / spacing_[axis];
    }
    return s;
}

Vec3 FFDTransform::displacement(const Vec3& x) const {
    const AxisSupport sx = axis_support(0, x.x), sy = axis_support(1, x.y), sz = axis_support(2, x.z);
    Vec3 acc;
    for (std::size_t c = 0; c < 4; ++c) {
        Vec3 plane;
        for (std::size_t b = 0; b < 4; ++b) {
            Vec3 row;
            const std::size_t row_base = control_index(0, sy.index[b], sz.index[c]);
            for (std::size_t a = 0; a < 4; ++a) row += phi_[row_base + static_cast<std::size_t>(sx.index[a])] * sx.weight[a];
            plane += row * sy.weight[b];
        }
        acc += plane * sz.weight[c];
    }
    return acc;
}

namespace {

// 1D knot doubling along one axis of a lattice stored x-fastest.
std::vector<Vec3> refine_axis(const std::vector<Vec3>& in, Index3 dims, std::size_t axis, Index3& out_dims) {
    out_dims = dims;
    const int n = dims[axis];
    out_dims[axis] = 2 * n - 1;
    std::vector<Vec3> out(out_dims.count());
    auto idx = [](const Index3& d, int i, int j, int k) {
        return (static_cast<std::size_t>(k) * static_cast<std::size_t>(d.y) + static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(d.x) +
               static_cast<std::size_t>(i);
    };
    for (int k = 0; k < out_dims.z; ++k)
        for (int j = 0; j < out_dims.y; ++j)
            for (int i = 0; i < out_dims.x; ++i) {
                Index3 p{i, j, k};
                const int q = p[axis];
                auto src = [&](int s) {
                    Index3 r = p;
                    r[axis] = std::clamp(s, 0, n - 1);
                    return in[idx(dims, r.x, r.y, r.z)];
                };
                Vec3 value;
                if (q % 2 == 0) {
                    const int s = q / 2;
                    value = (src(s - 1) + src(s) * 6.0 + src(s + 1)) * 0.125;
                } else {
                    const int s = q / 2;
                    value = (src(s) + src(s + 1)) * 0.5;
                }
                out[idx(out_dims, i, j, k)] = value;
            }
    return out;
}

}  // namespace

FFDTransform FFDTransform::refined() const {
    Index3 d = dims_;
    std::vector<Vec3> values = phi_;
    for (std::size_t axis = 0; axis < 3; ++axis) {
        Index3 next;
        values = refine_axis(values, d, axis, next);
        d = next;
    }
    return FFDTransform(d, spacing_ * 0.5, origin_, std::move(values));
}

namespace {

struct KnotStencil {
    std::array<double, 3> value{1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0};
    std::array<double, 3> first;
    std::array<double, 3> second;
};

double bending_impl(const FFDTransform& f, std::span<Vec3> gradient, double scale) {
    const Index3& d = f.grid_dims();
    std::array<KnotStencil, 3> st;
    for (std::size_t a = 0; a < 3; ++a) {
        st[a].first = {-0.5, 0.0, 0.5};
        st[a].second = {1.0, -2.0, 1.0};
    }
    // term t: (order along x, order along y, order along z) and its multiplicity
    struct Term {
        std::array<int, 3> order;
        double factor;
    };
    constexpr std::array<Term, 6> terms{{{{2, 0, 0}, 1.0},
                                          {{0, 2, 0}, 1.0},
                                          {{0, 0, 2}, 1.0},
                                          {{1, 1, 0}, 2.0},
                                          {{1, 0, 1}, 2.0},
                                          {{0, 1, 1}, 2.0}}};
    auto coeff = [&](std::size_t axis, int order, int offset) {
        const auto o = static_cast<std::size_t>(offset);
        return order == 0 ? st[axis].value[o] : (order == 1 ? st[axis].first[o] : st[axis].second[o]);
    };
    // 27-point weights per term
    std::array<std::array<double, 27>, 6> w{};
    for (std::size_t t = 0; t < terms.size(); ++t)
        for (int c = 0; c < 3; ++c)
            for (int b = 0; b < 3; ++b)
                for (int a = 0; a < 3; ++a)
                    w[t][static_cast<std::size_t>((c * 3 + b) * 3 + a)] =
                        coeff(0, terms[t].order[0], a) * coeff(1, terms[t].order[1], b) * coeff(2, terms[t].order[2], c);

    const std::size_t knots = static_cast<std::size_t>(d.x - 2) * static_cast<std::size_t>(d.y - 2) *
                              static_cast<std::size_t>(d.z - 2);
    const double mean_spacing = std::cbrt(f.spacing().x * f.spacing().y * f.spacing().z);
    const double norm = 1.0 / (static_cast<double>(knots) * mean_spacing * mean_spacing);
    const auto phi = f.displacements();
    double energy = 0.0;
    for (int k = 1; k < d.z - 1; ++k)
        for (int j = 1; j < d.y - 1; ++j)
            for (int i = 1; i < d.x - 1; ++i) {
                for (std::size_t t = 0; t < terms.size(); ++t) {
                    Vec3 deriv;
                    std::size_t s = 0;
                    for (int c = -1; c <= 1; ++c)
                        for (int b = -1; b <= 1; ++b)
                            for (int a = -1; a <= 1; ++a, ++s)
                                deriv += phi[f.control_index(i + a, j + b, k + c)] * w[t][s];
                    energy += terms[t].factor * deriv.dot(deriv);
                    if (!gradient.empty()) {
                        const Vec3 g = deriv * (2.0 * terms[t].factor * norm * scale);
                        s = 0;
                        for (int c = -1; c <= 1; ++c)
                            for (int b = -1; b <= 1; ++b)
                                for (int a = -1; a <= 1; ++a, ++s)
                                    gradient[f.control_index(i + a, j + b, k + c)] += g * w[t][s];
                    }
                }
            }
    return energy * norm;
}

}  // namespace

double bending_energy(const FFDTransform& f) { return bending_impl(f, {}, 0.0); }

double bending_energy(const FFDTransform& f, std::span<Vec3> gradient, double scale) {
    if (gradient.size() != f.control_count()) throw PreconditionError("gradient buffer size mismatch");
    return bending_impl(f, gradient, scale);
}

// ---------------------------------------------------------------------------------------------
// Dense field

Vec3 DenseDisplacementField::displacement(const Vec3& x) const {
    const VoxelCoord c = grid.to_voxel(x);
    const double u = std::clamp(c.u, 0.0, static_cast<double>(grid.dims.x - 1));
    const double v = std::clamp(c.v, 0.0, static_cast<double>(grid.dims.y - 1));
    const double w = std::clamp(c.w, 0.0, static_cast<double>(grid.dims.z - 1));
    const int i0 = static_cast<int>(std::floor(u)), j0 = static_cast<int>(std::floor(v)),
              k0 = static_cast<int>(std::floor(w));
    const int i1 = std::min(i0 + 1, grid.dims.x - 1), j1 = std::min(j0 + 1, grid.dims.y - 1),
              k1 = std::min(k0 + 1, grid.dims.z - 1);
    const double tx = u - i0, ty = v - j0, tz = w - k0;
    auto at = [&](int i, int j, int k) { return vectors[grid.index(i, j, k)]; };
    const Vec3 c00 = at(i0, j0, k0) * (1 - tx) + at(i1, j0, k0) * tx;
    const Vec3 c10 = at(i0, j1, k0) * (1 - tx) + at(i1, j1, k0) * tx;
    const Vec3 c01 = at(i0, j0, k1) * (1 - tx) + at(i1, j0, k1) * tx;
    const Vec3 c11 = at(i0, j1, k1) * (1 - tx) + at(i1, j1, k1) * tx;
    return (c00 * (1 - ty) + c10 * ty) * (1 - tz) + (c01 * (1 - ty) + c11 * ty) * tz;
}

// ---------------------------------------------------------------------------------------------
// Chains

SpatialTransform::SpatialTransform(const CompositeTransform& c) : steps_{c.affine} {
    if (c.ffd) steps_.emplace_back(*c.ffd);
}

Vec3 SpatialTransform::apply(const Vec3& x) const {
    Vec3 p = x;
    for (const auto& step : steps_) {
        std::visit(
            [&p](const auto& s) {
                using S = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<S, AffineTransform>)
                    p = s.apply(p);
                else
                    p = p + s.displacement(p);
            },
            step);
    }
    return p;
}

AffineTransform SpatialTransform::affine_part() const {
    AffineTransform acc;
    for (const auto& step : steps_)
        if (const auto* a = std::get_if<AffineTransform>(&step)) acc = a->after(acc);
    return acc;
}

SpatialTransform compose_point_map(const SpatialTransform& a, const SpatialTransform& b) {
    SpatialTransform out;
    out.steps_ = b.steps_;
    out.steps_.insert(out.steps_.end(), a.steps_.begin(), a.steps_.end());
    return out;
}

// ---------------------------------------------------------------------------------------------
// Inversion

namespace {

double jacobian_determinant(const SpatialTransform& t, const Vec3& x, const Vec3& h) {
    Mat3 j;
    for (int c = 0; c < 3; ++c) {
        Vec3 dx;
        dx[static_cast<std::size_t>(c)] = h[static_cast<std::size_t>(c)];
        const Vec3 d = (t.apply(x + dx) - t.apply(x - dx)) * (0.5 / h[static_cast<std::size_t>(c)]);
        for (int r = 0; r < 3; ++r) j(r, c) = d[static_cast<std::size_t>(r)];
    }
    return j.determinant();
}

}  // namespace

InverseField invert(const SpatialTransform& t, const Grid& grid, double tol_mm, int max_iter) {
    validate_grid(grid);
    const AffineTransform lin = t.affine_part();
    const AffineTransform lin_inv = lin.inverse();  // throws on degenerate affine
    const Mat3 precond = lin_inv.matrix;
    const double stop = 0.01 * tol_mm;
    const Vec3 h = grid.spacing * 0.5;

    InverseField out;
    out.field.grid = grid;
    out.field.vectors.resize(grid.voxel_count());
    InversionStats& st = out.stats;

    auto interior = [&](int i, int n) { return n <= 4 || (i >= 2 && i <= n - 3); };
    std::size_t within = 0;
    double residual_sum = 0.0;
    std::size_t idx = 0;
    for (int k = 0; k < grid.dims.z; ++k)
        for (int j = 0; j < grid.dims.y; ++j)
            for (int i = 0; i < grid.dims.x; ++i, ++idx) {
                const Vec3 y = grid.to_world(i, j, k);
                Vec3 x = lin_inv.apply(y);
                Vec3 r = t.apply(x) - y;
                double res = r.norm();
                int it = 0;
                while (res > stop && it < max_iter) {
                    x -= precond * r;
                    r = t.apply(x) - y;
                    res = r.norm();
                    ++it;
                }
                st.max_iterations_used = std::max(st.max_iterations_used, it);
                out.field.vectors[idx] = x - y;
                if (interior(i, grid.dims.x) && interior(j, grid.dims.y) && interior(k, grid.dims.z)) {
                    ++st.interior_points;
                    residual_sum += res;
                    st.max_residual_mm = std::max(st.max_residual_mm, res);
                    if (res <= tol_mm) ++within;
                    if (jacobian_determinant(t, x, h) <= 0.0) ++st.jacobian_violations;
                }
            }
    if (st.interior_points > 0) {
        st.mean_residual_mm = residual_sum / static_cast<double>(st.interior_points);
        st.fraction_within_tol = static_cast<double>(within) / static_cast<double>(st.interior_points);
    }
    if (st.jacobian_violations > 0)
        log::warn("inverse.folding", {{"violations", st.jacobian_violations}, {"interior_points", st.interior_points}});
    if (st.fraction_within_tol < 0.99)
        throw InversionError("inverse did not converge: " + std::to_string(st.fraction_within_tol * 100.0) +
                                 "% of interior points within tolerance, worst residual " +
                                 std::to_string(st.max_residual_mm) + " mm",
                             st.max_residual_mm);
    return out;
}

DenseDisplacementField dense_displacement(const SpatialTransform& t, const Grid& grid) {
    DenseDisplacementField f{grid, std::vector<Vec3>(grid.voxel_count())};
    std::size_t idx = 0;
    for (int k = 0; k < grid.dims.z; ++k)
        for (int j = 0; j < grid.dims.y; ++j)
            for (int i = 0; i < grid.dims.x; ++i, ++idx) {
                const Vec3 x = grid.to_world(i, j, k);
                f.vectors[idx] = t.apply(x) - x;
            }
    return f;
}

// ---------------------------------------------------------------------------------------------
// Serialization

json transform_to_json(const CompositeTransform& t) {
    json j;
    j["affine"]["matrix"] = t.affine.matrix.m;
    j["affine"]["translation"] = {t.affine.translation.x, t.affine.translation.y, t.affine.translation.z};
    if (t.ffd) {
        const auto& f = *t.ffd;
        json d = json::array();
        for (const Vec3& v : f.displacements()) {
            d.push_back(v.x);
            d.push_back(v.y);
            d.push_back(v.z);
        }
        j["ffd"] = {{"grid_dims", {f.grid_dims().x, f.grid_dims().y, f.grid_dims().z}},
                    {"spacing", {f.spacing().x, f.spacing().y, f.spacing().z}},
                    {"origin", {f.origin().x, f.origin().y, f.origin().z}},
                    {"displacements", std::move(d)}};
    } else {
        j["ffd"] = nullptr;
    }
    return j;
}

CompositeTransform transform_from_json(const json& j) {
    try {
        CompositeTransform t;
        const auto m = j.at("affine").at("matrix").get<std::vector<double>>();
        const auto tr = j.at("affine").at("translation").get<std::vector<double>>();
        if (m.size() != 9 || tr.size() != 3) throw DataError("affine needs 9 matrix and 3 translation entries");
        std::copy(m.begin(), m.end(), t.affine.matrix.m.begin());
        t.affine.translation = {tr[0], tr[1], tr[2]};
        t.affine.validate();
        if (j.contains("ffd") && !j.at("ffd").is_null()) {
            const auto& f = j.at("ffd");
            const auto gd = f.at("grid_dims").get<std::vector<int>>();
            const auto sp = f.at("spacing").get<std::vector<double>>();
            const auto og = f.at("origin").get<std::vector<double>>();
            const auto d = f.at("displacements").get<std::vector<double>>();
            if (gd.size() != 3 || sp.size() != 3 || og.size() != 3) throw DataError("ffd lattice fields need 3 entries");
            const Index3 dims{gd[0], gd[1], gd[2]};
            if (gd[0] < 4 || gd[1] < 4 || gd[2] < 4) throw DataError("FFD control lattice needs >= 4 points per axis");
            if (d.size() != 3 * dims.count()) throw DataError("ffd displacement count mismatch");
            std::vector<Vec3> phi(dims.count());
            for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = {d[3 * i], d[3 * i + 1], d[3 * i + 2]};
            t.ffd = FFDTransform(dims, {sp[0], sp[1], sp[2]}, {og[0], og[1], og[2]}, std::move(phi));
        }
        return t;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed transform JSON: ") + e.what());
    }
}

}  // namespace regprompt
