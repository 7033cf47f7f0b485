#include "regprompt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "regprompt/distance.hpp"

namespace regprompt {

using nlohmann::json;

namespace {

double normalized_radius_sq(const Vec3& p, const Vec3& c, const Vec3& r) {
    const Vec3 q = divide(p - c, r);
    return q.dot(q);
}

Vec3 vec_from_json(const json& j, const char* what) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != 3) throw DataError(std::string(what) + " needs 3 components");
    return {v[0], v[1], v[2]};
}

json vec_to_json(const Vec3& v) { return {v.x, v.y, v.z}; }

Mat3 rotation(double rx, double ry, double rz) {
    const double cx = std::cos(rx), sx = std::sin(rx), cy = std::cos(ry), sy = std::sin(ry), cz = std::cos(rz),
                 sz = std::sin(rz);
    const Mat3 Rx{{1, 0, 0, 0, cx, -sx, 0, sx, cx}};
    const Mat3 Ry{{cy, 0, sy, 0, 1, 0, -sy, 0, cy}};
    const Mat3 Rz{{cz, -sz, 0, sz, cz, 0, 0, 0, 1}};
    return Rz * Ry * Rx;
}

struct SlicePixel {
    int i, j;
    double score;
};

/// Greedy farthest-point spread over candidates sorted by preference (first element is taken first).
std::vector<SlicePixel> spread(const std::vector<SlicePixel>& candidates, std::size_t count, const Vec3& spacing) {
    std::vector<SlicePixel> chosen;
    if (candidates.empty()) return chosen;
    chosen.push_back(candidates.front());
    std::vector<double> nearest(candidates.size(), std::numeric_limits<double>::infinity());
    while (chosen.size() < count) {
        const SlicePixel& last = chosen.back();
        std::size_t best = candidates.size();
        double best_d = 0.0;
        for (std::size_t c = 0; c < candidates.size(); ++c) {
            const double dx = (candidates[c].i - last.i) * spacing.x, dy = (candidates[c].j - last.j) * spacing.y;
            nearest[c] = std::min(nearest[c], dx * dx + dy * dy);
            if (nearest[c] > best_d) {
                best_d = nearest[c];
                best = c;
            }
        }
        if (best == candidates.size()) break;
        chosen.push_back(candidates[best]);
    }
    return chosen;
}

}  // namespace

void PhantomSpec::validate() const {
    validate_grid(grid());
    for (const auto* e : {&femur, &tibia})
        for (std::size_t a = 0; a < 3; ++a)
            if (!(e->radii[a] > 0.0)) throw PreconditionError("ellipsoid radii must be positive");
    const double finest = std::min({spacing.x, spacing.y, spacing.z});
    if (cartilage_thickness_mm < finest)
        throw PreconditionError("cartilage shell thinner than one voxel (" + std::to_string(cartilage_thickness_mm) +
                                " mm < " + std::to_string(finest) + " mm)");
    if (!(cap_fraction >= 0.0 && cap_fraction < 1.0)) throw PreconditionError("cap_fraction must lie in [0, 1)");
    if (!(noise_sigma >= 0.0)) throw PreconditionError("noise_sigma must be >= 0");
    const bool tibia_above = tibia.center.y > femur.center.y;
    const double femur_edge = femur.center.y + (tibia_above ? 1 : -1) * (femur.radii.y + cartilage_thickness_mm);
    const double tibia_edge = tibia.center.y - (tibia_above ? 1 : -1) * (tibia.radii.y + cartilage_thickness_mm);
    if (tibia_above ? femur_edge >= tibia_edge : femur_edge <= tibia_edge)
        throw PreconditionError("cartilage shells of femur and tibia overlap");
}

Grid PhantomSpec::grid() const {
    Grid g{dims, spacing, {}};
    for (std::size_t a = 0; a < 3; ++a) g.origin[a] = -0.5 * (dims[a] - 1) * spacing[a];
    return g;
}

Tissue tissue_at(const PhantomSpec& spec, const Vec3& p) {
    if (normalized_radius_sq(p, spec.femur.center, spec.femur.radii) <= 1.0) return Tissue::femur;
    if (normalized_radius_sq(p, spec.tibia.center, spec.tibia.radii) <= 1.0) return Tissue::tibia;
    const double dir = spec.tibia.center.y > spec.femur.center.y ? 1.0 : -1.0;
    const Vec3 t{spec.cartilage_thickness_mm, spec.cartilage_thickness_mm, spec.cartilage_thickness_mm};
    if ((p.y - spec.femur.center.y) * dir >= spec.cap_fraction * spec.femur.radii.y &&
        normalized_radius_sq(p, spec.femur.center, spec.femur.radii + t) <= 1.0)
        return Tissue::femoral_cartilage;
    if ((spec.tibia.center.y - p.y) * dir >= spec.cap_fraction * spec.tibia.radii.y &&
        normalized_radius_sq(p, spec.tibia.center, spec.tibia.radii + t) <= 1.0)
        return Tissue::tibial_cartilage;
    return Tissue::background;
}

Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& id) {
    spec.validate();
    const Grid g = spec.grid();
    const std::size_t n = g.voxel_count();
    std::vector<float> image(n);
    std::vector<float> femur(n, 0.0f), tibia(n, 0.0f), fc(n, 0.0f), tc(n, 0.0f);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    std::size_t idx = 0;
    for (int k = 0; k < g.dims.z; ++k)
        for (int j = 0; j < g.dims.y; ++j)
            for (int i = 0; i < g.dims.x; ++i, ++idx) {
                Vec3 p = g.to_world(i, j, k);
                if (spec.deformation) p = spec.deformation->apply(p);
                double value = spec.background;
                switch (tissue_at(spec, p)) {
                    case Tissue::femur: femur[idx] = 1.0f; value = spec.bone; break;
                    case Tissue::tibia: tibia[idx] = 1.0f; value = spec.bone; break;
                    case Tissue::femoral_cartilage: fc[idx] = 1.0f; value = spec.cartilage; break;
                    case Tissue::tibial_cartilage: tc[idx] = 1.0f; value = spec.cartilage; break;
                    case Tissue::background: break;
                }
                if (spec.noise_sigma > 0.0) value += noise(rng);
                image[idx] = static_cast<float>(value);
            }
    Phantom ph;
    ph.image = Volume3D(g, VolumeKind::intensity, std::move(image));
    ph.masks.emplace(StructureId::femur(), Volume3D(g, VolumeKind::binary_mask, std::move(femur)));
    ph.masks.emplace(StructureId::tibia(), Volume3D(g, VolumeKind::binary_mask, std::move(tibia)));
    ph.masks.emplace(StructureId::femoral_cartilage(), Volume3D(g, VolumeKind::binary_mask, std::move(fc)));
    ph.masks.emplace(StructureId::tibial_cartilage(), Volume3D(g, VolumeKind::binary_mask, std::move(tc)));
    ph.prompts = default_prompts(ph.masks, id);
    return ph;
}

PromptSet default_prompts(const MaskSet& masks, const std::string& owner) {
    PromptSet ps;
    ps.owner = owner;
    if (masks.empty()) return ps;
    const Grid& g = masks.begin()->second.grid();
    const Index3 plane_dims{g.dims.x, g.dims.y, 1};
    const std::size_t plane = static_cast<std::size_t>(g.dims.x) * static_cast<std::size_t>(g.dims.y);

    for (int w = 0; w < g.dims.z; ++w) {
        std::vector<std::uint8_t> any(plane, 0);
        for (const auto& [s, m] : masks) {
            if (!(m.grid() == g)) throw DataError("ground-truth masks are on different grids");
            for (std::size_t p = 0; p < plane; ++p) any[p] |= m[plane * static_cast<std::size_t>(w) + p] != 0.0f;
        }
        for (const auto& [s, m] : masks) {
            std::vector<std::uint8_t> inside(plane), outside(plane);
            bool present = false;
            for (std::size_t p = 0; p < plane; ++p) {
                inside[p] = m[plane * static_cast<std::size_t>(w) + p] != 0.0f;
                outside[p] = !inside[p];
                present = present || inside[p];
            }
            if (!present) continue;
            const auto depth = squared_distance_transform(plane_dims, g.spacing, outside);
            const auto away = squared_distance_transform(plane_dims, g.spacing, inside);

            std::vector<SlicePixel> pos, neg;
            double max_depth = 0.0;
            for (std::size_t p = 0; p < plane; ++p)
                if (inside[p]) max_depth = std::max(max_depth, depth[p]);
            for (std::size_t p = 0; p < plane; ++p) {
                const int i = static_cast<int>(p % static_cast<std::size_t>(g.dims.x));
                const int j = static_cast<int>(p / static_cast<std::size_t>(g.dims.x));
                if (inside[p] && depth[p] >= 0.25 * max_depth) pos.push_back({i, j, depth[p]});
                if (!any[p]) neg.push_back({i, j, away[p]});
            }
            const auto by_score = [](const SlicePixel& a, const SlicePixel& b) { return a.score > b.score; };
            std::stable_sort(pos.begin(), pos.end(), by_score);
            std::stable_sort(neg.begin(), neg.end(), by_score);
            for (const auto& px : spread(pos, 3, g.spacing))
                ps.prompts.push_back({{double(px.i), double(px.j), double(w)}, Polarity::positive, s});
            for (const auto& px : spread(neg, 2, g.spacing))
                ps.prompts.push_back({{double(px.i), double(px.j), double(w)}, Polarity::negative, s});
        }
    }
    return ps;
}

CompositeTransform random_deformation(const DeformationSpec& d, const Grid& grid, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double deg = std::numbers::pi / 180.0;
    CompositeTransform t;
    const double rz = unit(rng) * d.max_rotation_deg * deg;
    const double ry = unit(rng) * 0.25 * d.max_rotation_deg * deg;
    const double rx = unit(rng) * 0.25 * d.max_rotation_deg * deg;
    const Vec3 log_scale{unit(rng) * d.max_log_scale, unit(rng) * d.max_log_scale, unit(rng) * d.max_log_scale};
    t.affine.matrix = rotation(rx, ry, rz) *
                      Mat3::diagonal({std::exp(log_scale.x), std::exp(log_scale.y), std::exp(log_scale.z)});
    t.affine.translation = {unit(rng) * d.max_translation_mm, unit(rng) * d.max_translation_mm,
                            0.5 * unit(rng) * d.max_translation_mm};
    if (d.ffd_max_mm <= 0.0) return t;

    Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
    for (int c = 0; c < 8; ++c) {
        const Vec3 corner = grid.to_world((c & 1) ? grid.dims.x - 1 : 0, (c & 2) ? grid.dims.y - 1 : 0,
                                          (c & 4) ? grid.dims.z - 1 : 0);
        const Vec3 m = t.affine.apply(corner);
        for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], m[a]);
            hi[a] = std::max(hi[a], m[a]);
        }
    }
    FFDTransform ffd = FFDTransform::covering(lo, hi, {d.ffd_spacing_mm, d.ffd_spacing_mm, d.ffd_spacing_mm});
    for (auto& v : ffd.displacements()) v = {unit(rng), unit(rng), 0.5 * unit(rng)};
    double peak = 0.0;
    for (int k = 0; k < grid.dims.z; ++k)
        for (int j = 0; j < grid.dims.y; ++j)
            for (int i = 0; i < grid.dims.x; ++i)
                peak = std::max(peak, ffd.displacement(t.affine.apply(grid.to_world(i, j, k))).norm());
    if (peak > 0.0)
        for (auto& v : ffd.displacements()) v *= d.ffd_max_mm / peak;
    t.ffd = std::move(ffd);
    return t;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t k) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (k + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

PhantomCase make_case(const PhantomSpec& spec, const DeformationSpec& deform, int references, std::uint64_t seed) {
    if (references < 0) throw PreconditionError("reference count must be >= 0");
    PhantomCase c;
    for (int p = 0; p <= references; ++p) {
        PhantomSpec s = spec;
        s.deformation = random_deformation(deform, spec.grid(), derive_seed(seed, 2 * static_cast<std::uint64_t>(p)));
        c.deformations.push_back(*s.deformation);
        Phantom ph = make_phantom(s, derive_seed(seed, 2 * static_cast<std::uint64_t>(p) + 1),
                                  p == 0 ? "new" : "ref" + std::to_string(p));
        if (p == 0)
            c.target = std::move(ph);
        else
            c.references.push_back(std::move(ph));
    }
    return c;
}

json phantom_spec_to_json(const PhantomSpec& s) {
    const auto ell = [](const Ellipsoid& e) { return json{{"center", vec_to_json(e.center)}, {"radii", vec_to_json(e.radii)}}; };
    return {{"dims", {s.dims.x, s.dims.y, s.dims.z}},
            {"spacing", vec_to_json(s.spacing)},
            {"femur", ell(s.femur)},
            {"tibia", ell(s.tibia)},
            {"cartilage_thickness_mm", s.cartilage_thickness_mm},
            {"cap_fraction", s.cap_fraction},
            {"background", s.background},
            {"bone", s.bone},
            {"cartilage", s.cartilage},
            {"noise_sigma", s.noise_sigma},
            {"deformation", s.deformation ? transform_to_json(*s.deformation) : json(nullptr)}};
}

PhantomSpec phantom_spec_from_json(const json& j) {
    PhantomSpec s;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "dims") {
                const auto d = value.get<std::vector<int>>();
                if (d.size() != 3) throw DataError("dims needs 3 entries");
                s.dims = {d[0], d[1], d[2]};
            } else if (key == "spacing") {
                s.spacing = vec_from_json(value, "spacing");
            } else if (key == "femur" || key == "tibia") {
                Ellipsoid e{vec_from_json(value.at("center"), "center"), vec_from_json(value.at("radii"), "radii")};
                (key == "femur" ? s.femur : s.tibia) = e;
            } else if (key == "cartilage_thickness_mm") {
                s.cartilage_thickness_mm = value.get<double>();
            } else if (key == "cap_fraction") {
                s.cap_fraction = value.get<double>();
            } else if (key == "background") {
                s.background = value.get<double>();
            } else if (key == "bone") {
                s.bone = value.get<double>();
            } else if (key == "cartilage") {
                s.cartilage = value.get<double>();
            } else if (key == "noise_sigma") {
                s.noise_sigma = value.get<double>();
            } else if (key == "deformation") {
                if (!value.is_null()) s.deformation = transform_from_json(value);
            } else {
                throw DataError("unknown phantom spec key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed phantom spec: ") + e.what());
    }
    s.validate();
    return s;
}

}  // namespace regprompt
