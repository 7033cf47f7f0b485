#include "regprompt/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "regprompt/distance.hpp"

namespace regprompt {

using nlohmann::json;

namespace {

void require_same_grid(const Volume3D& a, const Volume3D& b) {
    if (!(a.grid() == b.grid())) throw DataError("masks are on different grids");
}

struct Overlap {
    std::size_t a = 0, b = 0, both = 0;
};

Overlap overlap(const Volume3D& a, const Volume3D& b) {
    require_same_grid(a, b);
    Overlap o;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0.0f, y = b[i] != 0.0f;
        o.a += x;
        o.b += y;
        o.both += x && y;
    }
    return o;
}

std::string fmt(const std::optional<double>& v) {
    if (!v) return "NA";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", *v);
    return buf;
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

double dice(const Volume3D& a, const Volume3D& b) {
    const Overlap o = overlap(a, b);
    if (o.a + o.b == 0) return 1.0;
    return 2.0 * static_cast<double>(o.both) / static_cast<double>(o.a + o.b);
}

double voe(const Volume3D& a, const Volume3D& b) {
    const Overlap o = overlap(a, b);
    const std::size_t uni = o.a + o.b - o.both;
    if (uni == 0) return 0.0;
    return 1.0 - static_cast<double>(o.both) / static_cast<double>(uni);
}

std::vector<std::uint8_t> surface_voxels(const Volume3D& mask) {
    const auto& d = mask.dims();
    std::vector<std::uint8_t> s(mask.size(), 0);
    const auto fg = [&](int i, int j, int k) {
        return i >= 0 && j >= 0 && k >= 0 && i < d.x && j < d.y && k < d.z && mask.at(i, j, k) != 0.0f;
    };
    std::size_t idx = 0;
    for (int k = 0; k < d.z; ++k)
        for (int j = 0; j < d.y; ++j)
            for (int i = 0; i < d.x; ++i, ++idx) {
                if (!fg(i, j, k)) continue;
                s[idx] = !fg(i - 1, j, k) || !fg(i + 1, j, k) || !fg(i, j - 1, k) || !fg(i, j + 1, k) ||
                         !fg(i, j, k - 1) || !fg(i, j, k + 1);
            }
    return s;
}

std::optional<double> rmsd(const Volume3D& a, const Volume3D& b) {
    require_same_grid(a, b);
    const auto sa = surface_voxels(a);
    const auto sb = surface_voxels(b);
    const auto count = [](const std::vector<std::uint8_t>& s) {
        return static_cast<std::size_t>(std::count(s.begin(), s.end(), std::uint8_t{1}));
    };
    const std::size_t na = count(sa), nb = count(sb);
    if (na == 0 || nb == 0) return std::nullopt;
    const auto da = squared_distance_transform(a.dims(), a.spacing(), sa);
    const auto db = squared_distance_transform(b.dims(), b.spacing(), sb);
    double sum = 0.0;
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (sa[i]) sum += db[i];
        if (sb[i]) sum += da[i];
    }
    return std::sqrt(sum / static_cast<double>(na + nb));
}

std::vector<int> filter_slices_with_bone(const MaskSet& gt) {
    const Volume3D* first = nullptr;
    std::vector<int> slices;
    std::vector<std::uint8_t> has;
    for (const auto& s : {StructureId::femur(), StructureId::tibia()}) {
        const auto it = gt.find(s);
        if (it == gt.end()) continue;
        const Volume3D& m = it->second;
        if (first == nullptr) {
            first = &m;
            has.assign(static_cast<std::size_t>(m.dims().z), 0);
        } else {
            require_same_grid(*first, m);
        }
        const std::size_t plane = static_cast<std::size_t>(m.dims().x) * static_cast<std::size_t>(m.dims().y);
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i] != 0.0f) has[i / plane] = 1;
    }
    for (std::size_t w = 0; w < has.size(); ++w)
        if (has[w]) slices.push_back(static_cast<int>(w));
    return slices;
}

Volume3D restrict_to_slices(const Volume3D& mask, const std::vector<int>& slices) {
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(mask.dims().z), 0);
    for (int w : slices)
        if (w >= 0 && w < mask.dims().z) keep[static_cast<std::size_t>(w)] = 1;
    std::vector<float> out(mask.data().begin(), mask.data().end());
    const std::size_t plane = static_cast<std::size_t>(mask.dims().x) * static_cast<std::size_t>(mask.dims().y);
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!keep[i / plane]) out[i] = 0.0f;
    return Volume3D(mask.grid(), mask.kind(), std::move(out));
}

EvaluationReport evaluate_case(const MaskSet& pred, const MaskSet& gt, const std::string& case_id,
                               const std::string& strategy) {
    EvaluationReport r{case_id, strategy, filter_slices_with_bone(gt), {}};
    for (const auto& [s, g] : gt) {
        StructureMetrics m;
        const auto it = pred.find(s);
        if (it != pred.end() && !r.slices.empty()) {
            require_same_grid(it->second, g);
            const Volume3D p = restrict_to_slices(it->second, r.slices);
            const Volume3D t = restrict_to_slices(g, r.slices);
            m.dice = dice(p, t);
            m.voe = voe(p, t);
            m.rmsd_mm = rmsd(p, t);
        }
        r.structures.emplace(s, m);
    }
    return r;
}

json EvaluationReport::to_json() const {
    json s = json::object();
    for (const auto& [id, m] : structures)
        s[id.name()] = {{"dice", optional_json(m.dice)}, {"voe", optional_json(m.voe)}, {"rmsd_mm", optional_json(m.rmsd_mm)}};
    return {{"case", case_id}, {"strategy", strategy}, {"slices", slices}, {"structures", std::move(s)}};
}

std::vector<std::string> EvaluationReport::csv_rows() const {
    std::vector<std::string> rows;
    for (const auto& [id, m] : structures)
        rows.push_back(case_id + "," + strategy + "," + id.name() + "," + fmt(m.dice) + "," + fmt(m.voe) + "," +
                       fmt(m.rmsd_mm) + "," + std::to_string(slices.size()));
    return rows;
}

}  // namespace regprompt
