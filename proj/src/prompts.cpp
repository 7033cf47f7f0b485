#include "regprompt/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace regprompt {

using nlohmann::json;

StructureId::StructureId(std::string name) : name_(std::move(name)) {
    if (name_.empty()) throw DataError("structure name must not be empty");
}

std::vector<StructureId> StructureId::knee() {
    return {femur(), tibia(), femoral_cartilage(), tibial_cartilage()};
}

int PointPrompt::slice() const { return static_cast<int>(std::floor(position.w + 0.5)); }

std::vector<StructureId> PromptSet::structures() const {
    std::vector<StructureId> out;
    for (const auto& p : prompts)
        if (std::find(out.begin(), out.end(), p.structure) == out.end()) out.push_back(p.structure);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<PointPrompt> PromptSet::for_structure(const StructureId& s) const {
    std::vector<PointPrompt> out;
    std::copy_if(prompts.begin(), prompts.end(), std::back_inserter(out),
                 [&](const PointPrompt& p) { return p.structure == s; });
    return out;
}

std::size_t PromptSet::positive_count(const StructureId& s) const {
    return static_cast<std::size_t>(std::count_if(prompts.begin(), prompts.end(), [&](const PointPrompt& p) {
        return p.structure == s && p.polarity == Polarity::positive;
    }));
}

void PromptSet::validate() const {
    for (const auto& p : prompts)
        if (!p.position.finite()) throw DataError("prompt position must be finite");
    for (const auto& s : structures())
        if (positive_count(s) == 0) throw DataError("structure '" + s.name() + "' has no positive prompt");
}

FilterPolicy FilterPolicy::knee_pd() {
    FilterPolicy p;
    p.ranges[StructureId::femur()] = {0.0, 1200.0};
    p.ranges[StructureId::tibia()] = {0.0, 1200.0};
    p.ranges[StructureId::femoral_cartilage()] = {800.0, 3000.0};
    p.ranges[StructureId::tibial_cartilage()] = {800.0, 3000.0};
    return p;
}

void FilterPolicy::validate() const {
    for (const auto& [s, r] : ranges)
        if (!(r.lo < r.hi)) throw DataError("filter range for '" + s.name() + "' requires lo < hi");
}

WarpedPrompts warp_prompts(const PromptSet& ps, const SpatialTransform& t, const Grid& ref_grid, const Grid& new_grid) {
    WarpedPrompts out;
    out.prompts.owner = ps.owner;
    for (const auto& p : ps.prompts) {
        const VoxelCoord c = new_grid.to_voxel(t.apply(ref_grid.to_world(p.position)));
        if (!c.finite() || !new_grid.contains(c)) {
            ++out.dropped_out_of_bounds;
            continue;
        }
        out.prompts.prompts.push_back({c, p.polarity, p.structure});
    }
    return out;
}

FilteredPrompts filter_prompts(const PromptSet& ps, const Volume3D& image, const FilterPolicy& policy) {
    FilteredPrompts out;
    out.prompts.owner = ps.owner;
    for (const auto& p : ps.prompts) {
        if (p.polarity == Polarity::positive) {
            if (const auto it = policy.ranges.find(p.structure); it != policy.ranges.end()) {
                const double value = sample(image, p.position, Interpolation::trilinear, OutOfBounds::zero);
                if (value < it->second.lo || value > it->second.hi) {
                    ++out.removed[p.structure];
                    continue;
                }
            }
        }
        out.prompts.prompts.push_back(p);
    }
    for (const auto& s : ps.structures())
        if (ps.positive_count(s) > 0 && out.prompts.positive_count(s) == 0) out.empty_structures.push_back(s);
    return out;
}

json prompts_to_json(const PromptSet& ps) {
    json arr = json::array();
    for (const auto& p : ps.prompts)
        arr.push_back({{"structure", p.structure.name()},
                       {"polarity", p.polarity == Polarity::positive ? "pos" : "neg"},
                       {"position", {p.position.u, p.position.v, p.position.w}}});
    return {{"image_id", ps.owner}, {"prompts", std::move(arr)}};
}

PromptSet prompts_from_json(const json& j) {
    PromptSet ps;
    try {
        ps.owner = j.at("image_id").get<std::string>();
        for (const auto& e : j.at("prompts")) {
            const std::string pol = e.at("polarity").get<std::string>();
            if (pol != "pos" && pol != "neg") throw DataError("polarity must be \"pos\" or \"neg\"");
            const auto pos = e.at("position").get<std::vector<double>>();
            if (pos.size() != 3) throw DataError("prompt position needs 3 coordinates");
            ps.prompts.push_back({{pos[0], pos[1], pos[2]},
                                  pol == "pos" ? Polarity::positive : Polarity::negative,
                                  StructureId(e.at("structure").get<std::string>())});
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("prompt schema error: ") + e.what());
    }
    ps.validate();
    return ps;
}

PromptSet load_prompts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return prompts_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw DataError("malformed prompt JSON " + path.string() + ": " + e.what());
    }
}

void save_prompts(const PromptSet& ps, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << prompts_to_json(ps).dump(2) << '\n';
}

json policy_to_json(const FilterPolicy& p) {
    json j = json::object();
    for (const auto& [s, r] : p.ranges) j[s.name()] = {r.lo, r.hi};
    return j;
}

FilterPolicy policy_from_json(const json& j) {
    if (!j.is_object()) throw DataError("filter policy must be a JSON object");
    FilterPolicy p;
    try {
        for (const auto& [key, value] : j.items()) {
            const auto r = value.get<std::vector<double>>();
            if (r.size() != 2) throw DataError("filter range for '" + key + "' needs [lo, hi]");
            p.ranges[StructureId(key)] = {r[0], r[1]};
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed filter policy: ") + e.what());
    }
    p.validate();
    return p;
}

FilterPolicy load_policy(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return policy_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw DataError("malformed filter policy " + path.string() + ": " + e.what());
    }
}

}  // namespace regprompt
