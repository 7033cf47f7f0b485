#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "regprompt/transform.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

/// Anatomical structure tag. The four knee structures are predefined; any non-empty name is accepted.
class StructureId {
public:
    explicit StructureId(std::string name);

    static StructureId femur() { return StructureId("femur"); }
    static StructureId tibia() { return StructureId("tibia"); }
    static StructureId femoral_cartilage() { return StructureId("femoral_cartilage"); }
    static StructureId tibial_cartilage() { return StructureId("tibial_cartilage"); }
    static std::vector<StructureId> knee();

    [[nodiscard]] const std::string& name() const { return name_; }
    friend auto operator<=>(const StructureId&, const StructureId&) = default;

private:
    std::string name_;
};

enum class Polarity { positive, negative };

struct PointPrompt {
    VoxelCoord position;
    Polarity polarity = Polarity::positive;
    StructureId structure = StructureId::femur();

    /// Slice the prompt belongs to: round(w).
    [[nodiscard]] int slice() const;
    friend bool operator==(const PointPrompt&, const PointPrompt&) = default;
};

struct PromptSet {
    std::string owner;
    std::vector<PointPrompt> prompts;

    [[nodiscard]] std::vector<StructureId> structures() const;
    [[nodiscard]] std::vector<PointPrompt> for_structure(const StructureId& s) const;
    [[nodiscard]] std::size_t positive_count(const StructureId& s) const;
    /// Throws DataError when a present structure lacks a positive prompt or a position is not finite.
    void validate() const;

    friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

struct IntensityRange {
    double lo = 0.0;
    double hi = 0.0;
};

/// Intensity window per structure for positive prompts.
struct FilterPolicy {
    std::map<StructureId, IntensityRange> ranges;

    /// Knee PD-weighted defaults: bone [0, 1200], cartilage [800, 3000].
    static FilterPolicy knee_pd();
    void validate() const;
};

struct WarpedPrompts {
    PromptSet prompts;
    std::size_t dropped_out_of_bounds = 0;
};

/// position -> world (ref grid) -> t -> voxel (new grid); prompts leaving new_grid are dropped.
[[nodiscard]] WarpedPrompts warp_prompts(const PromptSet& ps, const SpatialTransform& t, const Grid& ref_grid,
                                         const Grid& new_grid);

struct FilteredPrompts {
    PromptSet prompts;
    std::map<StructureId, std::size_t> removed;       ///< positives removed per structure
    std::vector<StructureId> empty_structures;        ///< had positives before, none after
};

/// Drops positive prompts whose trilinear intensity falls outside the policy range of their structure.
/// Negative prompts and structures without a policy entry pass through.
[[nodiscard]] FilteredPrompts filter_prompts(const PromptSet& ps, const Volume3D& image, const FilterPolicy& policy);

nlohmann::json prompts_to_json(const PromptSet& ps);
[[nodiscard]] PromptSet prompts_from_json(const nlohmann::json& j);
[[nodiscard]] PromptSet load_prompts(const std::filesystem::path& path);
void save_prompts(const PromptSet& ps, const std::filesystem::path& path);

nlohmann::json policy_to_json(const FilterPolicy& p);
[[nodiscard]] FilterPolicy policy_from_json(const nlohmann::json& j);
[[nodiscard]] FilterPolicy load_policy(const std::filesystem::path& path);

}  // namespace regprompt
