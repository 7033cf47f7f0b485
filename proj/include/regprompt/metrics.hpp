#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "regprompt/prompts.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

using MaskSet = std::map<StructureId, Volume3D>;

/// 2|A n B| / (|A| + |B|); 1 when both are empty. Throws DataError on grid mismatch.
[[nodiscard]] double dice(const Volume3D& a, const Volume3D& b);
/// 1 - |A n B| / |A u B|; 0 when both are empty.
[[nodiscard]] double voe(const Volume3D& a, const Volume3D& b);

/// Foreground voxels with at least one 6-connected background neighbour (outside the volume counts).
[[nodiscard]] std::vector<std::uint8_t> surface_voxels(const Volume3D& mask);

/// Root-mean-square symmetric surface distance in mm between border-voxel centres.
/// Empty when either mask is empty.
[[nodiscard]] std::optional<double> rmsd(const Volume3D& a, const Volume3D& b);

/// Slices w where the union of the femur and tibia ground truth has a foreground voxel.
[[nodiscard]] std::vector<int> filter_slices_with_bone(const MaskSet& gt);

/// Copy of the mask with every slice outside `slices` cleared.
[[nodiscard]] Volume3D restrict_to_slices(const Volume3D& mask, const std::vector<int>& slices);

struct StructureMetrics {
    std::optional<double> dice;
    std::optional<double> voe;
    std::optional<double> rmsd_mm;
};

struct EvaluationReport {
    std::string case_id;
    std::string strategy;
    std::vector<int> slices;
    std::map<StructureId, StructureMetrics> structures;

    [[nodiscard]] nlohmann::json to_json() const;
    /// One CSV line per structure (no header), undefined values written as NA.
    [[nodiscard]] std::vector<std::string> csv_rows() const;
    static std::string csv_header() { return "case,strategy,structure,dice,voe,rmsd_mm,n_slices"; }
};

/// Metrics per ground-truth structure on the bone-slice sub-volume. Structures missing from pred,
/// or with an empty side after slice restriction, get undefined markers where the metric needs them.
[[nodiscard]] EvaluationReport evaluate_case(const MaskSet& pred, const MaskSet& gt, const std::string& case_id,
                                             const std::string& strategy);

}  // namespace regprompt
