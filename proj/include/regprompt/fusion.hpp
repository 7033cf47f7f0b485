#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "regprompt/metrics.hpp"
#include "regprompt/prompts.hpp"
#include "regprompt/registration.hpp"
#include "regprompt/segmenter.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

struct ReferenceEntry {
    std::string id;
    Volume3D image;
    PromptSet prompts;
    MaskSet masks;  ///< only needed by the atlas strategy
};

struct ReferenceLibrary {
    std::vector<ReferenceEntry> entries;

    /// Throws PreconditionError when empty, ids repeat, or image dims differ; with require_masks, also
    /// when an entry lacks masks.
    void validate(bool require_masks = false) const;
};

/// Manifest {"entries":[{"id","image","prompts","masks"?:{structure:path}}]}; paths relative to the manifest.
[[nodiscard]] ReferenceLibrary load_library(const std::filesystem::path& manifest);

/// Voxel = 1 iff more than n_total / 2 candidates mark it. Throws PreconditionError on an empty list,
/// grid mismatch, or n_total smaller than the candidate count.
[[nodiscard]] Volume3D majority_vote(const std::vector<Volume3D>& candidates, std::size_t n_total);
[[nodiscard]] Volume3D majority_vote(const std::vector<Volume3D>& candidates);

enum class Strategy { image_alignment, prompt_alignment, atlas, no_registration };

[[nodiscard]] std::string strategy_name(Strategy s);
/// "i-align", "p-align", "atlas" or "noreg"; throws PreconditionError otherwise.
[[nodiscard]] Strategy parse_strategy(const std::string& name);

struct FusionConfig {
    RegistrationConfig registration;
    FilterPolicy policy = FilterPolicy::knee_pd();
    /// Structures to fuse; empty means every structure named in the reference prompts (or masks for atlas).
    std::vector<StructureId> structures;
    int threads = 1;
    double inverse_tolerance_mm = 0.1;
    int inverse_max_iterations = 100;
};

/// One registration per (reference, registration config) against a fixed new image, plus its inverse.
class RegistrationCache {
public:
    struct Entry {
        std::optional<RegistrationResult> result;
        std::string error;                        ///< registration failure message
        std::optional<InverseField> inverse;      ///< on the new image grid
        std::optional<std::string> inverse_error;
        bool inverse_done = false;
        std::mutex mutex;
    };

    explicit RegistrationCache(const Volume3D& new_image) : new_image_(new_image) {}

    /// Registers fixed = reference image, moving = new image on first use.
    Entry& registration(const ReferenceEntry& ref, const RegistrationConfig& cfg);
    /// Computes the inverse of the cached registration on first use (entry must hold a result).
    void ensure_inverse(Entry& e, double tol_mm, int max_iter);

    [[nodiscard]] const Volume3D& new_image() const { return new_image_; }
    [[nodiscard]] std::size_t registrations_run() const { return runs_; }

private:
    const Volume3D& new_image_;
    std::mutex mutex_;
    std::map<std::string, std::unique_ptr<Entry>> entries_;
    std::size_t runs_ = 0;
};

enum class CandidateStatus { ok, dropped };

struct CandidateRecord {
    std::string reference_id;
    StructureId structure = StructureId::femur();
    CandidateStatus status = CandidateStatus::ok;
    std::string reason;
    std::size_t prompts_out_of_bounds = 0;
    std::size_t prompts_filtered = 0;
};

struct ReferenceRecord {
    std::string reference_id;
    std::optional<double> registration_cost;
    std::optional<double> initial_cost;
    std::optional<InversionStats> inverse;
    std::string error;
};

struct FusionResult {
    Strategy strategy = Strategy::image_alignment;
    MaskSet fused;                                ///< every requested structure; all-zero when failed
    std::map<StructureId, std::size_t> votes;     ///< n_total used per structure
    std::vector<StructureId> failed_structures;   ///< all candidates dropped
    std::vector<ReferenceRecord> references;      ///< library order
    std::vector<CandidateRecord> candidates;      ///< library order, then structure order

    [[nodiscard]] nlohmann::json provenance() const;
};

/// Algorithm 1(a): register, resample the new image into each reference, segment with the reference's
/// filtered prompts, warp masks back through the inverse transform, vote.
[[nodiscard]] FusionResult run_image_alignment(const Volume3D& newimg, const ReferenceLibrary& lib,
                                               const FusionConfig& cfg, Segmenter& seg,
                                               RegistrationCache* cache = nullptr);
/// Algorithm 1(b): register, warp reference prompts into the new image, filter, segment, vote.
[[nodiscard]] FusionResult run_prompt_alignment(const Volume3D& newimg, const ReferenceLibrary& lib,
                                                const FusionConfig& cfg, Segmenter& seg,
                                                RegistrationCache* cache = nullptr);
/// Register, warp reference masks into the new image, vote.
[[nodiscard]] FusionResult run_atlas(const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                                     RegistrationCache* cache = nullptr);
/// Ablation: reference prompts used in the new image unchanged.
[[nodiscard]] FusionResult run_no_registration(const Volume3D& newimg, const ReferenceLibrary& lib,
                                               const FusionConfig& cfg, Segmenter& seg);

/// Dispatch on strategy (seg is unused for atlas).
[[nodiscard]] FusionResult run_strategy(Strategy s, const Volume3D& newimg, const ReferenceLibrary& lib,
                                        const FusionConfig& cfg, Segmenter& seg, RegistrationCache* cache = nullptr);

}  // namespace regprompt
