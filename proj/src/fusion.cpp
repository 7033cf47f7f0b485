#include "regprompt/fusion.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <set>
#include <thread>

#include "regprompt/log.hpp"
#include "regprompt/volume_io.hpp"

namespace regprompt {

using nlohmann::json;

void ReferenceLibrary::validate(bool require_masks) const {
    if (entries.empty()) throw PreconditionError("reference library is empty");
    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (!ids.insert(e.id).second) throw PreconditionError("duplicate reference id '" + e.id + "'");
        if (!(e.image.dims() == entries.front().image.dims()))
            throw PreconditionError("reference '" + e.id + "' is not preprocessed to the common size");
        if (require_masks && e.masks.empty()) throw PreconditionError("reference '" + e.id + "' has no masks");
    }
}

ReferenceLibrary load_library(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DataError("cannot open library manifest " + manifest.string());
    const auto base = manifest.parent_path();
    const auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return path.is_absolute() ? path : base / path;
    };
    ReferenceLibrary lib;
    try {
        const json j = json::parse(in);
        for (const auto& e : j.at("entries")) {
            ReferenceEntry r;
            r.id = e.at("id").get<std::string>();
            r.image = load_volume(resolve(e.at("image").get<std::string>()));
            r.prompts = load_prompts(resolve(e.at("prompts").get<std::string>()));
            if (e.contains("masks") && !e.at("masks").is_null())
                for (const auto& [name, path] : e.at("masks").items()) {
                    Volume3D m = load_volume(resolve(path.get<std::string>()));
                    if (!m.is_mask()) m = threshold_mask(m, 0.5);
                    r.masks.emplace(StructureId(name), std::move(m));
                }
            lib.entries.push_back(std::move(r));
        }
    } catch (const json::exception& e) {
        throw DataError("malformed library manifest " + manifest.string() + ": " + e.what());
    }
    lib.validate();
    return lib;
}

Volume3D majority_vote(const std::vector<Volume3D>& candidates, std::size_t n_total) {
    if (candidates.empty()) throw PreconditionError("majority vote needs at least one candidate");
    if (n_total < candidates.size()) throw PreconditionError("n_total is smaller than the candidate count");
    const Grid& g = candidates.front().grid();
    std::vector<std::uint32_t> counts(g.voxel_count(), 0);
    for (const auto& c : candidates) {
        if (!(c.grid() == g)) throw PreconditionError("vote candidates are on different grids");
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += c[i] != 0.0f;
    }
    std::vector<float> out(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) out[i] = 2 * static_cast<std::size_t>(counts[i]) > n_total ? 1.0f : 0.0f;
    return Volume3D(g, VolumeKind::binary_mask, std::move(out));
}

Volume3D majority_vote(const std::vector<Volume3D>& candidates) { return majority_vote(candidates, candidates.size()); }

std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::image_alignment: return "i-align";
        case Strategy::prompt_alignment: return "p-align";
        case Strategy::atlas: return "atlas";
        case Strategy::no_registration: return "noreg";
    }
    return "unknown";
}

Strategy parse_strategy(const std::string& name) {
    for (Strategy s : {Strategy::image_alignment, Strategy::prompt_alignment, Strategy::atlas, Strategy::no_registration})
        if (strategy_name(s) == name) return s;
    throw PreconditionError("unknown strategy '" + name + "' (expected i-align, p-align, atlas or noreg)");
}

RegistrationCache::Entry& RegistrationCache::registration(const ReferenceEntry& ref, const RegistrationConfig& cfg) {
    Entry* e = nullptr;
    {
        std::lock_guard lock(mutex_);
        auto& slot = entries_[ref.id + "|" + config_to_json(cfg).dump()];
        if (!slot) slot = std::make_unique<Entry>();
        e = slot.get();
    }
    std::lock_guard lock(e->mutex);
    if (e->result || !e->error.empty()) return *e;
    try {
        e->result = register_images(ref.image, new_image_, cfg);
    } catch (const RegistrationError& err) {
        e->error = err.what();
        if (e->error.empty()) e->error = "registration failed";
    }
    {
        std::lock_guard count(mutex_);
        ++runs_;
    }
    log::info("fusion.registration",
              {{"reference", ref.id}, {"ok", e->result.has_value()},
               {"cost", e->result ? json(e->result->final_cost) : json(nullptr)}});
    return *e;
}

void RegistrationCache::ensure_inverse(Entry& e, double tol_mm, int max_iter) {
    std::lock_guard lock(e.mutex);
    if (e.inverse_done || !e.result) return;
    e.inverse_done = true;
    try {
        e.inverse = invert(SpatialTransform(e.result->transform), new_image_.grid(), tol_mm, max_iter);
    } catch (const InversionError& err) {
        e.inverse_error = err.what();
    } catch (const DataError& err) {
        e.inverse_error = err.what();
    }
}

namespace {

struct CandidateOutput {
    CandidateRecord record;
    std::optional<Volume3D> mask;
};

struct ReferenceOutput {
    ReferenceRecord record;
    std::vector<CandidateOutput> candidates;
};

/// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the lowest-index failure.
template <typename Fn>
void parallel_for(std::size_t n, int threads, const Fn& fn) {
    std::vector<std::exception_ptr> errors(n);
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::vector<StructureId> structures_for(const FusionConfig& cfg, const ReferenceLibrary& lib, bool from_masks) {
    if (!cfg.structures.empty()) {
        auto s = cfg.structures;
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
        return s;
    }
    std::set<StructureId> all;
    for (const auto& e : lib.entries) {
        if (from_masks)
            for (const auto& [s, m] : e.masks) all.insert(s);
        else
            for (const auto& s : e.prompts.structures()) all.insert(s);
    }
    return {all.begin(), all.end()};
}

PromptSet only(const PromptSet& ps, const StructureId& s) {
    PromptSet out;
    out.owner = ps.owner;
    out.prompts = ps.for_structure(s);
    return out;
}

CandidateOutput dropped(const std::string& ref, const StructureId& s, std::string reason) {
    return {{ref, s, CandidateStatus::dropped, std::move(reason), 0, 0}, std::nullopt};
}

/// Filters, then segments one structure; failures become dropped candidates.
CandidateOutput segment_candidate(Segmenter& seg, const Volume3D& image, const PromptSet& prompts,
                                  const StructureId& s, const std::string& ref_id, const FilterPolicy& policy,
                                  std::size_t out_of_bounds) {
    CandidateOutput c{{ref_id, s, CandidateStatus::ok, "", out_of_bounds, 0}, std::nullopt};
    const FilteredPrompts filtered = filter_prompts(prompts, image, policy);
    if (const auto it = filtered.removed.find(s); it != filtered.removed.end()) c.record.prompts_filtered = it->second;
    try {
        c.mask = segment_volume(seg, image, filtered.prompts, s, ref_id);
    } catch (const StructureEmptyError& e) {
        c.record.status = CandidateStatus::dropped;
        c.record.reason = "structure-empty";
    } catch (const BackendError& e) {
        c.record.status = CandidateStatus::dropped;
        c.record.reason = std::string("backend: ") + e.what();
    }
    return c;
}

struct Registered {
    const RegistrationCache::Entry* entry = nullptr;
    std::string failure;
};

Registered register_reference(RegistrationCache& cache, const ReferenceEntry& ref, const FusionConfig& cfg,
                              bool need_inverse, ReferenceRecord& rec) {
    auto& e = cache.registration(ref, cfg.registration);
    if (!e.result) {
        rec.error = e.error;
        return {nullptr, "registration: " + e.error};
    }
    rec.registration_cost = e.result->final_cost;
    if (!e.result->levels.empty()) rec.initial_cost = e.result->levels.front().initial_cost;
    if (need_inverse) {
        cache.ensure_inverse(e, cfg.inverse_tolerance_mm, cfg.inverse_max_iterations);
        if (e.inverse) rec.inverse = e.inverse->stats;
        if (e.inverse_error) {
            rec.error = *e.inverse_error;
            return {nullptr, "inverse: " + *e.inverse_error};
        }
    }
    return {&e, ""};
}

Volume3D pull_back(const Volume3D& mask, const Grid& onto, const InverseField& inv) {
    return resample_through(mask, onto, [&](const Vec3& y) { return inv.field.apply(y); }, Interpolation::nearest);
}

template <typename PerReference>
FusionResult fuse(Strategy strategy, const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                  const std::vector<StructureId>& structures, const PerReference& per_reference) {
    std::vector<ReferenceOutput> outputs(lib.entries.size());
    parallel_for(lib.entries.size(), cfg.threads, [&](std::size_t i) { outputs[i] = per_reference(lib.entries[i]); });

    FusionResult r;
    r.strategy = strategy;
    for (auto& o : outputs) {
        r.references.push_back(o.record);
        for (auto& c : o.candidates) r.candidates.push_back(c.record);
    }
    for (const auto& s : structures) {
        std::vector<Volume3D> ok;
        for (auto& o : outputs)
            for (auto& c : o.candidates)
                if (c.record.structure == s && c.record.status == CandidateStatus::ok && c.mask) ok.push_back(*c.mask);
        r.votes[s] = ok.size();
        if (ok.empty()) {
            r.failed_structures.push_back(s);
            r.fused.emplace(s, Volume3D::zeros(newimg.grid(), VolumeKind::binary_mask));
        } else {
            r.fused.emplace(s, majority_vote(ok, ok.size()));
        }
    }
    log::info("fusion.done", {{"strategy", strategy_name(strategy)}, {"references", lib.entries.size()},
                              {"failed_structures", r.failed_structures.size()}});
    return r;
}

}  // namespace

FusionResult run_image_alignment(const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                                 Segmenter& seg, RegistrationCache* cache) {
    lib.validate();
    RegistrationCache local(newimg);
    RegistrationCache& rc = cache ? *cache : local;
    const auto structures = structures_for(cfg, lib, false);
    return fuse(Strategy::image_alignment, newimg, lib, cfg, structures, [&](const ReferenceEntry& ref) {
        ReferenceOutput out{{ref.id, {}, {}, {}, {}}, {}};
        const Registered reg = register_reference(rc, ref, cfg, true, out.record);
        if (!reg.entry) {
            for (const auto& s : structures) out.candidates.push_back(dropped(ref.id, s, reg.failure));
            return out;
        }
        const SpatialTransform t(reg.entry->result->transform);
        const Volume3D warped = resample_through(newimg, ref.image.grid(), t, Interpolation::trilinear);
        for (const auto& s : structures) {
            const PromptSet ps = only(ref.prompts, s);
            if (ps.positive_count(s) == 0) {
                out.candidates.push_back(dropped(ref.id, s, "no-prompts"));
                continue;
            }
            CandidateOutput c = segment_candidate(seg, warped, ps, s, ref.id, cfg.policy, 0);
            if (c.mask) c.mask = pull_back(*c.mask, newimg.grid(), *reg.entry->inverse);
            out.candidates.push_back(std::move(c));
        }
        return out;
    });
}

FusionResult run_prompt_alignment(const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                                  Segmenter& seg, RegistrationCache* cache) {
    lib.validate();
    RegistrationCache local(newimg);
    RegistrationCache& rc = cache ? *cache : local;
    const auto structures = structures_for(cfg, lib, false);
    return fuse(Strategy::prompt_alignment, newimg, lib, cfg, structures, [&](const ReferenceEntry& ref) {
        ReferenceOutput out{{ref.id, {}, {}, {}, {}}, {}};
        const Registered reg = register_reference(rc, ref, cfg, false, out.record);
        if (!reg.entry) {
            for (const auto& s : structures) out.candidates.push_back(dropped(ref.id, s, reg.failure));
            return out;
        }
        const SpatialTransform t(reg.entry->result->transform);
        for (const auto& s : structures) {
            const PromptSet ps = only(ref.prompts, s);
            if (ps.positive_count(s) == 0) {
                out.candidates.push_back(dropped(ref.id, s, "no-prompts"));
                continue;
            }
            const WarpedPrompts warped = warp_prompts(ps, t, ref.image.grid(), newimg.grid());
            out.candidates.push_back(
                segment_candidate(seg, newimg, warped.prompts, s, ref.id, cfg.policy, warped.dropped_out_of_bounds));
        }
        return out;
    });
}

FusionResult run_atlas(const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                       RegistrationCache* cache) {
    lib.validate(true);
    RegistrationCache local(newimg);
    RegistrationCache& rc = cache ? *cache : local;
    const auto structures = structures_for(cfg, lib, true);
    for (const auto& e : lib.entries)
        for (const auto& s : structures)
            if (!e.masks.contains(s))
                throw PreconditionError("reference '" + e.id + "' has no mask for '" + s.name() + "'");
    return fuse(Strategy::atlas, newimg, lib, cfg, structures, [&](const ReferenceEntry& ref) {
        ReferenceOutput out{{ref.id, {}, {}, {}, {}}, {}};
        const Registered reg = register_reference(rc, ref, cfg, true, out.record);
        for (const auto& s : structures) {
            if (!reg.entry) {
                out.candidates.push_back(dropped(ref.id, s, reg.failure));
                continue;
            }
            CandidateOutput c{{ref.id, s, CandidateStatus::ok, "", 0, 0}, std::nullopt};
            c.mask = pull_back(ref.masks.at(s), newimg.grid(), *reg.entry->inverse);
            out.candidates.push_back(std::move(c));
        }
        return out;
    });
}

FusionResult run_no_registration(const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                                 Segmenter& seg) {
    lib.validate();
    const auto structures = structures_for(cfg, lib, false);
    return fuse(Strategy::no_registration, newimg, lib, cfg, structures, [&](const ReferenceEntry& ref) {
        ReferenceOutput out{{ref.id, {}, {}, {}, {}}, {}};
        for (const auto& s : structures) {
            PromptSet ps = only(ref.prompts, s);
            if (ps.positive_count(s) == 0) {
                out.candidates.push_back(dropped(ref.id, s, "no-prompts"));
                continue;
            }
            const auto before = ps.prompts.size();
            std::erase_if(ps.prompts, [&](const PointPrompt& p) { return !newimg.grid().contains(p.position); });
            out.candidates.push_back(
                segment_candidate(seg, newimg, ps, s, ref.id, cfg.policy, before - ps.prompts.size()));
        }
        return out;
    });
}

FusionResult run_strategy(Strategy s, const Volume3D& newimg, const ReferenceLibrary& lib, const FusionConfig& cfg,
                          Segmenter& seg, RegistrationCache* cache) {
    switch (s) {
        case Strategy::image_alignment: return run_image_alignment(newimg, lib, cfg, seg, cache);
        case Strategy::prompt_alignment: return run_prompt_alignment(newimg, lib, cfg, seg, cache);
        case Strategy::atlas: return run_atlas(newimg, lib, cfg, cache);
        case Strategy::no_registration: return run_no_registration(newimg, lib, cfg, seg);
    }
    throw PreconditionError("unknown strategy");
}

json FusionResult::provenance() const {
    json refs = json::array();
    for (const auto& r : references) {
        json inv = nullptr;
        if (r.inverse)
            inv = {{"max_residual_mm", r.inverse->max_residual_mm},
                   {"mean_residual_mm", r.inverse->mean_residual_mm},
                   {"fraction_within_tol", r.inverse->fraction_within_tol},
                   {"interior_points", r.inverse->interior_points},
                   {"jacobian_violations", r.inverse->jacobian_violations}};
        refs.push_back({{"id", r.reference_id},
                        {"initial_cost", r.initial_cost ? json(*r.initial_cost) : json(nullptr)},
                        {"registration_cost", r.registration_cost ? json(*r.registration_cost) : json(nullptr)},
                        {"inverse", std::move(inv)},
                        {"error", r.error.empty() ? json(nullptr) : json(r.error)}});
    }
    json cands = json::array();
    for (const auto& c : candidates)
        cands.push_back({{"reference", c.reference_id},
                         {"structure", c.structure.name()},
                         {"status", c.status == CandidateStatus::ok ? "ok" : "dropped"},
                         {"reason", c.reason.empty() ? json(nullptr) : json(c.reason)},
                         {"prompts_out_of_bounds", c.prompts_out_of_bounds},
                         {"prompts_filtered", c.prompts_filtered}});
    json votes = json::object();
    for (const auto& [s, n] : this->votes) votes[s.name()] = n;
    json failed = json::array();
    for (const auto& s : failed_structures) failed.push_back(s.name());
    return {{"strategy", strategy_name(strategy)},
            {"references", std::move(refs)},
            {"candidates", std::move(cands)},
            {"votes", std::move(votes)},
            {"failed_structures", std::move(failed)}};
}

}  // namespace regprompt
