#include <doctest.h>

#include <fstream>

#include "helpers.hpp"
#include "regprompt/fusion.hpp"
#include "regprompt/volume_io.hpp"

using namespace regprompt;
using namespace testutil;

namespace {

Volume3D vote_oracle(const std::vector<Volume3D>& c, std::size_t n_total) {
    std::vector<float> out(c.front().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t n = 0;
        for (const auto& m : c) n += m[i] != 0.0f;
        out[i] = 2 * n > n_total ? 1.0f : 0.0f;
    }
    return Volume3D(c.front().grid(), VolumeKind::binary_mask, std::move(out));
}

Volume3D single_voxel_votes(std::size_t candidates_marking, std::size_t total, std::vector<Volume3D>& out) {
    const Grid g{{2, 1, 1}, {1, 1, 1}, {}};
    out.clear();
    for (std::size_t c = 0; c < total; ++c)
        out.emplace_back(g, VolumeKind::binary_mask, std::vector<float>{c < candidates_marking ? 1.0f : 0.0f, 0.0f});
    return majority_vote(out);
}

ReferenceLibrary library_of(const Phantom& ph, int copies, bool with_masks) {
    ReferenceLibrary lib;
    for (int i = 0; i < copies; ++i)
        lib.entries.push_back({"ref" + std::to_string(i + 1), ph.image, ph.prompts, with_masks ? ph.masks : MaskSet{}});
    return lib;
}

std::size_t dropped_count(const FusionResult& r, const StructureId& s) {
    std::size_t n = 0;
    for (const auto& c : r.candidates) n += c.structure == s && c.status == CandidateStatus::dropped;
    return n;
}

}  // namespace

TEST_CASE("majority vote threshold and ties") {
    std::vector<Volume3D> c;
    CHECK(single_voxel_votes(3, 5, c)[0] == 1.0f);
    CHECK(single_voxel_votes(2, 4, c)[0] == 0.0f);
    CHECK(single_voxel_votes(1, 1, c)[0] == 1.0f);
    CHECK(single_voxel_votes(1, 2, c)[0] == 0.0f);

    // Dropped candidates count against the voxel when n_total exceeds the candidate list.
    single_voxel_votes(2, 2, c);
    CHECK(majority_vote(c, 3)[0] == 1.0f);
    CHECK(majority_vote(c, 4)[0] == 0.0f);
    CHECK_THROWS_AS((void)majority_vote(c, 1), PreconditionError);
    CHECK_THROWS_AS((void)majority_vote({}), PreconditionError);
    c.push_back(Volume3D::zeros(Grid{{3, 1, 1}, {1, 1, 1}, {}}, VolumeKind::binary_mask));
    CHECK_THROWS_AS((void)majority_vote(c), PreconditionError);
}

TEST_CASE("majority vote equals a per-voxel count oracle") {
    std::mt19937_64 rng(77);
    std::uniform_int_distribution<int> side(1, 6), count(1, 7);
    for (int t = 0; t < 50; ++t) {
        const Index3 dims{side(rng), side(rng), side(rng)};
        std::vector<Volume3D> c;
        const int n = count(rng);
        for (int i = 0; i < n; ++i) c.push_back(random_mask(rng, dims, 0.5));
        REQUIRE(majority_vote(c) == vote_oracle(c, c.size()));
        REQUIRE(majority_vote(c, c.size() + 2) == vote_oracle(c, c.size() + 2));
    }
}

TEST_CASE("strategy names") {
    for (auto s : {Strategy::image_alignment, Strategy::prompt_alignment, Strategy::atlas, Strategy::no_registration})
        CHECK(parse_strategy(strategy_name(s)) == s);
    CHECK(strategy_name(Strategy::image_alignment) == "i-align");
    CHECK_THROWS_AS((void)parse_strategy("nnunet"), PreconditionError);
}

TEST_CASE("self-reference reproduces direct segmentation") {
    const Phantom ph = make_phantom(small_spec(), 31, "self");
    ReferenceLibrary lib;
    lib.entries.push_back({"self", ph.image, ph.prompts, ph.masks});
    FusionConfig cfg;
    ToySegmenter toy;

    for (Strategy s : {Strategy::image_alignment, Strategy::prompt_alignment}) {
        CAPTURE(strategy_name(s));
        const FusionResult r = run_strategy(s, ph.image, lib, cfg, toy);
        CHECK(r.failed_structures.empty());
        for (const auto& st : StructureId::knee()) {
            const FilteredPrompts fp = filter_prompts(ph.prompts, ph.image, cfg.policy);
            CHECK(r.fused.at(st) == segment_volume(toy, ph.image, fp.prompts, st));
        }
    }
    const FusionResult atlas = run_atlas(ph.image, lib, cfg);
    for (const auto& st : StructureId::knee()) CHECK(atlas.fused.at(st) == ph.masks.at(st));
}

TEST_CASE("atlas with the new image in the library keeps its own masks where three of five agree") {
    const Phantom self = make_phantom(small_spec(), 32, "self");
    ReferenceLibrary lib = library_of(self, 3, true);
    const Phantom other = make_phantom(small_spec(), 33, "other");
    ReferenceLibrary two;
    for (int i = 0; i < 2; ++i) {
        MaskSet empty;
        for (const auto& [s, m] : other.masks) empty.emplace(s, Volume3D::zeros(m.grid(), VolumeKind::binary_mask));
        lib.entries.push_back({"blank" + std::to_string(i), self.image, self.prompts, empty});
    }
    const FusionResult r = run_atlas(self.image, lib, FusionConfig{});
    for (const auto& st : StructureId::knee()) CHECK(r.fused.at(st) == self.masks.at(st));

    CHECK_THROWS_AS((void)run_atlas(self.image, library_of(self, 2, false), FusionConfig{}), PreconditionError);
}

TEST_CASE("backend failures on two of five references leave a vote over three") {
    const Phantom ph = make_phantom(small_spec(), 34, "p");
    const ReferenceLibrary lib = library_of(ph, 5, false);
    auto seg = make_segmenter(std::string("exec:") + REGPROMPT_MOCK_SEGMENTER + " --fail-ids ref2/,ref4/");
    const FusionResult r = run_no_registration(ph.image, lib, FusionConfig{}, *seg);
    CHECK(r.failed_structures.empty());
    for (const auto& st : StructureId::knee()) {
        CHECK(r.votes.at(st) == 3);
        CHECK(dropped_count(r, st) == 2);
    }
    for (const auto& c : r.candidates)
        if (c.status == CandidateStatus::dropped) CHECK(c.reason.starts_with("backend:"));
    const auto prov = r.provenance();
    CHECK(prov["candidates"].size() == 20);
}

TEST_CASE("all-zero backend masks give empty structures without failures") {
    const Phantom ph = make_phantom(small_spec(), 35, "p");
    auto seg = make_segmenter(std::string("exec:") + REGPROMPT_MOCK_SEGMENTER + " --mode zeros");
    const FusionResult r = run_no_registration(ph.image, library_of(ph, 3, false), FusionConfig{}, *seg);
    CHECK(r.failed_structures.empty());
    for (const auto& [s, m] : r.fused) CHECK(count_nonzero(m) == 0);
}

TEST_CASE("references whose prompts are all filtered drop out of the vote") {
    const Phantom ph = make_phantom(small_spec(), 36, "p");
    ReferenceLibrary lib = library_of(ph, 5, false);
    FusionConfig cfg;
    cfg.structures = {StructureId::femur()};
    // Move every femur positive of three references onto cartilage, which the bone window rejects.
    PromptSet moved = ph.prompts;
    const PointPrompt onto = [&] {
        for (const auto& p : ph.prompts.prompts)
            if (p.structure == StructureId::femoral_cartilage() && p.polarity == Polarity::positive) return p;
        FAIL("no cartilage prompt");
        return ph.prompts.prompts.front();
    }();
    for (auto& p : moved.prompts)
        if (p.structure == StructureId::femur() && p.polarity == Polarity::positive) p.position = onto.position;
    for (int i : {0, 2, 4}) lib.entries[static_cast<std::size_t>(i)].prompts = moved;

    ToySegmenter toy;
    const FusionResult r = run_no_registration(ph.image, lib, cfg, toy);
    CHECK(r.votes.at(StructureId::femur()) == 2);
    CHECK(dropped_count(r, StructureId::femur()) == 3);
    for (const auto& c : r.candidates)
        if (c.status == CandidateStatus::dropped) CHECK(c.reason == "structure-empty");

    const Volume3D direct = segment_volume(toy, ph.image, filter_prompts(ph.prompts, ph.image, cfg.policy).prompts,
                                           StructureId::femur());
    CHECK(r.fused.at(StructureId::femur()) == direct);
}

TEST_CASE("fusion results do not depend on the thread count") {
    const Phantom ph = make_phantom(small_spec(), 37, "p");
    ReferenceLibrary lib;
    for (int i = 0; i < 4; ++i) {
        const Phantom ref = make_phantom(small_spec(), 40 + static_cast<std::uint64_t>(i), "r");
        lib.entries.push_back({"r" + std::to_string(i), ref.image, ref.prompts, {}});
    }
    ToySegmenter toy;
    FusionConfig one, many;
    many.threads = 3;
    const FusionResult a = run_no_registration(ph.image, lib, one, toy);
    const FusionResult b = run_no_registration(ph.image, lib, many, toy);
    CHECK(a.fused == b.fused);
    CHECK(a.provenance() == b.provenance());
}

TEST_CASE("library manifest") {
    const auto dir = scratch_dir("manifest");
    const Phantom ph = make_phantom(small_spec(), 38, "a");
    std::filesystem::create_directories(dir / "a");
    save_volume(ph.image, dir / "a" / "img.nii");
    save_prompts(ph.prompts, dir / "a" / "p.json");
    save_volume(ph.masks.at(StructureId::tibia()), dir / "a" / "tibia.nii");
    std::ofstream(dir / "lib.json")
        << R"({"entries":[{"id":"a","image":"a/img.nii","prompts":"a/p.json","masks":{"tibia":"a/tibia.nii"}}]})";
    const ReferenceLibrary lib = load_library(dir / "lib.json");
    REQUIRE(lib.entries.size() == 1);
    CHECK(lib.entries[0].image == ph.image);
    CHECK(lib.entries[0].masks.at(StructureId::tibia()) == ph.masks.at(StructureId::tibia()));

    std::ofstream(dir / "bad.json") << R"({"entries":[{"id":"a","image":"a/missing.nii","prompts":"a/p.json"}]})";
    CHECK_THROWS_AS((void)load_library(dir / "bad.json"), DataError);

    ReferenceLibrary dup;
    dup.entries = {lib.entries[0], lib.entries[0]};
    CHECK_THROWS_AS(dup.validate(), PreconditionError);
    CHECK_THROWS_AS(ReferenceLibrary{}.validate(), PreconditionError);
}
