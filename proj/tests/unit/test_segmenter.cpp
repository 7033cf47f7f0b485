#include <doctest.h>

#include <deque>

#include "helpers.hpp"
#include "regprompt/segmenter.hpp"

using namespace regprompt;
using namespace testutil;

namespace {

template <typename F>
Slice2D slice_of(int w, int h, F&& f) {
    Slice2D s{w, h, 1.0, 1.0, std::vector<float>(static_cast<std::size_t>(w * h))};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) s.pixels[static_cast<std::size_t>(y * w + x)] = static_cast<float>(f(x, y));
    return s;
}

SegmenterRequest req(Slice2D s, std::vector<SlicePoint> pts, std::string id = "t") {
    return {std::move(id), StructureId::femur(), std::move(s), std::move(pts)};
}

/// Independent oracle: BFS over 4-neighbours from one seed with the |I - I(seed)| <= tau rule.
std::vector<std::uint8_t> oracle_fill(const Slice2D& s, int sx, int sy, double tau) {
    std::vector<std::uint8_t> m(s.pixels.size(), 0);
    const double ref = s.at(sx, sy);
    std::deque<std::pair<int, int>> q{{sx, sy}};
    m[static_cast<std::size_t>(sy * s.width + sx)] = 1;
    while (!q.empty()) {
        auto [x, y] = q.front();
        q.pop_front();
        const int nx[4] = {x - 1, x + 1, x, x}, ny[4] = {y, y, y - 1, y + 1};
        for (int n = 0; n < 4; ++n) {
            if (nx[n] < 0 || ny[n] < 0 || nx[n] >= s.width || ny[n] >= s.height) continue;
            auto& cell = m[static_cast<std::size_t>(ny[n] * s.width + nx[n])];
            if (cell || std::abs(s.at(nx[n], ny[n]) - ref) > tau) continue;
            cell = 1;
            q.emplace_back(nx[n], ny[n]);
        }
    }
    return m;
}

std::string mock(const std::string& args = "") { return std::string("exec:") + REGPROMPT_MOCK_SEGMENTER + " " + args; }

BackendError::Kind backend_kind(Segmenter& s, const SegmenterRequest& r) {
    try {
        (void)segment_slice(s, r);
    } catch (const BackendError& e) {
        return e.kind();
    }
    FAIL("expected a backend error");
    return BackendError::Kind::remote;
}

}  // namespace

TEST_CASE("toy segmenter on hand-computable slices") {
    ToySegmenter toy(200.0);
    const auto uniform = segment_slice(toy, req(slice_of(7, 5, [](int, int) { return 42; }), {{3, 2, Polarity::positive}}));
    CHECK(uniform.mask.count() == 35);

    const auto halves = slice_of(10, 6, [](int x, int) { return x < 4 ? 100 : 2000; });
    const auto r = segment_slice(toy, req(halves, {{1, 3, Polarity::positive}}));
    for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 10; ++x) REQUIRE(r.mask.at(x, y) == (x < 4));

    const auto block = slice_of(20, 20, [](int x, int y) { return x >= 5 && x < 15 && y >= 3 && y < 13 ? 300 : 3000; });
    const auto b = segment_slice(toy, req(block, {{9.4, 7.6, Polarity::positive}}));
    CHECK(b.mask.count() == 100);
    CHECK(b.mask.at(5, 3) == 1);
    CHECK(b.mask.at(15, 3) == 0);

    const auto removed = segment_slice(toy, req(block, {{9, 7, Polarity::positive}, {6, 4, Polarity::negative}}));
    CHECK(removed.mask.count() == 0);

    const auto two = slice_of(20, 10, [](int x, int y) { return (x < 5 || x >= 15) && y < 5 ? 500 : 0; });
    const auto u = segment_slice(toy, req(two, {{1, 1, Polarity::positive}, {18, 2, Polarity::positive}}));
    CHECK(u.mask.count() == 50);
}

TEST_CASE("toy segmenter matches an independent flood fill") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> noise(0, 400);
    ToySegmenter toy(120.0);
    for (int trial = 0; trial < 25; ++trial) {
        const auto s = slice_of(23, 17, [&](int, int) { return noise(rng); });
        std::uniform_int_distribution<int> px(0, 22), py(0, 16);
        const int x = px(rng), y = py(rng);
        const auto got = segment_slice(toy, req(s, {{double(x), double(y), Polarity::positive}}));
        REQUIRE(got.mask.values == oracle_fill(s, x, y, 120.0));
    }
}

TEST_CASE("request preconditions") {
    ToySegmenter toy;
    const auto s = slice_of(4, 4, [](int, int) { return 1; });
    CHECK_THROWS_AS((void)segment_slice(toy, req(s, {})), PreconditionError);
    CHECK_THROWS_AS((void)segment_slice(toy, req(s, {{1, 1, Polarity::negative}})), PreconditionError);
    CHECK_THROWS_AS((void)segment_slice(toy, req(s, {{4.2, 1, Polarity::positive}})), PreconditionError);
    CHECK_THROWS_AS((void)ToySegmenter(-1.0), PreconditionError);
}

TEST_CASE("segment_volume gates on prompted slices") {
    const Grid g{{12, 12, 10}, {1, 1, 2}, {}};
    const Volume3D v = generate(g, [](int i, int j, int) { return i > 2 && i < 9 && j > 2 && j < 9 ? 400 : 50; });
    ToySegmenter toy;
    const PromptSet ps{"x", {{{5, 5, 7}, Polarity::positive, StructureId::femur()},
                             {{5, 5, 3}, Polarity::positive, StructureId::tibia()}}};
    const Volume3D m = segment_volume(toy, v, ps, StructureId::femur());
    CHECK(m.is_mask());
    for (int k = 0; k < 10; ++k) {
        std::size_t n = 0;
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i) n += m.at(i, j, k) != 0.0f;
        CHECK(n == (k == 7 ? 36u : 0u));
    }
    CHECK_THROWS_AS((void)segment_volume(toy, v, PromptSet{}, StructureId::femur()), StructureEmptyError);
}

TEST_CASE("segment_volume on a sphere equals per-slice flood fills") {
    const Grid g{{24, 24, 16}, {1, 1, 1}, {}};
    const Volume3D v = generate(g, [](int i, int j, int k) {
        const double r2 = (i - 11.5) * (i - 11.5) + (j - 12) * (j - 12) + (k - 8) * (k - 8);
        return (r2 <= 49 ? 400 : 50) + ((i * 31 + j * 17 + k * 7) % 11);
    });
    const PromptSet ps{"s",
                       {{{11, 12, 5}, Polarity::positive, StructureId::femur()},
                        {{12.4, 11.6, 8}, Polarity::positive, StructureId::femur()},
                        {{10, 13, 11.2}, Polarity::positive, StructureId::femur()},
                        {{1, 1, 8}, Polarity::negative, StructureId::femur()}}};
    ToySegmenter toy;
    const Volume3D m = segment_volume(toy, v, ps, StructureId::femur());
    const std::vector<std::array<int, 3>> seeds{{11, 12, 5}, {12, 12, 8}, {10, 13, 11}};
    std::vector<float> expected(g.voxel_count(), 0.0f);
    for (const auto& sd : seeds) {
        const Slice2D s = extract_slice(v, sd[2]);
        const auto fill = oracle_fill(s, sd[0], sd[1], ToySegmenter::kDefaultTau);
        for (int j = 0; j < 24; ++j)
            for (int i = 0; i < 24; ++i)
                if (fill[static_cast<std::size_t>(j * 24 + i)]) expected[g.index(i, j, sd[2])] = 1.0f;
    }
    CHECK(m == Volume3D(g, VolumeKind::binary_mask, expected));
}

TEST_CASE("segmenter specs") {
    CHECK(make_segmenter("toy")->info().name == "toy");
    CHECK(dynamic_cast<ToySegmenter&>(*make_segmenter("toy:80")).tau() == 80.0);
    CHECK_THROWS_AS((void)make_segmenter("toy:abc"), PreconditionError);
    CHECK_THROWS_AS((void)make_segmenter("sam"), PreconditionError);
    CHECK_THROWS_AS((void)make_segmenter("exec:"), PreconditionError);
    CHECK_THROWS_AS((void)make_segmenter("tcp:localhost"), PreconditionError);
    CHECK_THROWS_AS((void)make_segmenter("tcp:localhost:99999"), PreconditionError);
}

TEST_CASE("external backend over a process channel") {
    const auto block = slice_of(20, 20, [](int x, int y) { return x >= 5 && x < 15 && y >= 3 && y < 13 ? 300 : 3000; });
    const SegmenterRequest r = req(block, {{9, 7, Polarity::positive}}, "ext-1");

    auto ext = make_segmenter(mock());
    ToySegmenter toy;
    CHECK(segment_slice(*ext, r) == segment_slice(toy, r));
    // Calls stay paired after several round trips.
    for (int n = 0; n < 5; ++n) CHECK(segment_slice(*ext, r).mask.count() == 100);

    auto zeros = make_segmenter(mock("--mode zeros"));
    CHECK(segment_slice(*zeros, r).mask.count() == 0);

    auto wrong = make_segmenter(mock("--mode wrong-dims"));
    CHECK(backend_kind(*wrong, r) == BackendError::Kind::dimension_mismatch);
    auto garbage = make_segmenter(mock("--mode garbage"));
    CHECK(backend_kind(*garbage, r) == BackendError::Kind::framing);
    auto bad_id = make_segmenter(mock("--mode bad-id"));
    CHECK(backend_kind(*bad_id, r) == BackendError::Kind::framing);
    auto failing = make_segmenter(mock("--fail-ids ext"));
    CHECK(backend_kind(*failing, r) == BackendError::Kind::remote);
    auto gone = make_segmenter(mock("--mode exit"));
    CHECK(backend_kind(*gone, r) == BackendError::Kind::unreachable);
    auto slow = make_segmenter(mock("--mode silent"), std::chrono::milliseconds(300));
    CHECK(backend_kind(*slow, r) == BackendError::Kind::timeout);
    auto missing = make_segmenter("exec:/nonexistent/backend-binary");
    CHECK(backend_kind(*missing, r) == BackendError::Kind::unreachable);
}
