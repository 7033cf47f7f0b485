#include <doctest.h>

#include <fstream>

#include "regprompt/protocol.hpp"

using namespace regprompt;
namespace fs = std::filesystem;

namespace {

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string l;
    std::getline(in, l);
    return l;
}

SegmenterRequest golden_request() {
    return {"golden-1",
            StructureId::femur(),
            {3, 2, 0.5, 2.0, {0.0f, 1.0f, 2.5f, -1.0f, 1500.0f, 3000.0f}},
            {{1, 0, Polarity::positive}, {2, 1, Polarity::negative}}};
}

}  // namespace

TEST_CASE("request serializes to the documented form") {
    const std::string expected = first_line(fs::path(REGPROMPT_FIXTURE_DIR) / "golden_request.json");
    CHECK(protocol::encode_request(golden_request()) == expected);
    CHECK(protocol::decode_request(expected) == golden_request());
}

TEST_CASE("response decodes from the documented form") {
    const std::string line = first_line(fs::path(REGPROMPT_FIXTURE_DIR) / "golden_response.json");
    const auto d = protocol::decode_response(line);
    CHECK(d.request_id == "golden-1");
    CHECK(d.mask == std::vector<std::uint8_t>{0, 1, 1, 0, 1, 0});
    REQUIRE(d.score.has_value());
    CHECK(*d.score == 0.75);
    CHECK_FALSE(d.error.has_value());

    const SegmenterResponse r{"golden-1", {3, 2, {0, 1, 1, 0, 1, 0}}, 0.75};
    CHECK(protocol::encode_response(r) == line);
}

TEST_CASE("base64") {
    const std::string s = "any carnal pleas";
    const std::vector<std::uint8_t> bytes(s.begin(), s.end());
    CHECK(protocol::base64_encode(bytes) == "YW55IGNhcm5hbCBwbGVhcw==");
    CHECK(protocol::base64_decode("YW55IGNhcm5hbCBwbGVhcw==") == bytes);
    CHECK(protocol::base64_encode({}).empty());
    for (std::size_t n = 0; n < 7; ++n) {
        const std::vector<std::uint8_t> b(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
        CHECK(protocol::base64_decode(protocol::base64_encode(b)) == b);
    }
    CHECK_THROWS_AS((void)protocol::base64_decode("YW5"), DataError);
    CHECK_THROWS_AS((void)protocol::base64_decode("YW=5"), DataError);
    CHECK_THROWS_AS((void)protocol::base64_decode("Y!55"), DataError);
}

TEST_CASE("malformed requests and responses") {
    CHECK_THROWS_AS((void)protocol::decode_request("{not json"), DataError);
    CHECK_THROWS_AS((void)protocol::decode_request(R"({"request_id":"a"})"), DataError);
    auto j = nlohmann::json::parse(protocol::encode_request(golden_request()));
    j["width"] = 4;
    CHECK_THROWS_AS((void)protocol::decode_request(j.dump()), DataError);
    j = nlohmann::json::parse(protocol::encode_request(golden_request()));
    j["points"][0]["polarity"] = "positive";
    CHECK_THROWS_AS((void)protocol::decode_request(j.dump()), DataError);

    CHECK_THROWS_AS((void)protocol::decode_response("[]"), DataError);
    CHECK_THROWS_AS((void)protocol::decode_response(R"({"mask_b64":"AA=="})"), DataError);
    const auto e = protocol::decode_response(protocol::encode_error("r1", "boom"));
    CHECK(e.request_id == "r1");
    CHECK(e.error == "boom");
}
