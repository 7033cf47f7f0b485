#include "protocol_fixtures.hpp"

#include <cmath>

#include <json.hpp>

#include "regprompt/protocol.hpp"

namespace regprompt::tools {

using nlohmann::json;

namespace {

template <typename F>
Slice2D synth(int w, int h, double sx, double sy, F&& value) {
    Slice2D s{w, h, sx, sy, std::vector<float>(static_cast<std::size_t>(w) * static_cast<std::size_t>(h))};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) s.pixels[static_cast<std::size_t>(y * w + x)] = static_cast<float>(value(x, y));
    return s;
}

double disc(int x, int y, double cx, double cy, double r, double in, double out) {
    return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r ? in : out;
}

SegmenterRequest request(const std::string& id, StructureId s, Slice2D slice, std::vector<SlicePoint> pts) {
    return {id, std::move(s), std::move(slice), std::move(pts)};
}

constexpr Polarity pos = Polarity::positive;
constexpr Polarity neg = Polarity::negative;

}  // namespace

std::vector<std::string> golden_fixture_lines() {
    std::vector<SegmenterRequest> reqs;
    reqs.push_back(request("fx-01", StructureId::femur(),
                           synth(16, 16, 1.0, 1.0, [](int x, int y) { return disc(x, y, 7.5, 7.5, 5.0, 400, 50); }),
                           {{7.5, 7.5, pos}}));
    reqs.push_back(request("fx-02", StructureId::tibia(),
                           synth(32, 24, 0.5, 0.8,
                                 [](int x, int y) { return x >= 8 && x < 24 && y >= 6 && y < 18 ? 400.0 : 50.0; }),
                           {{10, 8, pos}, {20, 15, pos}, {2, 2, neg}}));
    reqs.push_back(request("fx-03", StructureId::femoral_cartilage(), synth(1, 1, 1.0, 1.0, [](int, int) { return 1500; }),
                           {{0, 0, pos}}));
    reqs.push_back(request("fx-04", StructureId::femur(),
                           synth(64, 64, 1.0, 1.0,
                                 [](int x, int y) {
                                     return std::max(disc(x, y, 16, 16, 10, 400, 50), disc(x, y, 46, 46, 12, 400, 50));
                                 }),
                           {{16, 16, pos}, {46, 46, neg}}));
    reqs.push_back(request("fx-05", StructureId::tibia(), synth(8, 8, 2.0, 2.0, [](int, int) { return 300; }),
                           {{6.5, 7.0, pos}}));
    reqs.push_back(request("fx-06", StructureId::tibial_cartilage(),
                           synth(20, 10, 1.0, 1.0, [](int x, int) { return 100.0 * x; }), {{12.25, 4.75, pos}, {0, 0, neg}}));
    reqs.push_back(request("fx-07", StructureId::femoral_cartilage(),
                           synth(48, 48, 0.7, 0.7,
                                 [](int x, int y) {
                                     const double r = std::hypot(x - 23.5, y - 23.5);
                                     return r >= 12 && r <= 16 ? 1500.0 : 50.0;
                                 }),
                           {{23.5 + 14, 23.5, pos}, {23.5, 23.5, neg}}));
    reqs.push_back(request("fx-08", StructureId("patella"),
                           synth(12, 30, 1.0, 3.0, [](int x, int y) { return (x + y) % 2 ? 400.0 : 410.0; }),
                           {{1, 1, pos}, {10, 5, pos}, {5, 15, pos}, {2, 28, pos}, {11, 29, pos}}));

    std::vector<std::string> lines;
    for (const auto& r : reqs) lines.push_back(protocol::encode_request(r));
    lines.push_back(R"({"request_id":"fx-09","structure":"femur","width":4,"height":)");
    lines.push_back(
        R"({"height":2,"points":[{"polarity":"pos","x":0,"y":0}],"request_id":"fx-10","spacing":[1,1],"structure":"femur","width":2})");
    return lines;
}

FixtureVerdict check_fixture(LineChannel& channel, const std::string& line, std::chrono::milliseconds timeout) {
    FixtureVerdict v;
    std::optional<SegmenterRequest> req;
    std::optional<std::string> expected_id;
    try {
        req = protocol::decode_request(line);
        expected_id = req->request_id;
    } catch (const DataError&) {
        const json j = json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("request_id") && j["request_id"].is_string())
            expected_id = j["request_id"].get<std::string>();
    }
    v.label = expected_id.value_or("<unparsable>");

    std::string reply;
    try {
        channel.send_line(line);
        reply = channel.receive_line(timeout);
    } catch (const BackendError& e) {
        v.detail = std::string("no reply: ") + e.what();
        return v;
    }
    const json j = json::parse(reply, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        v.detail = "reply is not a JSON object";
        return v;
    }
    if (!j.contains("request_id") || !(j["request_id"].is_string() || (!expected_id && j["request_id"].is_null()))) {
        v.detail = "reply lacks a request_id";
        return v;
    }
    if (expected_id && j["request_id"] != *expected_id) {
        v.detail = "request_id echo mismatch";
        return v;
    }
    if (!req) {
        v.pass = j.contains("error") && j["error"].is_string();
        v.detail = v.pass ? "error object returned" : "malformed request not answered with an error object";
        return v;
    }
    try {
        const auto d = protocol::decode_response(reply);
        if (d.error) {
            v.detail = "backend error: " + *d.error;
            return v;
        }
        const std::size_t n = static_cast<std::size_t>(req->slice.width) * static_cast<std::size_t>(req->slice.height);
        if (d.mask.size() != n) {
            v.detail = "mask has " + std::to_string(d.mask.size()) + " bytes, expected " + std::to_string(n);
            return v;
        }
        for (auto b : d.mask)
            if (b > 1) {
                v.detail = "mask byte outside {0,1}";
                return v;
            }
    } catch (const DataError& e) {
        v.detail = e.what();
        return v;
    }
    v.pass = true;
    v.detail = "mask " + std::to_string(req->slice.width) + "x" + std::to_string(req->slice.height);
    return v;
}

}  // namespace regprompt::tools
