#include "regprompt/protocol.hpp"

#include <array>
#include <cstring>

namespace regprompt::protocol {

using nlohmann::json;

namespace {

constexpr std::string_view kAlphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

constexpr std::array<int, 256> decode_table() {
    std::array<int, 256> t{};
    for (auto& v : t) v = -1;
    for (std::size_t i = 0; i < kAlphabet.size(); ++i) t[static_cast<unsigned char>(kAlphabet[i])] = static_cast<int>(i);
    return t;
}

std::string polarity_name(Polarity p) { return p == Polarity::positive ? "pos" : "neg"; }

Polarity parse_polarity(const std::string& s) {
    if (s == "pos") return Polarity::positive;
    if (s == "neg") return Polarity::negative;
    throw DataError("polarity must be \"pos\" or \"neg\"");
}

}  // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const std::uint32_t n = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8) | bytes[i + 2];
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += kAlphabet[(n >> 6) & 63];
        out += kAlphabet[n & 63];
    }
    const std::size_t rest = bytes.size() - i;
    if (rest == 1) {
        const std::uint32_t n = std::uint32_t{bytes[i]} << 16;
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += "==";
    } else if (rest == 2) {
        const std::uint32_t n = (std::uint32_t{bytes[i]} << 16) | (std::uint32_t{bytes[i + 1]} << 8);
        out += kAlphabet[(n >> 18) & 63];
        out += kAlphabet[(n >> 12) & 63];
        out += kAlphabet[(n >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
    static constexpr auto table = decode_table();
    if (text.size() % 4 != 0) throw DataError("base64 length is not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int v[4];
        int pad = 0;
        for (int q = 0; q < 4; ++q) {
            const char c = text[i + static_cast<std::size_t>(q)];
            if (c == '=') {
                if (i + 4 != text.size() || q < 2) throw DataError("misplaced base64 padding");
                v[q] = 0;
                ++pad;
            } else {
                if (pad > 0) throw DataError("misplaced base64 padding");
                v[q] = table[static_cast<unsigned char>(c)];
                if (v[q] < 0) throw DataError("invalid base64 character");
            }
        }
        const std::uint32_t n = (static_cast<std::uint32_t>(v[0]) << 18) | (static_cast<std::uint32_t>(v[1]) << 12) |
                                (static_cast<std::uint32_t>(v[2]) << 6) | static_cast<std::uint32_t>(v[3]);
        out.push_back(static_cast<std::uint8_t>((n >> 16) & 0xFF));
        if (pad < 2) out.push_back(static_cast<std::uint8_t>((n >> 8) & 0xFF));
        if (pad < 1) out.push_back(static_cast<std::uint8_t>(n & 0xFF));
    }
    return out;
}

std::string encode_request(const SegmenterRequest& req) {
    std::vector<std::uint8_t> raw(req.slice.pixels.size() * sizeof(float));
    if (!raw.empty()) std::memcpy(raw.data(), req.slice.pixels.data(), raw.size());
    json points = json::array();
    for (const auto& p : req.points) points.push_back({{"x", p.x}, {"y", p.y}, {"polarity", polarity_name(p.polarity)}});
    const json j{{"request_id", req.request_id},
                 {"structure", req.structure.name()},
                 {"width", req.slice.width},
                 {"height", req.slice.height},
                 {"spacing", {req.slice.spacing_x, req.slice.spacing_y}},
                 {"pixels_b64", base64_encode(raw)},
                 {"points", std::move(points)}};
    return j.dump();
}

SegmenterRequest decode_request(std::string_view line) {
    try {
        const json j = json::parse(line);
        SegmenterRequest req;
        req.request_id = j.at("request_id").get<std::string>();
        req.structure = StructureId(j.at("structure").get<std::string>());
        req.slice.width = j.at("width").get<int>();
        req.slice.height = j.at("height").get<int>();
        const auto sp = j.at("spacing").get<std::vector<double>>();
        if (sp.size() != 2) throw DataError("spacing needs 2 entries");
        req.slice.spacing_x = sp[0];
        req.slice.spacing_y = sp[1];
        if (req.slice.width <= 0 || req.slice.height <= 0) throw DataError("slice dimensions must be positive");
        const auto raw = base64_decode(j.at("pixels_b64").get<std::string>());
        const std::size_t n = static_cast<std::size_t>(req.slice.width) * static_cast<std::size_t>(req.slice.height);
        if (raw.size() != n * sizeof(float)) throw DataError("pixel payload does not match width*height float32");
        req.slice.pixels.resize(n);
        std::memcpy(req.slice.pixels.data(), raw.data(), raw.size());
        for (const auto& p : j.at("points"))
            req.points.push_back({p.at("x").get<double>(), p.at("y").get<double>(),
                                  parse_polarity(p.at("polarity").get<std::string>())});
        return req;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed request: ") + e.what());
    }
}

std::string encode_response(const SegmenterResponse& resp) {
    json j{{"request_id", resp.request_id}, {"mask_b64", base64_encode(resp.mask.values)}};
    if (resp.score) j["score"] = *resp.score;
    return j.dump();
}

DecodedResponse decode_response(std::string_view line) {
    try {
        const json j = json::parse(line);
        if (!j.is_object()) throw DataError("response is not a JSON object");
        DecodedResponse r;
        r.request_id = j.at("request_id").get<std::string>();
        if (j.contains("error")) {
            r.error = j.at("error").is_string() ? j.at("error").get<std::string>() : j.at("error").dump();
            return r;
        }
        r.mask = base64_decode(j.at("mask_b64").get<std::string>());
        if (j.contains("score") && !j.at("score").is_null()) r.score = j.at("score").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed response: ") + e.what());
    }
}

std::string encode_error(const std::string& request_id, const std::string& message) {
    return json{{"request_id", request_id}, {"error", message}}.dump();
}

}  // namespace regprompt::protocol
