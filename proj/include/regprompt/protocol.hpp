#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "regprompt/segmenter.hpp"

namespace regprompt::protocol {

[[nodiscard]] std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws DataError on characters outside the standard alphabet or bad padding.
[[nodiscard]] std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Request line (no trailing newline):
/// {"height","pixels_b64","points":[{"polarity","x","y"}],"request_id","spacing":[sx,sy],"structure","width"}
/// Pixels are little-endian float32, row-major.
[[nodiscard]] std::string encode_request(const SegmenterRequest& req);
/// Throws DataError on schema violations.
[[nodiscard]] SegmenterRequest decode_request(std::string_view line);

/// Response line: {"mask_b64","request_id","score"?}; the mask is one byte (0/1) per pixel, row-major.
[[nodiscard]] std::string encode_response(const SegmenterResponse& resp);

/// Either a mask or a backend-reported error object {"request_id","error"}.
struct DecodedResponse {
    std::string request_id;
    std::vector<std::uint8_t> mask;
    std::optional<double> score;
    std::optional<std::string> error;
};
/// Throws DataError when the line is not a valid response or error object.
[[nodiscard]] DecodedResponse decode_response(std::string_view line);

/// Error object sent by backends that could not process a line.
[[nodiscard]] std::string encode_error(const std::string& request_id, const std::string& message);

}  // namespace regprompt::protocol
