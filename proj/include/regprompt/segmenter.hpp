#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "regprompt/prompts.hpp"
#include "regprompt/volume.hpp"

namespace regprompt {

/// Row-major 2D scalar image (x fastest).
struct Slice2D {
    int width = 0;
    int height = 0;
    double spacing_x = 1.0;
    double spacing_y = 1.0;
    std::vector<float> pixels;

    [[nodiscard]] float at(int x, int y) const {
        return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
    }
    friend bool operator==(const Slice2D&, const Slice2D&) = default;
};

/// Row-major binary 2D mask.
struct Mask2D {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> values;

    [[nodiscard]] std::uint8_t at(int x, int y) const {
        return values[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
    }
    [[nodiscard]] std::size_t count() const;
    friend bool operator==(const Mask2D&, const Mask2D&) = default;
};

struct SlicePoint {
    double x = 0.0;  ///< continuous pixel column
    double y = 0.0;  ///< continuous pixel row
    Polarity polarity = Polarity::positive;
    friend bool operator==(const SlicePoint&, const SlicePoint&) = default;
};

struct SegmenterRequest {
    std::string request_id;
    StructureId structure = StructureId::femur();
    Slice2D slice;
    std::vector<SlicePoint> points;
    friend bool operator==(const SegmenterRequest&, const SegmenterRequest&) = default;
};

struct SegmenterResponse {
    std::string request_id;
    Mask2D mask;
    std::optional<double> score;
    friend bool operator==(const SegmenterResponse&, const SegmenterResponse&) = default;
};

struct SegmenterInfo {
    std::string name;
    bool deterministic = true;
};

/// Slice-wise promptable segmentation function (image slice, point prompts) -> binary mask.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    [[nodiscard]] virtual SegmenterInfo info() const = 0;
    /// Implementations may assume the request already passed validate_request.
    virtual SegmenterResponse segment(const SegmenterRequest& req) = 0;
};

/// Throws PreconditionError unless the request has >= 1 positive point, all points inside the slice,
/// and a pixel buffer matching its dimensions.
void validate_request(const SegmenterRequest& req);

/// Validates the request, runs the segmenter and checks the response contract.
[[nodiscard]] SegmenterResponse segment_slice(Segmenter& s, const SegmenterRequest& req);

/// Seeded region growing: 4-connected flood fill from each positive seed over pixels within tau of the
/// seed intensity, union over seeds, then removal of every component holding a negative point.
class ToySegmenter final : public Segmenter {
public:
    static constexpr double kDefaultTau = 150.0;

    explicit ToySegmenter(double tau = kDefaultTau);
    [[nodiscard]] SegmenterInfo info() const override;
    SegmenterResponse segment(const SegmenterRequest& req) override;

    /// Flood fill union before negative-component removal.
    [[nodiscard]] Mask2D grow(const Slice2D& slice, const std::vector<SlicePoint>& points) const;
    [[nodiscard]] double tau() const { return tau_; }

private:
    double tau_;
};

/// Bidirectional newline-delimited text transport.
class LineChannel {
public:
    virtual ~LineChannel() = default;
    virtual void send_line(const std::string& line) = 0;
    /// Throws BackendError(timeout) after `timeout`, BackendError(unreachable) on EOF.
    virtual std::string receive_line(std::chrono::milliseconds timeout) = 0;
    [[nodiscard]] virtual std::string describe() const = 0;
};

/// Spawns `/bin/sh -c command` and talks over its stdin/stdout.
[[nodiscard]] std::unique_ptr<LineChannel> open_process_channel(const std::string& command);
[[nodiscard]] std::unique_ptr<LineChannel> open_tcp_channel(const std::string& host, int port);

/// Protocol client: one in-flight request at a time (calls are serialized internally).
class ExternalSegmenter final : public Segmenter {
public:
    explicit ExternalSegmenter(std::unique_ptr<LineChannel> channel,
                               std::chrono::milliseconds timeout = std::chrono::seconds(120));
    [[nodiscard]] SegmenterInfo info() const override;
    SegmenterResponse segment(const SegmenterRequest& req) override;

private:
    std::unique_ptr<LineChannel> channel_;
    std::chrono::milliseconds timeout_;
    std::mutex mutex_;
};

/// Opens `exec:<command>` or `tcp:<host>:<port>`; throws PreconditionError for other specs.
[[nodiscard]] std::unique_ptr<LineChannel> open_backend_channel(const std::string& spec);

/// `toy`, `toy:<tau>`, `exec:<command>` or `tcp:<host>:<port>`. Throws PreconditionError for bad specs.
[[nodiscard]] std::unique_ptr<Segmenter> make_segmenter(const std::string& spec,
                                                        std::chrono::milliseconds timeout = std::chrono::seconds(120));

/// Extracts slice w of a volume.
[[nodiscard]] Slice2D extract_slice(const Volume3D& vol, int w);

/// Runs the segmenter on every slice holding >= 1 positive prompt of `structure` (prompts assigned by
/// round(w)); other slices stay empty. Throws StructureEmptyError when no positive prompt exists.
[[nodiscard]] Volume3D segment_volume(Segmenter& s, const Volume3D& vol, const PromptSet& ps,
                                      const StructureId& structure, const std::string& request_prefix = "seg");

}  // namespace regprompt
