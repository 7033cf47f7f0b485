#include "regprompt/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>

#include "regprompt/protocol.hpp"

namespace regprompt {

namespace {

int pixel_of(double c) { return static_cast<int>(std::floor(c + 0.5)); }

bool inside(const Slice2D& s, double x, double y) {
    return x >= 0.0 && y >= 0.0 && x <= s.width - 1 && y <= s.height - 1;
}

/// 4-connected flood fill over pixels accepted by `keep`, starting at (sx, sy); marks `out`.
template <typename Keep>
void flood(int width, int height, int sx, int sy, const Keep& keep, std::vector<std::uint8_t>& out) {
    const auto at = [width](int x, int y) { return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x); };
    if (out[at(sx, sy)] || !keep(sx, sy)) return;
    std::queue<std::pair<int, int>> q;
    out[at(sx, sy)] = 1;
    q.emplace(sx, sy);
    constexpr int dx[4] = {1, -1, 0, 0};
    constexpr int dy[4] = {0, 0, 1, -1};
    while (!q.empty()) {
        const auto [x, y] = q.front();
        q.pop();
        for (int d = 0; d < 4; ++d) {
            const int nx = x + dx[d], ny = y + dy[d];
            if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
            if (out[at(nx, ny)] || !keep(nx, ny)) continue;
            out[at(nx, ny)] = 1;
            q.emplace(nx, ny);
        }
    }
}

}  // namespace

std::size_t Mask2D::count() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](std::uint8_t v) { return v != 0; }));
}

void validate_request(const SegmenterRequest& req) {
    const auto& s = req.slice;
    if (s.width <= 0 || s.height <= 0) throw PreconditionError("slice dimensions must be positive");
    if (s.pixels.size() != static_cast<std::size_t>(s.width) * static_cast<std::size_t>(s.height))
        throw PreconditionError("slice pixel buffer does not match width*height");
    bool any_positive = false;
    for (const auto& p : req.points) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !inside(s, p.x, p.y))
            throw PreconditionError("prompt point outside the slice");
        any_positive = any_positive || p.polarity == Polarity::positive;
    }
    if (!any_positive) throw PreconditionError("segmenter request needs at least one positive point");
}

SegmenterResponse segment_slice(Segmenter& s, const SegmenterRequest& req) {
    validate_request(req);
    SegmenterResponse resp = s.segment(req);
    if (resp.mask.width != req.slice.width || resp.mask.height != req.slice.height ||
        resp.mask.values.size() != req.slice.pixels.size())
        throw BackendError(BackendError::Kind::dimension_mismatch,
                           "mask " + std::to_string(resp.mask.width) + "x" + std::to_string(resp.mask.height) +
                               " does not match slice " + std::to_string(req.slice.width) + "x" +
                               std::to_string(req.slice.height));
    for (auto& v : resp.mask.values) {
        if (v > 1) throw BackendError(BackendError::Kind::framing, "mask values must be 0 or 1");
    }
    return resp;
}

ToySegmenter::ToySegmenter(double tau) : tau_(tau) {
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw PreconditionError("toy segmenter tau must be finite and >= 0");
}

SegmenterInfo ToySegmenter::info() const { return {"toy", true}; }

Mask2D ToySegmenter::grow(const Slice2D& slice, const std::vector<SlicePoint>& points) const {
    Mask2D out{slice.width, slice.height, std::vector<std::uint8_t>(slice.pixels.size(), 0)};
    for (const auto& p : points) {
        if (p.polarity != Polarity::positive) continue;
        const int sx = pixel_of(p.x), sy = pixel_of(p.y);
        const double seed = slice.at(sx, sy);
        // Each seed grows independently; the union is the OR of per-seed regions.
        std::vector<std::uint8_t> region(slice.pixels.size(), 0);
        flood(slice.width, slice.height, sx, sy,
              [&](int x, int y) { return std::abs(static_cast<double>(slice.at(x, y)) - seed) <= tau_; }, region);
        for (std::size_t i = 0; i < region.size(); ++i) out.values[i] |= region[i];
    }
    return out;
}

SegmenterResponse ToySegmenter::segment(const SegmenterRequest& req) {
    Mask2D mask = grow(req.slice, req.points);
    for (const auto& p : req.points) {
        if (p.polarity != Polarity::negative) continue;
        const int nx = pixel_of(p.x), ny = pixel_of(p.y);
        if (!mask.at(nx, ny)) continue;
        std::vector<std::uint8_t> component(mask.values.size(), 0);
        flood(mask.width, mask.height, nx, ny, [&](int x, int y) { return mask.at(x, y) != 0; }, component);
        for (std::size_t i = 0; i < component.size(); ++i)
            if (component[i]) mask.values[i] = 0;
    }
    return {req.request_id, std::move(mask), std::nullopt};
}

ExternalSegmenter::ExternalSegmenter(std::unique_ptr<LineChannel> channel, std::chrono::milliseconds timeout)
    : channel_(std::move(channel)), timeout_(timeout) {
    if (!channel_) throw PreconditionError("external segmenter needs a channel");
}

SegmenterInfo ExternalSegmenter::info() const { return {channel_->describe(), false}; }

SegmenterResponse ExternalSegmenter::segment(const SegmenterRequest& req) {
    std::lock_guard lock(mutex_);
    channel_->send_line(protocol::encode_request(req));
    const std::string line = channel_->receive_line(timeout_);
    protocol::DecodedResponse decoded;
    try {
        decoded = protocol::decode_response(line);
    } catch (const DataError& e) {
        throw BackendError(BackendError::Kind::framing, e.what());
    }
    if (decoded.request_id != req.request_id)
        throw BackendError(BackendError::Kind::framing,
                           "response request_id '" + decoded.request_id + "' does not echo '" + req.request_id + "'");
    if (decoded.error) throw BackendError(BackendError::Kind::remote, "backend error: " + *decoded.error);
    if (decoded.mask.size() != req.slice.pixels.size())
        throw BackendError(BackendError::Kind::dimension_mismatch,
                           "mask has " + std::to_string(decoded.mask.size()) + " pixels, slice has " +
                               std::to_string(req.slice.pixels.size()));
    return {req.request_id, Mask2D{req.slice.width, req.slice.height, std::move(decoded.mask)}, decoded.score};
}

std::unique_ptr<LineChannel> open_backend_channel(const std::string& spec) {
    if (spec.starts_with("exec:")) {
        const std::string command = spec.substr(5);
        if (command.empty()) throw PreconditionError("exec segmenter needs a command");
        return open_process_channel(command);
    }
    if (spec.starts_with("tcp:")) {
        const std::string rest = spec.substr(4);
        const auto colon = rest.rfind(':');
        if (colon == std::string::npos || colon == 0) throw PreconditionError("tcp segmenter needs host:port");
        int port = 0;
        try {
            port = std::stoi(rest.substr(colon + 1));
        } catch (const std::exception&) {
            throw PreconditionError("bad tcp port in '" + spec + "'");
        }
        if (port <= 0 || port > 65535) throw PreconditionError("bad tcp port in '" + spec + "'");
        return open_tcp_channel(rest.substr(0, colon), port);
    }
    throw PreconditionError("'" + spec + "' is not an external backend (expected exec:<cmd> or tcp:<host>:<port>)");
}

std::unique_ptr<Segmenter> make_segmenter(const std::string& spec, std::chrono::milliseconds timeout) {
    if (spec == "toy") return std::make_unique<ToySegmenter>();
    if (spec.starts_with("toy:")) {
        const std::string value = spec.substr(4);
        std::size_t used = 0;
        double tau = 0.0;
        try {
            tau = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != value.size()) throw PreconditionError("bad toy segmenter tau in '" + spec + "'");
        return std::make_unique<ToySegmenter>(tau);
    }
    if (spec.starts_with("exec:") || spec.starts_with("tcp:"))
        return std::make_unique<ExternalSegmenter>(open_backend_channel(spec), timeout);
    throw PreconditionError("unknown segmenter '" + spec + "' (expected toy[:tau], exec:<cmd> or tcp:<host>:<port>)");
}

Slice2D extract_slice(const Volume3D& vol, int w) {
    const auto& d = vol.dims();
    if (w < 0 || w >= d.z) throw PreconditionError("slice index out of range");
    Slice2D s{d.x, d.y, vol.spacing().x, vol.spacing().y, {}};
    const auto data = vol.data();
    const std::size_t n = static_cast<std::size_t>(d.x) * static_cast<std::size_t>(d.y);
    s.pixels.assign(data.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(w)),
                    data.begin() + static_cast<std::ptrdiff_t>(n * static_cast<std::size_t>(w + 1)));
    return s;
}

Volume3D segment_volume(Segmenter& s, const Volume3D& vol, const PromptSet& ps, const StructureId& structure,
                        const std::string& request_prefix) {
    std::map<int, std::vector<SlicePoint>> per_slice;
    for (const auto& p : ps.prompts) {
        if (p.structure != structure) continue;
        const int w = p.slice();
        if (w < 0 || w >= vol.dims().z) continue;
        per_slice[w].push_back({p.position.u, p.position.v, p.polarity});
    }
    std::erase_if(per_slice, [](const auto& kv) {
        return std::none_of(kv.second.begin(), kv.second.end(),
                            [](const SlicePoint& p) { return p.polarity == Polarity::positive; });
    });
    if (per_slice.empty()) throw StructureEmptyError("no positive prompt for '" + structure.name() + "'");

    std::vector<float> out(vol.size(), 0.0f);
    const std::size_t n = static_cast<std::size_t>(vol.dims().x) * static_cast<std::size_t>(vol.dims().y);
    for (const auto& [w, points] : per_slice) {
        SegmenterRequest req{request_prefix + "/" + structure.name() + "/z" + std::to_string(w), structure,
                             extract_slice(vol, w), points};
        const SegmenterResponse resp = segment_slice(s, req);
        for (std::size_t i = 0; i < n; ++i) out[n * static_cast<std::size_t>(w) + i] = resp.mask.values[i] ? 1.0f : 0.0f;
    }
    return Volume3D(vol.grid(), VolumeKind::binary_mask, std::move(out));
}

}  // namespace regprompt
