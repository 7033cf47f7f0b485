#include "regprompt/distance.hpp"

#include <limits>

#include "regprompt/error.hpp"

namespace regprompt {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// In-place 1D transform of f sampled at positions q * s.
void envelope_pass(std::vector<double>& f, double s, std::vector<double>& out, std::vector<int>& v,
                   std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[static_cast<std::size_t>(q)] == kInf) continue;
        const double fq = f[static_cast<std::size_t>(q)];
        const double pq = q * s;
        double boundary = -kInf;
        while (k >= 0) {
            const int r = v[static_cast<std::size_t>(k)];
            const double pr = r * s;
            boundary = ((fq + pq * pq) - (f[static_cast<std::size_t>(r)] + pr * pr)) / (2.0 * (pq - pr));
            if (boundary > z[static_cast<std::size_t>(k)]) break;
            --k;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : boundary;
        z[static_cast<std::size_t>(k) + 1] = kInf;
    }
    if (k < 0) {
        std::fill(out.begin(), out.end(), kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        const double p = q * s;
        while (z[static_cast<std::size_t>(j) + 1] < p) ++j;
        const int r = v[static_cast<std::size_t>(j)];
        const double d = p - r * s;
        out[static_cast<std::size_t>(q)] = d * d + f[static_cast<std::size_t>(r)];
    }
}

}  // namespace

std::vector<double> squared_distance_transform(const Index3& dims, const Vec3& spacing,
                                               std::span<const std::uint8_t> seeds) {
    if (seeds.size() != dims.count()) throw PreconditionError("seed buffer does not match dims");
    std::vector<double> d(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) d[i] = seeds[i] ? 0.0 : kInf;

    const std::size_t sx = 1, sy = static_cast<std::size_t>(dims.x),
                      sz = static_cast<std::size_t>(dims.x) * static_cast<std::size_t>(dims.y);
    const std::size_t strides[3] = {sx, sy, sz};
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const int n = dims[axis];
        const int a1 = axis == 0 ? 1 : 0, a2 = axis == 2 ? 1 : 2;
        std::vector<double> f(static_cast<std::size_t>(n)), out(static_cast<std::size_t>(n));
        std::vector<int> v(static_cast<std::size_t>(n));
        std::vector<double> z(static_cast<std::size_t>(n) + 1);
        for (int b = 0; b < dims[static_cast<std::size_t>(a2)]; ++b)
            for (int a = 0; a < dims[static_cast<std::size_t>(a1)]; ++a) {
                const std::size_t base = static_cast<std::size_t>(a) * strides[a1] + static_cast<std::size_t>(b) * strides[a2];
                for (int q = 0; q < n; ++q) f[static_cast<std::size_t>(q)] = d[base + static_cast<std::size_t>(q) * strides[axis]];
                envelope_pass(f, spacing[axis], out, v, z);
                for (int q = 0; q < n; ++q) d[base + static_cast<std::size_t>(q) * strides[axis]] = out[static_cast<std::size_t>(q)];
            }
    }
    return d;
}

}  // namespace regprompt
