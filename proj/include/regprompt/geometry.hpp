#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>

namespace regprompt {

/// Small fixed-size 3-vector used for world coordinates (mm), voxel coordinates and displacements.
struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    constexpr double& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr double operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }

    constexpr Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    constexpr Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    constexpr Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

    friend constexpr Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
    friend constexpr Vec3 operator-(Vec3 a, const Vec3& b) { return a -= b; }
    friend constexpr Vec3 operator-(const Vec3& a) { return {-a.x, -a.y, -a.z}; }
    friend constexpr Vec3 operator*(Vec3 a, double s) { return a *= s; }
    friend constexpr Vec3 operator*(double s, Vec3 a) { return a *= s; }
    friend constexpr bool operator==(const Vec3&, const Vec3&) = default;

    [[nodiscard]] double norm() const { return std::sqrt(x * x + y * y + z * z); }
    [[nodiscard]] constexpr double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    [[nodiscard]] bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

/// Component-wise product / quotient.
constexpr Vec3 hadamard(const Vec3& a, const Vec3& b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }
constexpr Vec3 divide(const Vec3& a, const Vec3& b) { return {a.x / b.x, a.y / b.y, a.z / b.z}; }

struct Index3 {
    int x = 0, y = 0, z = 0;

    constexpr int& operator[](std::size_t i) { return i == 0 ? x : (i == 1 ? y : z); }
    constexpr int operator[](std::size_t i) const { return i == 0 ? x : (i == 1 ? y : z); }
    friend constexpr bool operator==(const Index3&, const Index3&) = default;

    [[nodiscard]] constexpr std::size_t count() const {
        return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) * static_cast<std::size_t>(z);
    }
};

/// Row-major 3x3 matrix.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static constexpr Mat3 identity() { return {}; }
    static constexpr Mat3 zero() { return Mat3{{0, 0, 0, 0, 0, 0, 0, 0, 0}}; }
    static constexpr Mat3 diagonal(const Vec3& d) { return Mat3{{d.x, 0, 0, 0, d.y, 0, 0, 0, d.z}}; }

    constexpr double& operator()(int r, int c) { return m[static_cast<std::size_t>(r * 3 + c)]; }
    constexpr double operator()(int r, int c) const { return m[static_cast<std::size_t>(r * 3 + c)]; }

    friend constexpr Vec3 operator*(const Mat3& a, const Vec3& v) {
        return {a(0, 0) * v.x + a(0, 1) * v.y + a(0, 2) * v.z,
                a(1, 0) * v.x + a(1, 1) * v.y + a(1, 2) * v.z,
                a(2, 0) * v.x + a(2, 1) * v.y + a(2, 2) * v.z};
    }
    friend constexpr Mat3 operator*(const Mat3& a, const Mat3& b) {
        Mat3 r = zero();
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j)
                for (int k = 0; k < 3; ++k) r(i, j) += a(i, k) * b(k, j);
        return r;
    }
    friend constexpr bool operator==(const Mat3&, const Mat3&) = default;

    [[nodiscard]] constexpr Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    [[nodiscard]] constexpr double determinant() const {
        const auto& a = *this;
        return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
               a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
               a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
    }

    /// Adjugate inverse; caller checks the determinant.
    [[nodiscard]] constexpr Mat3 inverse() const {
        const auto& a = *this;
        const double inv_det = 1.0 / determinant();
        Mat3 r;
        r(0, 0) = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) * inv_det;
        r(0, 1) = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) * inv_det;
        r(0, 2) = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) * inv_det;
        r(1, 0) = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) * inv_det;
        r(1, 1) = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) * inv_det;
        r(1, 2) = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) * inv_det;
        r(2, 0) = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) * inv_det;
        r(2, 1) = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) * inv_det;
        r(2, 2) = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) * inv_det;
        return r;
    }
};

}  // namespace regprompt
