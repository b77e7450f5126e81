#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "fbn/errors.hpp"

namespace fbn {

// Dense row-major double tensor. All network math runs in 64-bit so analytic
// gradients can be validated against central finite differences directly.
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> s)
        : shape(std::move(s)), v(static_cast<std::size_t>(numel_of(shape)), 0.0) {}

    static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
        std::int64_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::int64_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::int64_t> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    std::int64_t size(int i) const { return shape[static_cast<std::size_t>(i)]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

    void zero() { std::fill(v.begin(), v.end(), 0.0); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<std::int64_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) raise(ErrorCode::ShapeError, what);
}

inline bool all_finite(const Tensor& t) {
    for (double x : t.v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace fbn
