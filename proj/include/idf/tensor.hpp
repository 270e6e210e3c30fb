#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "idf/common.hpp"

namespace idf {

// All tensors in this project are rank-3 (channels, height, width); scalars
// are (1,1,1) and per-channel vectors are (C,1,1). Data is stored in raster
// order: index = (c*H + y)*W + x.
struct Shape {
    int c = 0, h = 0, w = 0;

    int size() const { return c * h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline void require(bool cond, const char* what) {
    if (!cond) throw shape_error(what);
}

// Integer-valued tensor: the data/latent domain. All arithmetic on it is
// exact; nothing here ever touches floating point.
class IntTensor {
public:
    IntTensor() = default;
    explicit IntTensor(Shape s, std::int32_t fill = 0)
        : shape_(s), v_(static_cast<std::size_t>(s.size()), fill) {}

    const Shape& shape() const { return shape_; }
    int size() const { return shape_.size(); }

    std::int32_t& operator[](int i) { return v_[static_cast<std::size_t>(i)]; }
    std::int32_t operator[](int i) const { return v_[static_cast<std::size_t>(i)]; }
    std::int32_t& at(int c, int y, int x) { return v_[idx(c, y, x)]; }
    std::int32_t at(int c, int y, int x) const { return v_[idx(c, y, x)]; }

    std::int32_t* data() { return v_.data(); }
    const std::int32_t* data() const { return v_.data(); }

    bool operator==(const IntTensor&) const = default;

private:
    std::size_t idx(int c, int y, int x) const {
        return static_cast<std::size_t>((c * shape_.h + y) * shape_.w + x);
    }
    Shape shape_;
    std::vector<std::int32_t> v_;
};

// Real-valued tensor (double precision throughout; the coder-facing prior
// evaluation depends on encoder and decoder computing identical doubles).
class RealTensor {
public:
    RealTensor() = default;
    explicit RealTensor(Shape s, double fill = 0.0)
        : shape_(s), v_(static_cast<std::size_t>(s.size()), fill) {}

    static RealTensor scalar(double v) { return RealTensor(Shape{1, 1, 1}, v); }

    const Shape& shape() const { return shape_; }
    int size() const { return shape_.size(); }

    double& operator[](int i) { return v_[static_cast<std::size_t>(i)]; }
    double operator[](int i) const { return v_[static_cast<std::size_t>(i)]; }
    double& at(int c, int y, int x) { return v_[idx(c, y, x)]; }
    double at(int c, int y, int x) const { return v_[idx(c, y, x)]; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }

    void fill(double v) { std::fill(v_.begin(), v_.end(), v); }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool operator==(const RealTensor&) const = default;

private:
    std::size_t idx(int c, int y, int x) const {
        return static_cast<std::size_t>((c * shape_.h + y) * shape_.w + x);
    }
    Shape shape_;
    std::vector<double> v_;
};

inline RealTensor to_real(const IntTensor& t, double scale = 1.0) {
    RealTensor r(t.shape());
    for (int i = 0; i < t.size(); ++i) r[i] = static_cast<double>(t[i]) * scale;
    return r;
}

inline void check_finite(const RealTensor& t, const char* where) {
    if (!t.all_finite()) throw data_error(std::string("non-finite value in ") + where);
}

}  // namespace idf
