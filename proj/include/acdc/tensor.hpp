#pragma once

#include <algorithm>
#include <vector>

#include "acdc/common.hpp"
#include "acdc/rng.hpp"

namespace acdc {

/// Dense n-dimensional value carrier. Image tensors are ordered
/// channels x height(Y) x width(X), with an optional leading batch extent.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), values(numel(shape), T(0)) {}
    Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        ACDC_REQUIRE(static_cast<int64_t>(values.size()) == numel(shape),
                     "tensor value count ", values.size(), " does not match shape ", shape_str(shape));
    }

    int64_t size() const { return static_cast<int64_t>(values.size()); }
    int64_t extent(size_t axis) const { return shape.at(axis); }

    T& operator[](int64_t i) { return values[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return values[static_cast<size_t>(i)]; }

    void fill(T v) { std::fill(values.begin(), values.end(), v); }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        t.fill(v);
        return t;
    }

    static Tensor from_scalar(T v) {
        Tensor t{Shape{}, std::vector<T>{v}};
        return t;
    }

    static Tensor random_uniform(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.values) v = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    static Tensor random_normal(Shape s, Rng& rng, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& v : t.values) v = static_cast<T>(rng.normal(mean, stddev));
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.values.resize(values.size());
        for (size_t i = 0; i < values.size(); ++i) out.values[i] = static_cast<U>(values[i]);
        return out;
    }
};

} // namespace acdc
