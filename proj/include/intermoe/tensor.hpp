#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <vector>

#include "intermoe/common.hpp"

namespace intermoe {

// Dense row-major tensor. Plain value type; all layers/ops live in autodiff.hpp.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor: shape " + shape_to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int e : s) {
            if (e < 0) throw ShapeError("tensor: negative extent in " + shape_to_string(s));
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), T(0)));
    }

    static Tensor full(std::vector<int> s, T v) {
        auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), v));
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, std::mt19937_64& rng, T stddev = T(1)) {
        auto n = numel_of(s);
        std::normal_distribution<double> nd(0.0, 1.0);
        std::vector<T> d(static_cast<size_t>(n));
        for (auto& v : d) v = static_cast<T>(nd(rng)) * stddev;
        return Tensor(std::move(s), std::move(d));
    }

    static Tensor uniform(std::vector<int> s, std::mt19937_64& rng, T lo, T hi) {
        auto n = numel_of(s);
        std::uniform_real_distribution<double> ud(static_cast<double>(lo), static_cast<double>(hi));
        std::vector<T> d(static_cast<size_t>(n));
        for (auto& v : d) v = static_cast<T>(ud(rng));
        return Tensor(std::move(s), std::move(d));
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool is_scalar() const { return numel() == 1; }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 2D accessors (row-major).
    T& at(int r, int c) { return data[static_cast<size_t>(r) * shape.back() + c]; }
    const T& at(int r, int c) const { return data[static_cast<size_t>(r) * shape.back() + c]; }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel())
            throw ShapeError("reshape: " + shape_to_string(shape) + " -> " + shape_to_string(s));
        return Tensor(std::move(s), data);
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> d(data.size());
        for (size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
        return Tensor<U>(shape, std::move(d));
    }
};

template <typename T>
inline bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

// True when `suffix` equals the trailing dims of `shape` (the broadcast rule
// used by add/mul: the second operand may broadcast over leading dims).
inline bool is_suffix_shape(const std::vector<int>& shape, const std::vector<int>& suffix) {
    if (suffix.size() > shape.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), shape.rbegin());
}

}  // namespace intermoe
