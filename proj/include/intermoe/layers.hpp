#pragma once

#include <cmath>
#include <random>

#include "intermoe/autodiff.hpp"

namespace intermoe {

template <typename T>
struct Linear {
    Var<T> w, b;  // {in, out}, {out}

    Linear() = default;
    Linear(int in, int out, std::mt19937_64& rng, double gain = 1.0) {
        Tensor<T> wt = Tensor<T>::randn({in, out}, rng);
        const T s = static_cast<T>(gain / std::sqrt(static_cast<double>(in)));
        for (auto& v : wt.data) v *= s;
        w = Var<T>::leaf(std::move(wt), true);
        b = Var<T>::leaf(Tensor<T>::zeros({out}), true);
    }
    Var<T> operator()(const Var<T>& x) const { return add(matmul(x, w), b); }
};

}  // namespace intermoe
