#pragma once

#include <functional>

#include "intermoe/autodiff.hpp"

namespace testutil {

// Central-difference check of d(loss)/d(param) for an in-place model parameter.
// loss_fn must rebuild the graph from current parameter values on every call.
// Same error formula as intermoe::finite_difference_check.
template <typename T>
double fd_check_param(const std::function<intermoe::Var<T>()>& loss_fn, intermoe::Var<T> param,
                      T eps = static_cast<T>(1e-5)) {
    param.zero_grad();
    auto loss = loss_fn();
    intermoe::backward(loss);
    intermoe::Tensor<T> analytic = param.grad();

    double max_err = 0.0;
    intermoe::NoGradGuard ng;
    auto& w = param.mutable_value();
    for (int64_t i = 0; i < w.numel(); ++i) {
        const T orig = w[i];
        w[i] = orig + eps;
        const double fp = static_cast<double>(loss_fn().value()[0]);
        w[i] = orig - eps;
        const double fm = static_cast<double>(loss_fn().value()[0]);
        w[i] = orig;
        const double central = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double err =
            std::abs(static_cast<double>(analytic[i]) - central) / std::max(1.0, std::abs(central));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace testutil
