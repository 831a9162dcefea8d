#pragma once

#include <cmath>
#include <vector>

#include "intermoe/autodiff.hpp"

namespace intermoe {

// Linear warmup to lr_max, then cosine decay to lr_min over total_steps.
struct LrSchedule {
    double lr_max = 3e-4;
    double lr_min = 1e-5;
    int warmup_steps = 100;
    int total_steps = 1000;

    double at(int step) const {
        if (warmup_steps > 0 && step < warmup_steps)
            return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
        const int span = std::max(1, total_steps - warmup_steps);
        const double u = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
        return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(u * 3.14159265358979323846));
    }
};

// AdamW: decoupled weight decay, bias-corrected moments.
template <typename T>
class AdamW {
  public:
    struct Config {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 2e-5;
    };

    AdamW(std::vector<Var<T>> params, Config cfg, LrSchedule sched)
        : params_(std::move(params)), cfg_(cfg), sched_(sched) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            m_.push_back(Tensor<double>::zeros(p.shape()));
            v_.push_back(Tensor<double>::zeros(p.shape()));
        }
    }

    int step_count() const { return t_; }
    double current_lr() const { return sched_.at(t_); }
    const std::vector<Var<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        const double lr = sched_.at(t_);
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            const Tensor<T>& g = p.grad();
            Tensor<T>& w = p.mutable_value();
            auto& m = m_[i];
            auto& v = v_[i];
            for (int64_t j = 0; j < w.numel(); ++j) {
                const double gj = static_cast<double>(g[j]);
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                double wj = static_cast<double>(w[j]);
                wj -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * wj);
                w[j] = static_cast<T>(wj);
            }
        }
    }

  private:
    std::vector<Var<T>> params_;
    Config cfg_;
    LrSchedule sched_;
    std::vector<Tensor<double>> m_, v_;
    int t_ = 0;
};

}  // namespace intermoe
