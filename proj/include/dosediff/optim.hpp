#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "nn.hpp"

namespace dosediff {

/// Cosine annealing from lr0 at step 0 to lr_min at step total-1.
inline double cosine_lr(int step, int total, double lr0, double lr_min)
{
    require(total > 0 && step >= 0 && step < total, "cosine_lr: step outside [0, total)");
    if (total == 1)
        return lr0;
    const double progress = static_cast<double>(step) / (total - 1);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Adam with decoupled weight decay over every tensor of a ParamStore.
template <class T>
class AdamW {
public:
    AdamW(ParamStore<T>& params, AdamWOptions opt = {})
        : params_(params)
        , opt_(opt)
    {
        for (const auto& [_, p] : params_) {
            m_.emplace_back(p.value().size(), 0.0);
            v_.emplace_back(p.value().size(), 0.0);
        }
    }

    /// One update with learning rate lr, scaling gradients by grad_scale
    /// (e.g. 1/batch for accumulated gradients).
    void step(double lr, double grad_scale = 1.0)
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
        const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
        std::size_t k = 0;
        for (auto& [_, cp] : params_) {
            Var<T> p = cp;
            auto& m = m_[k];
            auto& v = v_[k];
            ++k;
            if (p.grad().empty())
                continue;
            Tensor<T>& w = p.mutable_value();
            const Tensor<T>& g = p.grad();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]) * grad_scale;
                m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
                v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
                const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
                w[i] = static_cast<T>(w[i] - lr * (update + opt_.weight_decay * w[i]));
            }
        }
    }

    long steps_taken() const noexcept { return t_; }

private:
    ParamStore<T>& params_;
    AdamWOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

} // namespace dosediff
