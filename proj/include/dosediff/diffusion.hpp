#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "autograd.hpp"
#include "records.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace dosediff {

/// Per-timestep quantities of a discrete Gaussian diffusion, indexed
/// 0..steps()-1. All arrays are computed in double precision.
struct NoiseSchedule {
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> alpha_bar_prev;
    std::vector<double> posterior_variance; // beta-tilde; 0 at t = 0
    std::vector<double> posterior_mean_coef_x0;
    std::vector<double> posterior_mean_coef_xt;

    int steps() const noexcept { return static_cast<int>(beta.size()); }

    /// Builds every derived array from explicit betas and cumulative
    /// products, so callers control the exact stored alpha_bar values.
    static NoiseSchedule from_beta_and_alpha_bar(std::vector<double> betas, std::vector<double> alpha_bars)
    {
        require(!betas.empty() && betas.size() == alpha_bars.size(), "schedule: inconsistent array lengths");
        NoiseSchedule s;
        const std::size_t n = betas.size();
        s.beta = std::move(betas);
        s.alpha_bar = std::move(alpha_bars);
        s.alpha.resize(n);
        s.alpha_bar_prev.resize(n);
        s.posterior_variance.resize(n);
        s.posterior_mean_coef_x0.resize(n);
        s.posterior_mean_coef_xt.resize(n);
        for (std::size_t t = 0; t < n; ++t) {
            s.alpha[t] = 1.0 - s.beta[t];
            s.alpha_bar_prev[t] = t == 0 ? 1.0 : s.alpha_bar[t - 1];
            const double denom = 1.0 - s.alpha_bar[t];
            s.posterior_variance[t] = s.beta[t] * (1.0 - s.alpha_bar_prev[t]) / denom;
            s.posterior_mean_coef_x0[t] = s.beta[t] * std::sqrt(s.alpha_bar_prev[t]) / denom;
            s.posterior_mean_coef_xt[t] = (1.0 - s.alpha_bar_prev[t]) * std::sqrt(s.alpha[t]) / denom;
        }
        return s;
    }

    void check_step(int t) const
    {
        require(t >= 0 && t < steps(),
                "timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    }
};

inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

/// Cosine schedule: beta_t = min(1 - f(t+1)/f(t), 0.999) with
/// f(u) = cos^2(((u/T + s)/(1 + s)) * pi/2), alpha_bar = cumulative product.
inline NoiseSchedule cosine_schedule(int steps)
{
    require(steps >= 2, "cosine_schedule: need at least 2 steps");
    const auto f = [steps](double u) {
        const double c = std::cos((u / steps + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
        return c * c;
    };
    std::vector<double> betas(static_cast<std::size_t>(steps));
    std::vector<double> alpha_bars(betas.size());
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        betas[t] = std::min(1.0 - f(t + 1.0) / f(t), kMaxBeta);
        prod *= 1.0 - betas[t];
        alpha_bars[t] = prod;
    }
    return NoiseSchedule::from_beta_and_alpha_bar(std::move(betas), std::move(alpha_bars));
}

/// A schedule over a strictly increasing subset of the original timesteps.
/// schedule is indexed by position in timesteps; timesteps[i] is the
/// original index handed to the network.
struct RespacedSchedule {
    std::vector<int> timesteps;
    NoiseSchedule schedule;

    int steps() const noexcept { return static_cast<int>(timesteps.size()); }
};

/// Evenly strided subset of {0..T-1} of size K containing both ends
/// (round-half-up of i*(T-1)/(K-1)); K = 1 keeps only step 0.
inline std::vector<int> respaced_timesteps(int total, int keep)
{
    require(total >= 1, "respace: empty schedule");
    require(keep >= 1 && keep <= total,
            "respace: K must lie in [1, " + std::to_string(total) + "], got " + std::to_string(keep));
    if (keep == 1)
        return {0};
    std::vector<int> out(static_cast<std::size_t>(keep));
    const long long span = total - 1, den = keep - 1;
    for (long long i = 0; i < keep; ++i)
        out[i] = static_cast<int>((2 * i * span + den) / (2 * den));
    return out;
}

inline RespacedSchedule respace(const NoiseSchedule& base, int keep)
{
    RespacedSchedule r;
    r.timesteps = respaced_timesteps(base.steps(), keep);
    std::vector<double> betas, alpha_bars;
    double prev = 1.0;
    for (int t : r.timesteps) {
        alpha_bars.push_back(base.alpha_bar[t]);
        betas.push_back(1.0 - base.alpha_bar[t] / prev);
        prev = base.alpha_bar[t];
    }
    r.schedule = NoiseSchedule::from_beta_and_alpha_bar(std::move(betas), std::move(alpha_bars));
    return r;
}

/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s)
{
    require_same_shape(x0, eps, "q_sample");
    s.check_step(t);
    const double a = std::sqrt(s.alpha_bar[t]);
    const double b = std::sqrt(1.0 - s.alpha_bar[t]);
    Tensor<T> out = x0;
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = static_cast<T>(a * x0[k] + b * eps[k]);
    return out;
}

/// Natural log of the learned variance: v log beta_t + (1 - v) log beta~_t;
/// at t = 0, where beta~ vanishes, log beta_0.
inline double learned_log_variance(double v, int t, const NoiseSchedule& s)
{
    if (t == 0)
        return std::log(s.beta[0]);
    return v * std::log(s.beta[t]) + (1.0 - v) * std::log(s.posterior_variance[t]);
}

/// Sigma = exp(v log beta_t + (1 - v) log beta~_t), elementwise in v.
template <class T>
Tensor<T> learned_variance(const Tensor<T>& v, int t, const NoiseSchedule& s)
{
    s.check_step(t);
    Tensor<T> out = v;
    for (std::size_t k = 0; k < out.size(); ++k) {
        require(v[k] >= T{0} && v[k] <= T{1}, "learned_variance: v must lie in [0, 1]");
        out[k] = static_cast<T>(std::exp(learned_log_variance(static_cast<double>(v[k]), t, s)));
    }
    return out;
}

/// Network output: predicted noise and the variance weight v in [0, 1].
template <class T>
struct ModelOut {
    Tensor<T> eps_pred;
    Tensor<T> v_pred;
};

/// mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t).
template <class T>
Tensor<T> p_mean(const Tensor<T>& eps_pred, const Tensor<T>& x_t, int t, const NoiseSchedule& s)
{
    require_same_shape(eps_pred, x_t, "p_mean");
    s.check_step(t);
    const double c_eps = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
    const double inv = 1.0 / std::sqrt(s.alpha[t]);
    Tensor<T> mu = x_t;
    for (std::size_t k = 0; k < mu.size(); ++k)
        mu[k] = static_cast<T>(inv * (x_t[k] - c_eps * eps_pred[k]));
    return mu;
}

/// Mean of q(x_{t-1} | x_t, x_0).
template <class T>
Tensor<T> q_posterior_mean(const Tensor<T>& x0, const Tensor<T>& x_t, int t, const NoiseSchedule& s)
{
    require_same_shape(x0, x_t, "q_posterior_mean");
    s.check_step(t);
    Tensor<T> out = x0;
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = static_cast<T>(s.posterior_mean_coef_x0[t] * x0[k] + s.posterior_mean_coef_xt[t] * x_t[k]);
    return out;
}

/// x0 implied by an eps prediction: (x_t - sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_bar_t).
template <class T>
Tensor<T> predict_x0(const Tensor<T>& eps_pred, const Tensor<T>& x_t, int t, const NoiseSchedule& s)
{
    require_same_shape(eps_pred, x_t, "predict_x0");
    s.check_step(t);
    const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
    Tensor<T> x0 = x_t;
    for (std::size_t k = 0; k < x0.size(); ++k)
        x0[k] = static_cast<T>((x_t[k] - b * eps_pred[k]) / a);
    return x0;
}

/// One reverse step x_t -> x_{t-1}; no noise is added at t = 0.
/// With clip > 0 the mean is the posterior mean of the x0 estimate clamped
/// to [-clip, clip]; without clipping that equals p_mean. Respaced schedules
/// end with alpha_t near 0, where p_mean amplifies eps errors by 1/sqrt(alpha_t).
template <class T>
Tensor<T> p_step(const ModelOut<T>& out, const Tensor<T>& x_t, int t, const NoiseSchedule& s, Rng& rng,
                 double clip = 0.0)
{
    require(out.eps_pred.all_finite() && out.v_pred.all_finite(), "p_step: non-finite model output");
    require_same_shape(out.v_pred, x_t, "p_step");
    Tensor<T> x;
    if (clip > 0) {
        Tensor<T> x0 = predict_x0(out.eps_pred, x_t, t, s);
        for (auto& v : x0.values())
            v = std::clamp(v, static_cast<T>(-clip), static_cast<T>(clip));
        x = q_posterior_mean(x0, x_t, t, s);
    } else {
        x = p_mean(out.eps_pred, x_t, t, s);
    }
    if (t == 0)
        return x;
    const Tensor<T> var = learned_variance(out.v_pred, t, s);
    for (std::size_t k = 0; k < x.size(); ++k)
        x[k] += static_cast<T>(std::sqrt(static_cast<double>(var[k])) * rng.normal());
    return x;
}

// ---------------------------------------------------------------------------
// Training objective

/// KL(N(m1, exp(lv1)) || N(m2, exp(lv2))) in nats.
inline double normal_kl(double mean1, double logvar1, double mean2, double logvar2)
{
    return 0.5 * (-1.0 + logvar2 - logvar1 + std::exp(logvar1 - logvar2) +
                  (mean1 - mean2) * (mean1 - mean2) * std::exp(-logvar2));
}

inline double standard_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

/// log-likelihood of x under N(mean, exp(logvar)) integrated over a bin of
/// width 2/255, with open-ended edge bins beyond +-0.999.
inline double discretized_gaussian_log_likelihood(double x, double mean, double logvar)
{
    const double inv_std = std::exp(-0.5 * logvar);
    const double centered = x - mean;
    const double cdf_plus = standard_normal_cdf(inv_std * (centered + 1.0 / 255.0));
    const double cdf_min = standard_normal_cdf(inv_std * (centered - 1.0 / 255.0));
    if (x < -0.999)
        return std::log(std::max(cdf_plus, 1e-12));
    if (x > 0.999)
        return std::log(std::max(1.0 - cdf_min, 1e-12));
    return std::log(std::max(cdf_plus - cdf_min, 1e-12));
}

inline constexpr double kVlbWeight = 0.001;

/// Variational bound term for one timestep, in bits per voxel, with the
/// model mean held fixed: gradients reach only the variance weight v.
template <class T>
ag::Var<T> vlb_term(const ag::Var<T>& v, const Tensor<T>& eps_pred, const Tensor<T>& x0, const Tensor<T>& x_t, int t,
                    const NoiseSchedule& s)
{
    require_same_shape(v.value(), x0, "vlb_term");
    s.check_step(t);
    const Tensor<T> mu = p_mean(eps_pred, x_t, t, s);
    const std::size_t n = x0.size();
    const double inv_ln2 = 1.0 / std::numbers::ln2;
    double total = 0;
    if (t == 0) {
        const double lv = std::log(s.beta[0]);
        for (std::size_t k = 0; k < n; ++k)
            total -= discretized_gaussian_log_likelihood(x0[k], mu[k], lv);
        Tensor<T> val({1}, std::vector<T>{static_cast<T>(total * inv_ln2 / n)});
        return ag::make_result<T>(std::move(val), {v}, [](ag::Node<T>&) {});
    }
    const Tensor<T> mu_q = q_posterior_mean(x0, x_t, t, s);
    const double log_bt = std::log(s.beta[t]);
    const double log_pt = std::log(s.posterior_variance[t]);
    std::vector<T> dv(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double vk = v.value()[k];
        const double lv = vk * log_bt + (1.0 - vk) * log_pt;
        const double d2 = (static_cast<double>(mu_q[k]) - mu[k]) * (static_cast<double>(mu_q[k]) - mu[k]);
        total += normal_kl(mu_q[k], log_pt, mu[k], lv);
        // d kl / d lv * d lv / d v
        dv[k] = static_cast<T>(0.5 * (1.0 - std::exp(log_pt - lv) - d2 * std::exp(-lv)) * (log_bt - log_pt) *
                               inv_ln2 / n);
    }
    Tensor<T> val({1}, std::vector<T>{static_cast<T>(total * inv_ln2 / n)});
    return ag::make_result<T>(std::move(val), {v}, [dv = std::move(dv)](ag::Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < dv.size(); ++k)
            g[k] += self.grad[0] * dv[k];
    });
}

template <class T>
struct HybridLoss {
    ag::Var<T> total;
    double simple = 0;
    double vlb = 0;
};

/// L = mean((eps_pred - eps)^2) + lambda * L_vlb(t).
template <class T>
HybridLoss<T> hybrid_loss(const ag::Var<T>& eps_pred, const ag::Var<T>& v, const Tensor<T>& x0, const Tensor<T>& x_t,
                          int t, const Tensor<T>& eps, const NoiseSchedule& s, double lambda = kVlbWeight)
{
    require_same_shape(eps_pred.value(), eps, "hybrid_loss");
    HybridLoss<T> out;
    const ag::Var<T> simple = ag::mse(eps_pred, ag::constant(eps));
    out.simple = simple.value()[0];
    if (lambda == 0.0) {
        out.total = simple;
        return out;
    }
    const ag::Var<T> vlb = vlb_term(v, eps_pred.value(), x0, x_t, t, s);
    out.vlb = vlb.value()[0];
    out.total = ag::add(simple, ag::scale(vlb, static_cast<T>(lambda)));
    return out;
}

// ---------------------------------------------------------------------------
// Conditional sampling

/// Network interface used by the sampler: (x_t, lpet, ct, original
/// timestep, dose) -> (eps_pred, v).
template <class T>
using NoisePredictor =
    std::function<ModelOut<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, const DoseLevel&)>;

inline constexpr double kSampleClip = 1.0;

/// Ancestral sampling over a respaced schedule, starting from pure noise
/// shaped like lpet and conditioning every step on (lpet, ct, dose).
/// clip bounds the per-step x0 estimate (0 disables it).
template <class T>
Tensor<T> sample(const Tensor<T>& lpet, const Tensor<T>& ct, const DoseLevel& dose, const NoisePredictor<T>& model,
                 const RespacedSchedule& sched, Rng& rng, double clip = kSampleClip)
{
    require_same_shape(lpet, ct, "sample");
    ag::NoGradGuard no_grad;
    Tensor<T> x = rng.normal_tensor<T>(lpet.shape());
    for (int i = sched.steps() - 1; i >= 0; --i) {
        const ModelOut<T> out = model(x, lpet, ct, sched.timesteps[i], dose);
        x = p_step(out, x, i, sched.schedule, rng, clip);
    }
    return x;
}

} // namespace dosediff
