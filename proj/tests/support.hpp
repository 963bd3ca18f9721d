#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dosediff/dosediff.hpp"

namespace dosediff::testing {

using ag::Var;

struct GradCheck {
    double rel_error = 0;
    double analytic_norm = 0;
    double numeric_norm = 0;
};

inline double rel_diff(const std::vector<double>& a, const std::vector<double>& b)
{
    double num = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(num) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

/// Compares the backward-pass gradient of a scalar loss w.r.t. `param`
/// against central differences over every element of `param`.
inline GradCheck check_gradient(const std::function<Var<double>()>& loss, Var<double> param, double h = 1e-5)
{
    param.zero_grad();
    Var<double> l = loss();
    l.backward();
    std::vector<double> analytic(param.value().values().begin(), param.value().values().end());
    for (std::size_t i = 0; i < analytic.size(); ++i)
        analytic[i] = param.grad().empty() ? 0.0 : param.grad()[i];
    std::vector<double> numeric(analytic.size());
    ag::NoGradGuard ng;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
        double& w = param.mutable_value()[i];
        const double orig = w;
        w = orig + h;
        const double fp = loss().value()[0];
        w = orig - h;
        const double fm = loss().value()[0];
        w = orig;
        numeric[i] = (fp - fm) / (2 * h);
    }
    GradCheck r;
    r.rel_error = rel_diff(analytic, numeric);
    for (double v : analytic)
        r.analytic_norm += v * v;
    for (double v : numeric)
        r.numeric_norm += v * v;
    r.analytic_norm = std::sqrt(r.analytic_norm);
    r.numeric_norm = std::sqrt(r.numeric_norm);
    return r;
}

/// Directional-derivative check for large tensors: compares <grad, u> with
/// (f(w + h u) - f(w - h u)) / 2h for a random unit direction u.
inline double check_directional(const std::function<Var<double>()>& loss, Var<double> param, Rng& rng, double h = 1e-4)
{
    param.zero_grad();
    Var<double> l = loss();
    l.backward();
    Tensor<double> u = rng.normal_tensor<double>(param.value().shape());
    double norm = 0;
    for (double v : u.values())
        norm += v * v;
    norm = std::sqrt(norm);
    double analytic = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        u[i] /= norm;
        analytic += (param.grad().empty() ? 0.0 : param.grad()[i]) * u[i];
    }
    ag::NoGradGuard ng;
    Tensor<double> orig = param.value();
    for (std::size_t i = 0; i < u.size(); ++i)
        param.mutable_value()[i] = orig[i] + h * u[i];
    const double fp = loss().value()[0];
    for (std::size_t i = 0; i < u.size(); ++i)
        param.mutable_value()[i] = orig[i] - h * u[i];
    const double fm = loss().value()[0];
    param.mutable_value() = orig;
    const double numeric = (fp - fm) / (2 * h);
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-10});
}

/// Random projection of a tensor to a scalar, so every output element
/// contributes with a distinct weight.
inline Var<double> project(const Var<double>& out, const Tensor<double>& weights)
{
    return ag::weighted_sum(out, weights);
}

inline Tensor<double> random_volume(Rng& rng, int c, int n) { return rng.normal_tensor<double>({c, n, n, n}); }

} // namespace dosediff::testing
