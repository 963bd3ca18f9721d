#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "tensor.hpp"

namespace dosediff {

inline constexpr double kPsnrCapDb = 100.0;

/// Default PSNR/SSIM dynamic range: the reference volume's max - min.
template <class T>
double reference_range(const Tensor<T>& ref)
{
    require(!ref.empty(), "reference_range: empty volume");
    const auto [lo, hi] = std::minmax_element(ref.values().begin(), ref.values().end());
    return static_cast<double>(*hi) - static_cast<double>(*lo);
}

/// Peak signal-to-noise ratio in dB, capped at 100 dB (which is also the
/// value for identical inputs).
template <class T>
double psnr(const Tensor<T>& pred, const Tensor<T>& ref, double data_range)
{
    require_same_shape(pred, ref, "psnr");
    require_finite(pred, "psnr pred");
    require_finite(ref, "psnr ref");
    require(data_range > 0.0 && std::isfinite(data_range), "psnr: data_range must be positive");
    const double mse = mean_squared_difference(pred, ref);
    if (mse == 0.0)
        return kPsnrCapDb;
    return std::min(kPsnrCapDb, 10.0 * std::log10(data_range * data_range / mse));
}

template <class T>
double psnr(const Tensor<T>& pred, const Tensor<T>& ref)
{
    return psnr(pred, ref, reference_range(ref));
}

struct SsimOptions {
    int window = 7;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
};

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma)
{
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    double total = 0;
    for (int i = 0; i < size; ++i) {
        w[i] = std::exp(-(i - c) * (i - c) / (2 * sigma * sigma));
        total += w[i];
    }
    for (auto& v : w)
        v /= total;
    return w;
}

// Valid-mode separable filtering of a D*H*W field along one axis.
inline std::vector<double> filter_axis(const std::vector<double>& in, std::array<int, 3> dims, int axis,
                                       const std::vector<double>& w, std::array<int, 3>& out_dims)
{
    const int k = static_cast<int>(w.size());
    out_dims = dims;
    out_dims[axis] = dims[axis] - k + 1;
    std::vector<double> out(static_cast<std::size_t>(out_dims[0]) * out_dims[1] * out_dims[2]);
    const std::array<std::size_t, 3> stride{static_cast<std::size_t>(dims[1]) * dims[2],
                                            static_cast<std::size_t>(dims[2]), 1};
    std::size_t o = 0;
    for (int z = 0; z < out_dims[0]; ++z)
        for (int y = 0; y < out_dims[1]; ++y)
            for (int x = 0; x < out_dims[2]; ++x) {
                const std::size_t base = z * stride[0] + y * stride[1] + x;
                double acc = 0;
                for (int i = 0; i < k; ++i)
                    acc += w[i] * in[base + i * stride[axis]];
                out[o++] = acc;
            }
    return out;
}

inline std::vector<double> gaussian_filter_valid(const std::vector<double>& in, std::array<int, 3> dims,
                                                 const std::vector<double>& w)
{
    std::array<int, 3> d1{}, d2{}, d3{};
    auto a = filter_axis(in, dims, 2, w, d1);
    auto b = filter_axis(a, d1, 1, w, d2);
    return filter_axis(b, d2, 0, w, d3);
}

} // namespace detail

/// Mean structural similarity over all valid positions of a 3D Gaussian
/// window, computed per channel and averaged.
template <class T>
double ssim(const Tensor<T>& pred, const Tensor<T>& ref, double data_range, const SsimOptions& opt = {})
{
    require_volume(pred, "ssim");
    require_same_shape(pred, ref, "ssim");
    require_finite(pred, "ssim pred");
    require_finite(ref, "ssim ref");
    require(data_range > 0.0, "ssim: data_range must be positive");
    for (int d : pred.spatial_shape())
        require(d >= opt.window, "ssim: volume smaller than the " + std::to_string(opt.window) + "^3 window");

    const auto w = detail::gaussian_window(opt.window, opt.sigma);
    const double c1 = (opt.k1 * data_range) * (opt.k1 * data_range);
    const double c2 = (opt.k2 * data_range) * (opt.k2 * data_range);
    const std::array<int, 3> dims{pred.depth(), pred.height(), pred.width()};
    const std::size_t n = pred.spatial_size();

    double total = 0;
    std::size_t count = 0;
    for (int c = 0; c < pred.channels(); ++c) {
        std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = pred[c * n + i];
            y[i] = ref[c * n + i];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = detail::gaussian_filter_valid(x, dims, w);
        const auto my = detail::gaussian_filter_valid(y, dims, w);
        const auto sxx = detail::gaussian_filter_valid(xx, dims, w);
        const auto syy = detail::gaussian_filter_valid(yy, dims, w);
        const auto sxy = detail::gaussian_filter_valid(xy, dims, w);
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i];
            const double vy = syy[i] - my[i] * my[i];
            const double cov = sxy[i] - mx[i] * my[i];
            total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                     ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        count += mx.size();
    }
    return total / static_cast<double>(count);
}

template <class T>
double ssim(const Tensor<T>& pred, const Tensor<T>& ref)
{
    return ssim(pred, ref, reference_range(ref));
}

} // namespace dosediff
