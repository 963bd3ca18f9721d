#pragma once

#include <algorithm>
#include <vector>

#include <Eigen/Core>

#include "tensor.hpp"

namespace dosediff {

struct ConvSpec {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
};

inline int conv_output_extent(int in, int kernel, const ConvSpec& s)
{
    return (in + 2 * s.padding - s.dilation * (kernel - 1) - 1) / s.stride + 1;
}

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvGeometry {
    int cin, d, h, w;
    int k;
    ConvSpec spec;
    int od, oh, ow;

    std::size_t out_spatial() const { return static_cast<std::size_t>(od) * oh * ow; }
    std::size_t col_rows() const { return static_cast<std::size_t>(cin) * k * k * k; }
    bool pointwise() const { return k == 1 && spec.stride == 1 && spec.padding == 0; }
};

// Output index range [lo, hi) for which in = o*stride - pad + off stays in [0, n).
inline void valid_range(int n, int out_n, int stride, int offset, int& lo, int& hi)
{
    // o*stride + offset >= 0  and  o*stride + offset < n
    lo = offset >= 0 ? 0 : (-offset + stride - 1) / stride;
    hi = n - offset <= 0 ? 0 : (n - offset - 1) / stride + 1;
    lo = std::min(lo, out_n);
    hi = std::clamp(hi, lo, out_n);
}

// Columns for output planes [z0, z1); cols has (z1-z0)*oh*ow columns.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols, int z0, int z1)
{
    const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.oh * g.ow;
    const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
    const int s = g.spec.stride;
    std::size_t row = 0;
    for (int c = 0; c < g.cin; ++c) {
        const T* xc = x + c * g.d * plane;
        for (int kz = 0; kz < g.k; ++kz)
            for (int ky = 0; ky < g.k; ++ky)
                for (int kx = 0; kx < g.k; ++kx, ++row) {
                    T* out = cols + row * n;
                    const int oz_off = kz * g.spec.dilation - g.spec.padding;
                    const int oy_off = ky * g.spec.dilation - g.spec.padding;
                    const int ox_off = kx * g.spec.dilation - g.spec.padding;
                    int xlo, xhi;
                    valid_range(g.w, g.ow, s, ox_off, xlo, xhi);
                    for (int oz = z0; oz < z1; ++oz) {
                        const int iz = oz * s + oz_off;
                        for (int oy = 0; oy < g.oh; ++oy) {
                            T* o = out + (static_cast<std::size_t>(oz - z0) * g.oh + oy) * g.ow;
                            const int iy = oy * s + oy_off;
                            if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                                std::fill(o, o + g.ow, T{0});
                                continue;
                            }
                            const T* src = xc + iz * plane + static_cast<std::size_t>(iy) * g.w;
                            std::fill(o, o + xlo, T{0});
                            if (s == 1) {
                                std::copy(src + xlo + ox_off, src + xhi + ox_off, o + xlo);
                            } else {
                                for (int ox = xlo; ox < xhi; ++ox)
                                    o[ox] = src[ox * s + ox_off];
                            }
                            std::fill(o + xhi, o + g.ow, T{0});
                        }
                    }
                }
    }
}

template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* dx, int z0, int z1)
{
    const std::size_t n = static_cast<std::size_t>(z1 - z0) * g.oh * g.ow;
    const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
    const int s = g.spec.stride;
    std::size_t row = 0;
    for (int c = 0; c < g.cin; ++c) {
        T* xc = dx + c * g.d * plane;
        for (int kz = 0; kz < g.k; ++kz)
            for (int ky = 0; ky < g.k; ++ky)
                for (int kx = 0; kx < g.k; ++kx, ++row) {
                    const T* in = cols + row * n;
                    const int oz_off = kz * g.spec.dilation - g.spec.padding;
                    const int oy_off = ky * g.spec.dilation - g.spec.padding;
                    const int ox_off = kx * g.spec.dilation - g.spec.padding;
                    int xlo, xhi;
                    valid_range(g.w, g.ow, s, ox_off, xlo, xhi);
                    for (int oz = z0; oz < z1; ++oz) {
                        const int iz = oz * s + oz_off;
                        if (iz < 0 || iz >= g.d)
                            continue;
                        for (int oy = 0; oy < g.oh; ++oy) {
                            const int iy = oy * s + oy_off;
                            if (iy < 0 || iy >= g.h)
                                continue;
                            const T* o = in + (static_cast<std::size_t>(oz - z0) * g.oh + oy) * g.ow;
                            T* dst = xc + iz * plane + static_cast<std::size_t>(iy) * g.w;
                            for (int ox = xlo; ox < xhi; ++ox)
                                dst[ox * s + ox_off] += o[ox];
                        }
                    }
                }
    }
}

// Output planes per im2col tile, sized so a tile of columns stays near 1 MiB.
inline int slab_planes(const ConvGeometry& g, std::size_t elem_size)
{
    const std::size_t per_plane = g.col_rows() * g.oh * g.ow * elem_size;
    return static_cast<int>(std::clamp<std::size_t>((std::size_t{1} << 20) / std::max<std::size_t>(per_plane, 1), 1,
                                                    static_cast<std::size_t>(g.od)));
}

} // namespace detail

/// Geometry of a cubic-kernel 3D convolution of x (Cin,D,H,W) with weight
/// (Cout, Cin, k, k, k).
template <class T>
detail::ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, const ConvSpec& spec)
{
    require_volume(x, "conv3d input");
    require(weight.rank() == 5, "conv3d: weight must be (Cout,Cin,k,k,k), got " + to_string(weight.shape()));
    const int k = weight.dim(2);
    require(weight.dim(3) == k && weight.dim(4) == k, "conv3d: kernel must be cubic");
    require(weight.dim(1) == x.channels(), "conv3d: weight expects " + std::to_string(weight.dim(1)) +
                                               " input channels, got " + std::to_string(x.channels()));
    require(spec.stride >= 1 && spec.dilation >= 1 && spec.padding >= 0, "conv3d: invalid stride/dilation/padding");
    detail::ConvGeometry g{x.channels(), x.depth(), x.height(), x.width(), k, spec, 0, 0, 0};
    g.od = conv_output_extent(g.d, k, spec);
    g.oh = conv_output_extent(g.h, k, spec);
    g.ow = conv_output_extent(g.w, k, spec);
    require(g.od > 0 && g.oh > 0 && g.ow > 0, "conv3d: input " + to_string(x.shape()) + " too small for kernel");
    return g;
}

template <class T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias, const ConvSpec& spec)
{
    const auto g = conv_geometry(x, weight, spec);
    const int cout = weight.dim(0);
    Tensor<T> out({cout, g.od, g.oh, g.ow});
    const auto n = static_cast<Eigen::Index>(g.out_spatial());
    const auto rows = static_cast<Eigen::Index>(g.col_rows());
    detail::ConstMatMap<T> w(weight.data(), cout, rows);
    detail::MatMap<T> o(out.data(), cout, n);
    if (g.pointwise()) {
        o.noalias() = w * detail::ConstMatMap<T>(x.data(), rows, n);
    } else {
        const int slab = detail::slab_planes(g, sizeof(T));
        const auto plane = static_cast<Eigen::Index>(g.oh) * g.ow;
        std::vector<T> cols(g.col_rows() * static_cast<std::size_t>(slab * plane));
        for (int z0 = 0; z0 < g.od; z0 += slab) {
            const int z1 = std::min(g.od, z0 + slab);
            const Eigen::Index m = (z1 - z0) * plane;
            detail::im2col(x.data(), g, cols.data(), z0, z1);
            o.middleCols(z0 * plane, m).noalias() = w * detail::ConstMatMap<T>(cols.data(), rows, m);
        }
    }
    if (bias) {
        require(bias->size() == static_cast<std::size_t>(cout), "conv3d: bias size mismatch");
        for (int c = 0; c < cout; ++c)
            o.row(c).array() += (*bias)[c];
    }
    return out;
}

/// Accumulates input, weight and bias gradients for conv3d_forward.
template <class T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& weight, const ConvSpec& spec, const Tensor<T>& grad_out,
                     Tensor<T>* grad_x, Tensor<T>* grad_w, Tensor<T>* grad_b)
{
    const auto g = conv_geometry(x, weight, spec);
    const int cout = weight.dim(0);
    const auto n = static_cast<Eigen::Index>(g.out_spatial());
    const auto rows = static_cast<Eigen::Index>(g.col_rows());
    detail::ConstMatMap<T> gy(grad_out.data(), cout, n);
    detail::ConstMatMap<T> w(weight.data(), cout, rows);

    // Fixed-order sum: Eigen's vectorized redux depends on pointer alignment.
    if (grad_b)
        for (int c = 0; c < cout; ++c) {
            const T* row = grad_out.data() + static_cast<std::size_t>(c) * n;
            double acc = 0;
            for (Eigen::Index i = 0; i < n; ++i)
                acc += row[i];
            (*grad_b)[c] += static_cast<T>(acc);
        }

    if (g.pointwise()) {
        detail::ConstMatMap<T> cols(x.data(), rows, n);
        if (grad_w)
            detail::MatMap<T>(grad_w->data(), cout, rows).noalias() += gy * cols.transpose();
        if (grad_x)
            detail::MatMap<T>(grad_x->data(), rows, n).noalias() += w.transpose() * gy;
        return;
    }

    const int slab = detail::slab_planes(g, sizeof(T));
    const auto plane = static_cast<Eigen::Index>(g.oh) * g.ow;
    std::vector<T> cols(g.col_rows() * static_cast<std::size_t>(slab * plane));
    for (int z0 = 0; z0 < g.od; z0 += slab) {
        const int z1 = std::min(g.od, z0 + slab);
        const Eigen::Index m = (z1 - z0) * plane;
        const auto gy_slab = gy.middleCols(z0 * plane, m);
        if (grad_w) {
            detail::im2col(x.data(), g, cols.data(), z0, z1);
            detail::MatMap<T>(grad_w->data(), cout, rows).noalias() +=
                gy_slab * detail::ConstMatMap<T>(cols.data(), rows, m).transpose();
        }
        if (grad_x) {
            detail::MatMap<T>(cols.data(), rows, m).noalias() = w.transpose() * gy_slab;
            detail::col2im(cols.data(), g, grad_x->data(), z0, z1);
        }
    }
}

} // namespace dosediff
