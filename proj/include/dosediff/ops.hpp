#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "autograd.hpp"
#include "conv.hpp"
#include "wavelet.hpp"

// Differentiable operations on Var. Every op checks its shapes up front and
// accumulates into parent gradients only for parents that require them.

namespace dosediff::ag {

namespace detail {

template <class T, class F>
Var<T> unary(const Var<T>& a, F&& f, std::function<void(Node<T>&)> back)
{
    Tensor<T> out = a.value();
    for (auto& v : out.values())
        v = f(v);
    return make_result(std::move(out), {a}, std::move(back));
}

} // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.value(), b.value(), "add");
    return make_result(a.value() + b.value(), {a, b}, [](Node<T>& self) {
        for (std::size_t i = 0; i < 2; ++i)
            if (self.parent(i).requires_grad) {
                auto& g = self.parent(i).grad_buffer();
                for (std::size_t k = 0; k < g.size(); ++k)
                    g[k] += self.grad[k];
            }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.value(), b.value(), "sub");
    return make_result(a.value() - b.value(), {a, b}, [](Node<T>& self) {
        if (self.parent(0).requires_grad) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += self.grad[k];
        }
        if (self.parent(1).requires_grad) {
            auto& g = self.parent(1).grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] -= self.grad[k];
        }
    });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.value(), b.value(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] *= b.value()[k];
    return make_result(std::move(out), {a, b}, [](Node<T>& self) {
        const auto& av = self.parent(0).value;
        const auto& bv = self.parent(1).value;
        if (self.parent(0).requires_grad) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += self.grad[k] * bv[k];
        }
        if (self.parent(1).requires_grad) {
            auto& g = self.parent(1).grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += self.grad[k] * av[k];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s)
{
    return detail::unary<T>(a, [s](T v) { return v * s; }, [s](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] += s * self.grad[k];
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s)
{
    return detail::unary<T>(a, [s](T v) { return v + s; }, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] += self.grad[k];
    });
}

template <class T>
Var<T> relu(const Var<T>& a)
{
    return detail::unary<T>(a, [](T v) { return v > 0 ? v : T{0}; }, [](Node<T>& self) {
        const auto& x = self.parent(0).value;
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k)
            if (x[k] > 0)
                g[k] += self.grad[k];
    });
}

template <class T>
T sigmoid_scalar(T v)
{
    return v >= 0 ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
}

template <class T>
Var<T> sigmoid(const Var<T>& a)
{
    return detail::unary<T>(a, [](T v) { return sigmoid_scalar(v); }, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) {
            const T y = self.value[k];
            g[k] += self.grad[k] * y * (T{1} - y);
        }
    });
}

template <class T>
Var<T> silu(const Var<T>& a)
{
    return detail::unary<T>(a, [](T v) { return v * sigmoid_scalar(v); }, [](Node<T>& self) {
        const auto& x = self.parent(0).value;
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) {
            const T s = sigmoid_scalar(x[k]);
            g[k] += self.grad[k] * (s + x[k] * s * (T{1} - s));
        }
    });
}

template <class T>
Var<T> tanh(const Var<T>& a)
{
    return detail::unary<T>(a, [](T v) { return std::tanh(v); }, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) {
            const T y = self.value[k];
            g[k] += self.grad[k] * (T{1} - y * y);
        }
    });
}

/// 3D convolution; weight (Cout,Cin,k,k,k), optional bias (Cout).
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvSpec spec)
{
    const bool has_bias = bias.defined();
    Tensor<T> out = conv3d_forward(x.value(), weight.value(), has_bias ? &bias.value() : nullptr, spec);
    std::vector<Var<T>> inputs{x, weight};
    if (has_bias)
        inputs.push_back(bias);
    return make_result(std::move(out), inputs, [spec, has_bias](Node<T>& self) {
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        Tensor<T>* gb = has_bias && self.parent(2).requires_grad ? &self.parent(2).grad_buffer() : nullptr;
        conv3d_backward(px.value, pw.value, spec, self.grad, px.requires_grad ? &px.grad_buffer() : nullptr,
                        pw.requires_grad ? &pw.grad_buffer() : nullptr, gb);
    });
}

/// y = W x + b for a vector x (n), W (m,n), b (m).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias)
{
    require(x.value().rank() == 1, "linear: input must be a vector");
    require(weight.value().rank() == 2 && weight.dim(1) == x.dim(0),
            "linear: weight " + to_string(weight.shape()) + " incompatible with input " + to_string(x.shape()));
    const int m = weight.dim(0), n = weight.dim(1);
    require(bias.value().rank() == 1 && bias.dim(0) == m, "linear: bias size mismatch");
    Tensor<T> out = bias.value();
    const auto& w = weight.value();
    const auto& xv = x.value();
    for (int i = 0; i < m; ++i) {
        T acc = 0;
        for (int j = 0; j < n; ++j)
            acc += w[static_cast<std::size_t>(i) * n + j] * xv[j];
        out[i] += acc;
    }
    return make_result(std::move(out), {x, weight, bias}, [m, n](Node<T>& self) {
        const auto& g = self.grad;
        auto& px = self.parent(0);
        auto& pw = self.parent(1);
        auto& pb = self.parent(2);
        if (px.requires_grad) {
            auto& gx = px.grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gx[j] += pw.value[static_cast<std::size_t>(i) * n + j] * g[i];
        }
        if (pw.requires_grad) {
            auto& gw = pw.grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    gw[static_cast<std::size_t>(i) * n + j] += g[i] * px.value[j];
        }
        if (pb.requires_grad) {
            auto& gb = pb.grad_buffer();
            for (int i = 0; i < m; ++i)
                gb[i] += g[i];
        }
    });
}

/// Concatenation along the leading dimension (channels for volumes).
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts)
{
    std::vector<const Tensor<T>*> vals;
    for (const auto& p : parts)
        vals.push_back(&p.value());
    Tensor<T> out = concat_leading(vals);
    return make_result(std::move(out), parts, [](Node<T>& self) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
            auto& p = self.parent(i);
            const std::size_t n = p.value.size();
            if (p.requires_grad) {
                auto& g = p.grad_buffer();
                for (std::size_t k = 0; k < n; ++k)
                    g[k] += self.grad[offset + k];
            }
            offset += n;
        }
    });
}

/// Rows [start, start+count) of the leading dimension.
template <class T>
Var<T> slice(const Var<T>& x, int start, int count)
{
    const auto& v = x.value();
    require(start >= 0 && count > 0 && start + count <= v.dim(0), "slice: range out of bounds");
    Shape s = v.shape();
    s[0] = count;
    const std::size_t inner = v.size() / static_cast<std::size_t>(v.dim(0));
    std::vector<T> data(v.data() + start * inner, v.data() + (start + count) * inner);
    return make_result(Tensor<T>(s, std::move(data)), {x}, [start, inner](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        const std::size_t off = start * inner;
        for (std::size_t k = 0; k < self.grad.size(); ++k)
            g[off + k] += self.grad[k];
    });
}

/// x (C,D,H,W) times per-channel factors s (C).
template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s)
{
    require_volume(x.value(), "scale_channels");
    const int c = x.value().channels();
    require(s.value().rank() == 1 && s.dim(0) == c, "scale_channels: factor count must equal channel count");
    const std::size_t n = x.value().spatial_size();
    Tensor<T> out = x.value();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < n; ++k)
            out[ch * n + k] *= s.value()[ch];
    return make_result(std::move(out), {x, s}, [c, n](Node<T>& self) {
        auto& px = self.parent(0);
        auto& ps = self.parent(1);
        if (px.requires_grad) {
            auto& g = px.grad_buffer();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < n; ++k)
                    g[ch * n + k] += self.grad[ch * n + k] * ps.value[ch];
        }
        if (ps.requires_grad) {
            auto& g = ps.grad_buffer();
            for (int ch = 0; ch < c; ++ch) {
                T acc = 0;
                for (std::size_t k = 0; k < n; ++k)
                    acc += self.grad[ch * n + k] * px.value[ch * n + k];
                g[ch] += acc;
            }
        }
    });
}

/// x (C,D,H,W) plus per-channel offsets b (C).
template <class T>
Var<T> shift_channels(const Var<T>& x, const Var<T>& b)
{
    require_volume(x.value(), "shift_channels");
    const int c = x.value().channels();
    require(b.value().rank() == 1 && b.dim(0) == c, "shift_channels: offset count must equal channel count");
    const std::size_t n = x.value().spatial_size();
    Tensor<T> out = x.value();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < n; ++k)
            out[ch * n + k] += b.value()[ch];
    return make_result(std::move(out), {x, b}, [c, n](Node<T>& self) {
        auto& px = self.parent(0);
        auto& pb = self.parent(1);
        if (px.requires_grad) {
            auto& g = px.grad_buffer();
            for (std::size_t k = 0; k < g.size(); ++k)
                g[k] += self.grad[k];
        }
        if (pb.requires_grad) {
            auto& g = pb.grad_buffer();
            for (int ch = 0; ch < c; ++ch) {
                T acc = 0;
                for (std::size_t k = 0; k < n; ++k)
                    acc += self.grad[ch * n + k];
                g[ch] += acc;
            }
        }
    });
}

/// x (C,D,H,W) times a single-channel spatial map m (1,D,H,W).
template <class T>
Var<T> gate_spatial(const Var<T>& x, const Var<T>& m)
{
    require_volume(x.value(), "gate_spatial");
    require(m.value().rank() == 4 && m.dim(0) == 1 && m.value().spatial_shape() == x.value().spatial_shape(),
            "gate_spatial: map must be (1,D,H,W) matching the input");
    const int c = x.value().channels();
    const std::size_t n = x.value().spatial_size();
    Tensor<T> out = x.value();
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < n; ++k)
            out[ch * n + k] *= m.value()[k];
    return make_result(std::move(out), {x, m}, [c, n](Node<T>& self) {
        auto& px = self.parent(0);
        auto& pm = self.parent(1);
        if (px.requires_grad) {
            auto& g = px.grad_buffer();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < n; ++k)
                    g[ch * n + k] += self.grad[ch * n + k] * pm.value[k];
        }
        if (pm.requires_grad) {
            auto& g = pm.grad_buffer();
            for (int ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < n; ++k)
                    g[k] += self.grad[ch * n + k] * px.value[ch * n + k];
        }
    });
}

/// Global average over the spatial axes: (C,D,H,W) -> (C).
template <class T>
Var<T> global_avg_pool(const Var<T>& x)
{
    require_volume(x.value(), "global_avg_pool");
    const int c = x.value().channels();
    const std::size_t n = x.value().spatial_size();
    Tensor<T> out({c});
    for (int ch = 0; ch < c; ++ch) {
        T acc = 0;
        for (std::size_t k = 0; k < n; ++k)
            acc += x.value()[ch * n + k];
        out[ch] = acc / static_cast<T>(n);
    }
    return make_result(std::move(out), {x}, [c, n](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (int ch = 0; ch < c; ++ch) {
            const T v = self.grad[ch] / static_cast<T>(n);
            for (std::size_t k = 0; k < n; ++k)
                g[ch * n + k] += v;
        }
    });
}

/// Global maximum over the spatial axes: (C,D,H,W) -> (C).
template <class T>
Var<T> global_max_pool(const Var<T>& x)
{
    require_volume(x.value(), "global_max_pool");
    const int c = x.value().channels();
    const std::size_t n = x.value().spatial_size();
    Tensor<T> out({c});
    std::vector<std::size_t> arg(static_cast<std::size_t>(c));
    for (int ch = 0; ch < c; ++ch) {
        const T* p = x.value().data() + ch * n;
        arg[ch] = static_cast<std::size_t>(std::max_element(p, p + n) - p) + ch * n;
        out[ch] = x.value()[arg[ch]];
    }
    return make_result(std::move(out), {x}, [arg](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t ch = 0; ch < arg.size(); ++ch)
            g[arg[ch]] += self.grad[ch];
    });
}

/// Mean over channels: (C,D,H,W) -> (1,D,H,W).
template <class T>
Var<T> channel_mean(const Var<T>& x)
{
    require_volume(x.value(), "channel_mean");
    const int c = x.value().channels();
    const std::size_t n = x.value().spatial_size();
    Shape s = x.shape();
    s[0] = 1;
    Tensor<T> out(s);
    for (int ch = 0; ch < c; ++ch)
        for (std::size_t k = 0; k < n; ++k)
            out[k] += x.value()[ch * n + k];
    for (auto& v : out.values())
        v /= static_cast<T>(c);
    return make_result(std::move(out), {x}, [c, n](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (int ch = 0; ch < c; ++ch)
            for (std::size_t k = 0; k < n; ++k)
                g[ch * n + k] += self.grad[k] / static_cast<T>(c);
    });
}

/// Max over channels: (C,D,H,W) -> (1,D,H,W).
template <class T>
Var<T> channel_max(const Var<T>& x)
{
    require_volume(x.value(), "channel_max");
    const int c = x.value().channels();
    const std::size_t n = x.value().spatial_size();
    Shape s = x.shape();
    s[0] = 1;
    Tensor<T> out(s);
    std::vector<int> arg(n, 0);
    for (std::size_t k = 0; k < n; ++k) {
        T best = x.value()[k];
        for (int ch = 1; ch < c; ++ch)
            if (x.value()[ch * n + k] > best) {
                best = x.value()[ch * n + k];
                arg[k] = ch;
            }
        out[k] = best;
    }
    return make_result(std::move(out), {x}, [arg = std::move(arg), n](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < n; ++k)
            g[arg[k] * n + k] += self.grad[k];
    });
}

/// Group normalization without affine parameters; groups == C gives
/// per-channel standardization over the spatial voxels.
template <class T>
Var<T> group_norm(const Var<T>& x, int groups, T eps)
{
    require_volume(x.value(), "group_norm");
    const int c = x.value().channels();
    require(groups > 0 && c % groups == 0, "group_norm: groups must divide the channel count");
    const std::size_t per = static_cast<std::size_t>(c / groups) * x.value().spatial_size();
    Tensor<T> out = x.value();
    std::vector<T> inv_std(static_cast<std::size_t>(groups));
    for (int gi = 0; gi < groups; ++gi) {
        T* p = out.data() + gi * per;
        double mean = 0;
        for (std::size_t k = 0; k < per; ++k)
            mean += p[k];
        mean /= static_cast<double>(per);
        double var = 0;
        for (std::size_t k = 0; k < per; ++k)
            var += (p[k] - mean) * (p[k] - mean);
        var /= static_cast<double>(per);
        const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
        inv_std[gi] = static_cast<T>(is);
        for (std::size_t k = 0; k < per; ++k)
            p[k] = static_cast<T>((p[k] - mean) * is);
    }
    return make_result(std::move(out), {x}, [groups, per, inv_std = std::move(inv_std)](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (int gi = 0; gi < groups; ++gi) {
            const T* dy = self.grad.data() + gi * per;
            const T* xh = self.value.data() + gi * per;
            double mdy = 0, mdyx = 0;
            for (std::size_t k = 0; k < per; ++k) {
                mdy += dy[k];
                mdyx += static_cast<double>(dy[k]) * xh[k];
            }
            mdy /= static_cast<double>(per);
            mdyx /= static_cast<double>(per);
            T* gx = g.data() + gi * per;
            for (std::size_t k = 0; k < per; ++k)
                gx[k] += static_cast<T>(inv_std[gi] * (dy[k] - mdy - xh[k] * mdyx));
        }
    });
}

/// Nearest-neighbour 2x upsampling of the spatial axes.
template <class T>
Var<T> upsample2(const Var<T>& x)
{
    require_volume(x.value(), "upsample2");
    const auto& v = x.value();
    const int c = v.channels(), d = v.depth(), h = v.height(), w = v.width();
    Tensor<T> out({c, 2 * d, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int z = 0; z < 2 * d; ++z)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    out.at(ch, z, y, xx) = v.at(ch, z / 2, y / 2, xx / 2);
    return make_result(std::move(out), {x}, [c, d, h, w](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (int ch = 0; ch < c; ++ch)
            for (int z = 0; z < 2 * d; ++z)
                for (int y = 0; y < 2 * h; ++y)
                    for (int xx = 0; xx < 2 * w; ++xx)
                        g.at(ch, z / 2, y / 2, xx / 2) += self.grad.at(ch, z, y, xx);
    });
}

/// Stacked one-level Haar analysis (C,D,H,W) -> (8C,D/2,H/2,W/2). The
/// transform is orthonormal, so its adjoint is the synthesis.
template <class T>
Var<T> dwt3(const Var<T>& x)
{
    return make_result(dwt3_stacked(x.value()), {x}, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        const Tensor<T> back = idwt3_stacked(self.grad);
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] += back[k];
    });
}

template <class T>
Var<T> idwt3(const Var<T>& stacked)
{
    return make_result(idwt3_stacked(stacked.value()), {stacked}, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        const Tensor<T> back = dwt3_stacked(self.grad);
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] += back[k];
    });
}

template <class T>
Var<T> sum(const Var<T>& x)
{
    T acc = 0;
    for (T v : x.value().values())
        acc += v;
    return make_result(Tensor<T>({1}, std::vector<T>{acc}), {x}, [](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (auto& v : g.values())
            v += self.grad[0];
    });
}

/// sum(x * w) for a constant weight tensor; handy as a generic probe loss.
template <class T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& w)
{
    require_same_shape(x.value(), w, "weighted_sum");
    T acc = 0;
    for (std::size_t k = 0; k < w.size(); ++k)
        acc += x.value()[k] * w[k];
    return make_result(Tensor<T>({1}, std::vector<T>{acc}), {x}, [w](Node<T>& self) {
        auto& g = self.parent(0).grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] += self.grad[0] * w[k];
    });
}

/// Mean of squared differences, returned as a one-element tensor.
template <class T>
Var<T> mse(const Var<T>& a, const Var<T>& b)
{
    require_same_shape(a.value(), b.value(), "mse");
    const std::size_t n = a.value().size();
    double acc = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double d = static_cast<double>(a.value()[k]) - b.value()[k];
        acc += d * d;
    }
    return make_result(Tensor<T>({1}, std::vector<T>{static_cast<T>(acc / n)}), {a, b}, [n](Node<T>& self) {
        const auto& av = self.parent(0).value;
        const auto& bv = self.parent(1).value;
        const T s = T{2} * self.grad[0] / static_cast<T>(n);
        if (self.parent(0).requires_grad) {
            auto& g = self.parent(0).grad_buffer();
            for (std::size_t k = 0; k < n; ++k)
                g[k] += s * (av[k] - bv[k]);
        }
        if (self.parent(1).requires_grad) {
            auto& g = self.parent(1).grad_buffer();
            for (std::size_t k = 0; k < n; ++k)
                g[k] -= s * (av[k] - bv[k]);
        }
    });
}

} // namespace dosediff::ag
