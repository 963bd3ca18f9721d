#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "tensor.hpp"

namespace dosediff {

enum class WaveletFamily { haar };

/// Subband labels ordered as (depth, height, width) filter letters; the
/// index of a band is (d << 2) | (h << 1) | w with L = 0, H = 1.
inline constexpr std::array<std::string_view, 8> kBandLabels{"LLL", "LLH", "LHL", "LHH",
                                                              "HLL", "HLH", "HHL", "HHH"};

inline int band_index(std::string_view label)
{
    for (int i = 0; i < 8; ++i)
        if (kBandLabels[i] == label)
            return i;
    throw std::invalid_argument("unknown wavelet band '" + std::string(label) + "'");
}

/// One level of a 3D separable DWT. bands[0] (LLL) is the low-frequency
/// component, bands[1..7] the high-frequency ones.
template <class T>
struct WaveletBands {
    std::array<Tensor<T>, 8> bands;
    WaveletFamily family = WaveletFamily::haar;
    Shape original_shape;

    Tensor<T>& operator[](std::string_view label) { return bands[band_index(label)]; }
    const Tensor<T>& operator[](std::string_view label) const { return bands[band_index(label)]; }
    const Tensor<T>& low() const { return bands[0]; }
};

namespace detail {

// Fused 2x2x2 Haar butterflies. The stacked layout is band-major:
// channel b*C + c holds band b of input channel c.
template <class T>
void haar_analysis(const T* in, int C, int D, int H, int W, T* stacked)
{
    const int d2 = D / 2, h2 = H / 2, w2 = W / 2;
    const std::size_t half = static_cast<std::size_t>(d2) * h2 * w2;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const T s = static_cast<T>(1.0 / (2.0 * std::sqrt(2.0)));
    for (int c = 0; c < C; ++c) {
        const T* src = in + static_cast<std::size_t>(c) * D * plane;
        for (int z = 0; z < d2; ++z)
            for (int y = 0; y < h2; ++y)
                for (int x = 0; x < w2; ++x) {
                    const std::size_t i0 = (2 * z) * plane + (2 * y) * W + 2 * x;
                    const T a000 = src[i0], a001 = src[i0 + 1];
                    const T a010 = src[i0 + W], a011 = src[i0 + W + 1];
                    const T a100 = src[i0 + plane], a101 = src[i0 + plane + 1];
                    const T a110 = src[i0 + plane + W], a111 = src[i0 + plane + W + 1];
                    // along W
                    const T l00 = a000 + a001, h00 = a000 - a001;
                    const T l01 = a010 + a011, h01 = a010 - a011;
                    const T l10 = a100 + a101, h10 = a100 - a101;
                    const T l11 = a110 + a111, h11 = a110 - a111;
                    // along H
                    const T ll0 = l00 + l01, lh0 = l00 - l01, hl0 = h00 + h01, hh0 = h00 - h01;
                    const T ll1 = l10 + l11, lh1 = l10 - l11, hl1 = h10 + h11, hh1 = h10 - h11;
                    // along D; band letters are (D, H, W)
                    const std::size_t o = (static_cast<std::size_t>(z) * h2 + y) * w2 + x;
                    T* dst = stacked + static_cast<std::size_t>(c) * half + o;
                    const std::size_t bs = static_cast<std::size_t>(C) * half;
                    dst[0 * bs] = s * (ll0 + ll1); // LLL
                    dst[1 * bs] = s * (hl0 + hl1); // LLH
                    dst[2 * bs] = s * (lh0 + lh1); // LHL
                    dst[3 * bs] = s * (hh0 + hh1); // LHH
                    dst[4 * bs] = s * (ll0 - ll1); // HLL
                    dst[5 * bs] = s * (hl0 - hl1); // HLH
                    dst[6 * bs] = s * (lh0 - lh1); // HHL
                    dst[7 * bs] = s * (hh0 - hh1); // HHH
                }
    }
}

template <class T>
void haar_synthesis(const T* stacked, int C, int D, int H, int W, T* out)
{
    const int d2 = D / 2, h2 = H / 2, w2 = W / 2;
    const std::size_t half = static_cast<std::size_t>(d2) * h2 * w2;
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t bs = static_cast<std::size_t>(C) * half;
    const T s = static_cast<T>(1.0 / (2.0 * std::sqrt(2.0)));
    for (int c = 0; c < C; ++c) {
        T* dst = out + static_cast<std::size_t>(c) * D * plane;
        for (int z = 0; z < d2; ++z)
            for (int y = 0; y < h2; ++y)
                for (int x = 0; x < w2; ++x) {
                    const std::size_t o = (static_cast<std::size_t>(z) * h2 + y) * w2 + x;
                    const T* src = stacked + static_cast<std::size_t>(c) * half + o;
                    const T lll = src[0 * bs], llh = src[1 * bs], lhl = src[2 * bs], lhh = src[3 * bs];
                    const T hll = src[4 * bs], hlh = src[5 * bs], hhl = src[6 * bs], hhh = src[7 * bs];
                    // undo D
                    const T ll0 = lll + hll, ll1 = lll - hll;
                    const T hl0 = llh + hlh, hl1 = llh - hlh;
                    const T lh0 = lhl + hhl, lh1 = lhl - hhl;
                    const T hh0 = lhh + hhh, hh1 = lhh - hhh;
                    // undo H
                    const T l00 = ll0 + lh0, l01 = ll0 - lh0, h00 = hl0 + hh0, h01 = hl0 - hh0;
                    const T l10 = ll1 + lh1, l11 = ll1 - lh1, h10 = hl1 + hh1, h11 = hl1 - hh1;
                    // undo W
                    const std::size_t i0 = (2 * z) * plane + (2 * y) * W + 2 * x;
                    dst[i0] = s * (l00 + h00);
                    dst[i0 + 1] = s * (l00 - h00);
                    dst[i0 + W] = s * (l01 + h01);
                    dst[i0 + W + 1] = s * (l01 - h01);
                    dst[i0 + plane] = s * (l10 + h10);
                    dst[i0 + plane + 1] = s * (l10 - h10);
                    dst[i0 + plane + W] = s * (l11 + h11);
                    dst[i0 + plane + W + 1] = s * (l11 - h11);
                }
    }
}

} // namespace detail

/// Band-major stacked analysis: (C,D,H,W) -> (8C, D/2, H/2, W/2).
template <class T>
Tensor<T> dwt3_stacked(const Tensor<T>& v)
{
    require_volume(v, "dwt3");
    for (int d : v.spatial_shape())
        require(d % 2 == 0, "dwt3: spatial extents must be even, got " + to_string(v.shape()));
    Tensor<T> out({8 * v.channels(), v.depth() / 2, v.height() / 2, v.width() / 2});
    detail::haar_analysis(v.data(), v.channels(), v.depth(), v.height(), v.width(), out.data());
    return out;
}

/// Inverse of dwt3_stacked: (8C, d, h, w) -> (C, 2d, 2h, 2w).
template <class T>
Tensor<T> idwt3_stacked(const Tensor<T>& stacked)
{
    require_volume(stacked, "idwt3");
    require(stacked.channels() % 8 == 0, "idwt3: stacked channel count must be a multiple of 8");
    const int c = stacked.channels() / 8;
    Tensor<T> out({c, 2 * stacked.depth(), 2 * stacked.height(), 2 * stacked.width()});
    detail::haar_synthesis(stacked.data(), c, out.depth(), out.height(), out.width(), out.data());
    return out;
}

template <class T>
WaveletBands<T> dwt3(const Tensor<T>& v)
{
    const Tensor<T> stacked = dwt3_stacked(v);
    WaveletBands<T> b;
    b.original_shape = v.shape();
    for (int i = 0; i < 8; ++i)
        b.bands[i] = channel_slice(stacked, i * v.channels(), v.channels());
    return b;
}

template <class T>
Tensor<T> idwt3(const WaveletBands<T>& b)
{
    require(b.original_shape.size() == 4, "idwt3: missing original shape");
    const Shape expect{b.original_shape[0], b.original_shape[1] / 2, b.original_shape[2] / 2,
                       b.original_shape[3] / 2};
    for (int i = 0; i < 8; ++i) {
        require(!b.bands[i].empty(), "idwt3: band " + std::string(kBandLabels[i]) + " missing");
        require(b.bands[i].shape() == expect, "idwt3: band " + std::string(kBandLabels[i]) + " has shape " +
                                                  to_string(b.bands[i].shape()) + ", expected " + to_string(expect));
    }
    std::vector<const Tensor<T>*> parts;
    for (const auto& band : b.bands)
        parts.push_back(&band);
    return idwt3_stacked(concat_leading(parts));
}

} // namespace dosediff
