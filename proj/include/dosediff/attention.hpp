#pragma once

#include <string>

#include "nn.hpp"
#include "records.hpp"

namespace dosediff {

inline constexpr int kDefaultSeReduction = 4;
inline constexpr int kDefaultDoseEmbeddingWidth = 64;

// ---------------------------------------------------------------------------
// Squeeze-and-excitation

template <class T>
struct SEParams {
    Linear<T> reduce;
    Linear<T> expand;

    static SEParams create(ParamStore<T>& store, const std::string& name, int channels, int reduction, Rng& rng)
    {
        require(reduction > 0 && channels % reduction == 0,
                "SE: reduction ratio " + std::to_string(reduction) + " must divide " + std::to_string(channels));
        SEParams p;
        p.reduce = Linear<T>::create(store, name + ".reduce", channels, channels / reduction, rng);
        p.expand = Linear<T>::create(store, name + ".expand", channels / reduction, channels, rng);
        return p;
    }

    int channels() const { return reduce.in_features(); }
};

/// Per-channel gates sigmoid(expand(relu(reduce(avgpool(x))))), each in (0,1).
template <class T>
Var<T> se_weights(const Var<T>& x, const SEParams<T>& p)
{
    require_volume(x.value(), "se_weights");
    require(x.dim(0) == p.channels(), "se_weights: input has " + std::to_string(x.dim(0)) +
                                          " channels, parameters expect " + std::to_string(p.channels()));
    return ag::sigmoid(p.expand(ag::relu(p.reduce(ag::global_avg_pool(x)))));
}

// ---------------------------------------------------------------------------
// Dose embedding

template <class T>
struct DoseMlp {
    Linear<T> first;
    Linear<T> second;

    static DoseMlp create(ParamStore<T>& store, const std::string& name, int width, Rng& rng)
    {
        DoseMlp m;
        m.first = Linear<T>::create(store, name + ".fc1", 1, width, rng);
        m.second = Linear<T>::create(store, name + ".fc2", width, width, rng);
        return m;
    }

    int width() const { return second.out_features(); }
};

/// 1 -> E -> E MLP (SiLU between) applied to the scalar dose fraction.
template <class T>
Var<T> dose_embed(const DoseLevel& dose, const DoseMlp<T>& p)
{
    require(dose.fraction > 0.0 && dose.fraction <= 1.0, "dose_embed: fraction must lie in (0, 1]");
    const Var<T> d = ag::constant(Tensor<T>({1}, std::vector<T>{static_cast<T>(dose.fraction)}));
    return p.second(ag::silu(p.first(d)));
}

// ---------------------------------------------------------------------------
// Dose-adaptive attention: channel branch

template <class T>
struct DAAChannelParams {
    DoseMlp<T> dose_mlp;
    Linear<T> w1;         // (2C + E) -> hidden
    Linear<T> w2;         // hidden -> C
    Linear<T> alpha_head; // hidden -> C
    Linear<T> beta_head;  // hidden -> C

    static DAAChannelParams create(ParamStore<T>& store, const std::string& name, int channels, int dose_width,
                                   Rng& rng)
    {
        DAAChannelParams p;
        const int hidden = channels;
        p.dose_mlp = DoseMlp<T>::create(store, name + ".dose_mlp", dose_width, rng);
        p.w1 = Linear<T>::create(store, name + ".w1", 2 * channels + dose_width, hidden, rng);
        p.w2 = Linear<T>::create(store, name + ".w2", hidden, channels, rng);
        p.alpha_head = Linear<T>::create(store, name + ".alpha", hidden, channels, rng);
        p.beta_head = Linear<T>::create(store, name + ".beta", hidden, channels, rng);
        return p;
    }

    int channels() const { return w2.out_features(); }
    int dose_width() const { return dose_mlp.width(); }
};

template <class T>
struct DAAChannelResult {
    Var<T> output;
    Var<T> channel_weights; // sigmoid gate, (C)
    Var<T> alpha;           // (C)
    Var<T> beta;            // (C)
};

template <class T>
DAAChannelResult<T> daa_channel_detailed(const Var<T>& x, const Var<T>& dose_embedding, const DAAChannelParams<T>& p)
{
    require_volume(x.value(), "daa_channel");
    require(x.dim(0) == p.channels(), "daa_channel: channel mismatch");
    require(dose_embedding.value().rank() == 1 && dose_embedding.dim(0) == p.dose_width(),
            "daa_channel: dose embedding width mismatch");
    const Var<T> descriptor = ag::concat<T>({ag::global_avg_pool(x), ag::global_max_pool(x), dose_embedding});
    const Var<T> hidden = ag::relu(p.w1(descriptor));
    DAAChannelResult<T> r;
    r.channel_weights = ag::sigmoid(p.w2(hidden));
    r.alpha = ag::mul(p.alpha_head(hidden), r.channel_weights);
    r.beta = ag::mul(p.beta_head(hidden), r.channel_weights);
    const Var<T> normed = ag::group_norm(x, x.dim(0), T(1e-5));
    r.output = ag::shift_channels(ag::scale_channels(normed, ag::add_scalar(r.alpha, T{1})), r.beta);
    return r;
}

/// Norm(x) * (1 + alpha) + beta with dose-conditioned, gate-scaled alpha/beta.
template <class T>
Var<T> daa_channel(const Var<T>& x, const Var<T>& dose_embedding, const DAAChannelParams<T>& p)
{
    return daa_channel_detailed(x, dose_embedding, p).output;
}

// ---------------------------------------------------------------------------
// Dose-adaptive attention: spatial branch

inline constexpr int kSpatialHidden = 4;
// The dilated kernel spans 5 voxels; extents below 4 leave no voxel whose
// neighbourhood reaches past the centre plane.
inline constexpr int kMinSpatialExtent = 4;

template <class T>
struct DAASpatialParams {
    Conv3d<T> conv;         // 2 -> hidden, 3x3x3
    Conv3d<T> dilated_conv; // hidden -> 1, 3x3x3, dilation 2

    static DAASpatialParams create(ParamStore<T>& store, const std::string& name, Rng& rng)
    {
        DAASpatialParams p;
        p.conv = Conv3d<T>::same3(store, name + ".conv", 2, kSpatialHidden, rng);
        p.dilated_conv = Conv3d<T>::same3(store, name + ".dilated", kSpatialHidden, 1, rng, 2);
        return p;
    }
};

/// Spatial attention map sigmoid(conv(concat(mean_c(x), max_c(x)))), (1,D,H,W).
template <class T>
Var<T> daa_spatial_map(const Var<T>& x, const DAASpatialParams<T>& p)
{
    require_volume(x.value(), "daa_spatial");
    for (int d : x.value().spatial_shape())
        require(d >= kMinSpatialExtent, "daa_spatial: spatial extent " + std::to_string(d) + " below minimum " +
                                            std::to_string(kMinSpatialExtent));
    const Var<T> pooled = ag::concat<T>({ag::channel_mean(x), ag::channel_max(x)});
    return ag::sigmoid(p.dilated_conv(ag::relu(p.conv(pooled))));
}

template <class T>
Var<T> daa_spatial(const Var<T>& x, const DAASpatialParams<T>& p)
{
    return ag::gate_spatial(x, daa_spatial_map(x, p));
}

// ---------------------------------------------------------------------------
// Full DAA block

enum class DaaOrder { channel_first, spatial_first };

template <class T>
struct DAAParams {
    DAAChannelParams<T> channel;
    DAASpatialParams<T> spatial;
    DaaOrder order = DaaOrder::channel_first;

    static DAAParams create(ParamStore<T>& store, const std::string& name, int channels, int dose_width, Rng& rng,
                            DaaOrder order = DaaOrder::channel_first)
    {
        DAAParams p;
        p.channel = DAAChannelParams<T>::create(store, name + ".channel", channels, dose_width, rng);
        p.spatial = DAASpatialParams<T>::create(store, name + ".spatial", rng);
        p.order = order;
        return p;
    }
};

template <class T>
Var<T> daa(const Var<T>& x, const DoseLevel& dose, const DAAParams<T>& p)
{
    const Var<T> emb = dose_embed(dose, p.channel.dose_mlp);
    if (p.order == DaaOrder::channel_first)
        return daa_spatial(daa_channel(x, emb, p.channel), p.spatial);
    return daa_channel(daa_spatial(x, p.spatial), emb, p.channel);
}

} // namespace dosediff
