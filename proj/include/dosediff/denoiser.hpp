#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attention.hpp"
#include "diffusion.hpp"
#include "hwa.hpp"
#include "nn.hpp"

namespace dosediff {

/// Which conditioning pathways a network instantiates.
enum class Variant { iddpm, iddpm_hwa, full };

inline std::string to_string(Variant v)
{
    switch (v) {
    case Variant::iddpm: return "iddpm";
    case Variant::iddpm_hwa: return "iddpm+hwa";
    case Variant::full: return "full";
    }
    return "full";
}

inline Variant variant_from_string(const std::string& s)
{
    if (s == "iddpm")
        return Variant::iddpm;
    if (s == "iddpm+hwa")
        return Variant::iddpm_hwa;
    if (s == "full")
        return Variant::full;
    throw std::invalid_argument("unknown variant '" + s + "' (expected iddpm, iddpm+hwa or full)");
}

inline const std::vector<Variant>& all_variants()
{
    static const std::vector<Variant> v{Variant::iddpm, Variant::iddpm_hwa, Variant::full};
    return v;
}

struct DenoiserConfig {
    int base_channels = 16;
    std::vector<int> channel_mult{1, 2, 4};
    int time_dim = 64;
    int dose_dim = kDefaultDoseEmbeddingWidth;
    int se_reduction = kDefaultSeReduction;
    int norm_groups = 8;
    bool use_hwa = true;
    bool use_daa = true;
    bool daa_bottleneck = true;
    bool daa_decoder = true;
    DaaOrder daa_order = DaaOrder::channel_first;
    bool zero_init_head = false;
    std::uint64_t init_seed = 0;

    int levels() const { return static_cast<int>(channel_mult.size()); }
    int channels_at(int level) const { return base_channels * channel_mult.at(static_cast<std::size_t>(level)); }
    int ct_channels_at(int level) const { return std::max(1, channels_at(level) / 2); }

    static DenoiserConfig for_variant(Variant v)
    {
        DenoiserConfig c;
        c.use_hwa = v != Variant::iddpm;
        c.use_daa = v == Variant::full;
        return c;
    }

    void validate() const
    {
        require(base_channels > 0 && !channel_mult.empty(), "denoiser: empty channel configuration");
        for (int m : channel_mult)
            require(m > 0, "denoiser: channel multipliers must be positive");
        require(time_dim > 0 && time_dim % 2 == 0, "denoiser: time_dim must be positive and even");
        require(dose_dim > 0, "denoiser: dose_dim must be positive");
    }

    /// Spatial extents must be divisible by 2^levels: the encoder halves
    /// levels-1 times and the deepest HWA block still needs an even extent.
    void check_input(const Shape& spatial) const
    {
        const int div = 1 << levels();
        for (int d : spatial)
            require(d > 0 && d % div == 0, "denoiser: spatial extents must be divisible by " + std::to_string(div) +
                                               ", got " + to_string(spatial));
    }
};

/// Sinusoidal encoding of a timestep: dim/2 sines followed by dim/2 cosines
/// at geometrically spaced frequencies 10000^(-i/(dim/2)).
template <class T>
Tensor<T> timestep_embedding(int t, int dim)
{
    require(t >= 0, "timestep_embedding: negative timestep");
    require(dim > 0 && dim % 2 == 0, "timestep_embedding: dim must be even, got " + std::to_string(dim));
    const int half = dim / 2;
    Tensor<T> out({dim});
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[i] = static_cast<T>(std::sin(t * freq));
        out[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

template <class T>
struct ResBlock {
    GroupNorm<T> norm1;
    Conv3d<T> conv1;
    std::optional<Linear<T>> time_proj;
    GroupNorm<T> norm2;
    Conv3d<T> conv2;
    std::optional<Conv3d<T>> skip;

    static ResBlock create(ParamStore<T>& store, const std::string& name, int cin, int cout, int time_dim,
                           int groups, Rng& rng)
    {
        ResBlock b;
        b.norm1 = GroupNorm<T>::create(store, name + ".norm1", cin, groups);
        b.conv1 = Conv3d<T>::same3(store, name + ".conv1", cin, cout, rng);
        if (time_dim > 0)
            b.time_proj = Linear<T>::create(store, name + ".time", time_dim, cout, rng);
        b.norm2 = GroupNorm<T>::create(store, name + ".norm2", cout, groups);
        b.conv2 = Conv3d<T>::same3(store, name + ".conv2", cout, cout, rng);
        if (cin != cout)
            b.skip = Conv3d<T>::pointwise(store, name + ".skip", cin, cout, rng);
        return b;
    }

    Var<T> operator()(const Var<T>& x, const Var<T>& temb) const
    {
        Var<T> h = conv1(ag::silu(norm1(x)));
        if (time_proj)
            h = ag::shift_channels(h, (*time_proj)(ag::silu(temb)));
        h = conv2(ag::silu(norm2(h)));
        return ag::add(skip ? (*skip)(x) : x, h);
    }
};

/// Network output kept on the graph (training) together with plain values.
template <class T>
struct DenoiserOutput {
    Var<T> eps_pred; // (1,D,H,W)
    Var<T> v_pred;   // (1,D,H,W), in [0,1]

    ModelOut<T> values() const { return ModelOut<T>{eps_pred.value(), v_pred.value()}; }
};

/// Conditional 3D encoder-decoder noise predictor. The PET stream encodes
/// concat(x_t, lpet); an optional half-width CT stream feeds an HWA block at
/// every encoder level; optional DAA blocks inject the dose at the
/// bottleneck and decoder levels.
template <class T>
class Denoiser {
public:
    explicit Denoiser(DenoiserConfig config)
        : config_(std::move(config))
    {
        config_.validate();
        Rng rng(config_.init_seed);
        const int L = config_.levels();
        const int td = config_.time_dim;
        const int g = config_.norm_groups;
        auto& s = params_;

        time_fc1_ = Linear<T>::create(s, "time.fc1", td, td, rng);
        time_fc2_ = Linear<T>::create(s, "time.fc2", td, td, rng);
        pet_in_ = Conv3d<T>::same3(s, "pet.in", 2, config_.channels_at(0), rng);
        if (config_.use_hwa)
            ct_in_ = Conv3d<T>::same3(s, "ct.in", 1, config_.ct_channels_at(0), rng);

        for (int l = 0; l < L; ++l) {
            const std::string lv = std::to_string(l);
            const int c = config_.channels_at(l);
            const int cin = l == 0 ? c : config_.channels_at(l - 1);
            pet_enc_.push_back(ResBlock<T>::create(s, "pet.enc" + lv, cin, c, td, g, rng));
            if (config_.use_hwa) {
                const int cc = config_.ct_channels_at(l);
                const int ccin = l == 0 ? cc : config_.ct_channels_at(l - 1);
                ct_enc_.push_back(ResBlock<T>::create(s, "ct.enc" + lv, ccin, cc, 0, g, rng));
                ct_proj_.push_back(Conv3d<T>::pointwise(s, "ct.proj" + lv, cc, c, rng));
                hwa_.push_back(HWAParams<T>::create(s, "hwa" + lv, c, config_.se_reduction, rng));
            }
            if (l + 1 < L) {
                pet_down_.push_back(Conv3d<T>::create(s, "pet.down" + lv, c, c, 3, ConvSpec{2, 1, 1}, rng));
                if (config_.use_hwa) {
                    const int cc = config_.ct_channels_at(l);
                    ct_down_.push_back(Conv3d<T>::create(s, "ct.down" + lv, cc, cc, 3, ConvSpec{2, 1, 1}, rng));
                }
            }
        }

        const int cm = config_.channels_at(L - 1);
        mid_ = ResBlock<T>::create(s, "mid", cm, cm, td, g, rng);
        if (config_.use_daa && config_.daa_bottleneck)
            mid_daa_ = DAAParams<T>::create(s, "mid.daa", cm, config_.dose_dim, rng, config_.daa_order);

        dec_.resize(static_cast<std::size_t>(L));
        dec_daa_.resize(static_cast<std::size_t>(L));
        up_.resize(static_cast<std::size_t>(L));
        for (int l = L - 1; l >= 0; --l) {
            const std::string lv = std::to_string(l);
            const int c = config_.channels_at(l);
            dec_[l] = ResBlock<T>::create(s, "dec" + lv, 2 * c, c, td, g, rng);
            if (config_.use_daa && config_.daa_decoder)
                dec_daa_[l] = DAAParams<T>::create(s, "dec" + lv + ".daa", c, config_.dose_dim, rng, config_.daa_order);
            if (l > 0)
                up_[l] = Conv3d<T>::pointwise(s, "up" + lv, c, config_.channels_at(l - 1), rng);
        }

        out_norm_ = GroupNorm<T>::create(s, "out.norm", config_.channels_at(0), g);
        out_conv_ = Conv3d<T>::pointwise(s, "out.conv", config_.channels_at(0), 2, rng);
        if (config_.zero_init_head) {
            out_conv_.weight.mutable_value().fill(T{0});
            out_conv_.bias.mutable_value().fill(T{0});
        }
    }

    const DenoiserConfig& config() const noexcept { return config_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    DenoiserOutput<T> forward(const Tensor<T>& x_t, const Tensor<T>& lpet, const Tensor<T>& ct, int t,
                              const DoseLevel& dose) const
    {
        require_volume(x_t, "denoiser x_t");
        require(x_t.channels() == 1, "denoiser: x_t must be single-channel");
        require_same_shape(x_t, lpet, "denoiser lpet");
        require_same_shape(x_t, ct, "denoiser ct");
        require_finite(x_t, "denoiser x_t");
        require_finite(lpet, "denoiser lpet");
        require_finite(ct, "denoiser ct");
        config_.check_input(x_t.spatial_shape());
        require(dose.fraction > 0.0 && dose.fraction <= 1.0, "denoiser: dose fraction must lie in (0, 1]");

        const int L = config_.levels();
        const Var<T> temb =
            time_fc2_(ag::silu(time_fc1_(ag::constant(timestep_embedding<T>(t, config_.time_dim)))));

        const Tensor<T>* in_parts[] = {&x_t, &lpet};
        Var<T> h = pet_in_(ag::constant(concat_leading<T>({in_parts[0], in_parts[1]})));
        Var<T> c;
        if (config_.use_hwa)
            c = (*ct_in_)(ag::constant(ct));

        std::vector<Var<T>> skips;
        for (int l = 0; l < L; ++l) {
            h = pet_enc_[l](h, temb);
            if (config_.use_hwa) {
                c = ct_enc_[l](c, Var<T>());
                h = hwa_fuse(h, ct_proj_[l](c), hwa_[l]);
            }
            skips.push_back(h);
            if (l + 1 < L) {
                h = pet_down_[l](h);
                if (config_.use_hwa)
                    c = ct_down_[l](c);
            }
        }

        h = mid_(h, temb);
        if (mid_daa_)
            h = daa(h, dose, *mid_daa_);

        for (int l = L - 1; l >= 0; --l) {
            h = dec_[l](ag::concat<T>({h, skips[l]}), temb);
            if (dec_daa_[l])
                h = daa(h, dose, *dec_daa_[l]);
            if (l > 0)
                h = ag::upsample2((*up_[l])(h));
        }

        const Var<T> out = out_conv_(ag::silu(out_norm_(h)));
        DenoiserOutput<T> r;
        r.eps_pred = ag::slice(out, 0, 1);
        r.v_pred = ag::scale(ag::add_scalar(ag::tanh(ag::slice(out, 1, 1)), T{1}), T{0.5});
        require(r.eps_pred.value().all_finite() && r.v_pred.value().all_finite(),
                "denoiser: non-finite activations at timestep " + std::to_string(t));
        return r;
    }

    /// Adapter for the sampler; evaluates without recording a graph.
    NoisePredictor<T> predictor() const
    {
        return [this](const Tensor<T>& x_t, const Tensor<T>& lpet, const Tensor<T>& ct, int t, const DoseLevel& d) {
            ag::NoGradGuard no_grad;
            return forward(x_t, lpet, ct, t, d).values();
        };
    }

private:
    DenoiserConfig config_;
    ParamStore<T> params_;

    Linear<T> time_fc1_, time_fc2_;
    Conv3d<T> pet_in_;
    std::optional<Conv3d<T>> ct_in_;
    std::vector<ResBlock<T>> pet_enc_, ct_enc_;
    std::vector<Conv3d<T>> pet_down_, ct_down_, ct_proj_;
    std::vector<HWAParams<T>> hwa_;
    ResBlock<T> mid_;
    std::optional<DAAParams<T>> mid_daa_;
    std::vector<ResBlock<T>> dec_;
    std::vector<std::optional<DAAParams<T>>> dec_daa_;
    std::vector<std::optional<Conv3d<T>>> up_;
    GroupNorm<T> out_norm_;
    Conv3d<T> out_conv_;
};

} // namespace dosediff
