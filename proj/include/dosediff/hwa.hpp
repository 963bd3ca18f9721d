#pragma once

#include <string>

#include "attention.hpp"

namespace dosediff {

inline constexpr int kHighBands = 7;

/// CT-guided high-frequency wavelet attention. The 7 high bands of each
/// modality are stacked along channels (band-major, 7C wide) so a single SE
/// block spans all bands of one modality.
template <class T>
struct HWAParams {
    SEParams<T> pet_se;
    SEParams<T> ct_se;
    Conv3d<T> fusion; // 1x1x1, 14C -> 7C

    static HWAParams create(ParamStore<T>& store, const std::string& name, int channels, int se_reduction, Rng& rng)
    {
        HWAParams p;
        p.pet_se = SEParams<T>::create(store, name + ".pet_se", kHighBands * channels, se_reduction, rng);
        p.ct_se = SEParams<T>::create(store, name + ".ct_se", kHighBands * channels, se_reduction, rng);
        p.fusion = Conv3d<T>::pointwise(store, name + ".fusion", 2 * kHighBands * channels, kHighBands * channels, rng);
        return p;
    }

    int channels() const { return pet_se.channels() / kHighBands; }
};

/// Fuses CT high-frequency detail into PET features. The PET LLL band is
/// passed to the inverse transform untouched, so the output's low band
/// always equals the input's.
template <class T>
Var<T> hwa_fuse(const Var<T>& pet_feat, const Var<T>& ct_feat, const HWAParams<T>& p)
{
    require_volume(pet_feat.value(), "hwa_fuse pet");
    require_same_shape(pet_feat.value(), ct_feat.value(), "hwa_fuse");
    const int c = pet_feat.dim(0);
    require(c == p.channels(), "hwa_fuse: parameters expect " + std::to_string(p.channels()) + " channels, got " +
                                   std::to_string(c));

    const Var<T> pet_bands = ag::dwt3(pet_feat);
    const Var<T> ct_bands = ag::dwt3(ct_feat);
    const Var<T> pet_low = ag::slice(pet_bands, 0, c);
    const Var<T> pet_high = ag::slice(pet_bands, c, kHighBands * c);
    const Var<T> ct_high = ag::slice(ct_bands, c, kHighBands * c);

    const Var<T> pet_weighted = ag::scale_channels(pet_high, se_weights(pet_high, p.pet_se));
    const Var<T> ct_weighted = ag::scale_channels(ct_high, se_weights(ct_high, p.ct_se));
    const Var<T> fused = p.fusion(ag::concat<T>({pet_weighted, ct_weighted}));
    return ag::idwt3(ag::concat<T>({pet_low, fused}));
}

} // namespace dosediff
