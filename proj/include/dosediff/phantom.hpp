#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "records.hpp"
#include "rng.hpp"
#include "volume_io.hpp"

namespace dosediff {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    bool valid() const { return std::isfinite(lo) && std::isfinite(hi) && lo <= hi; }
};

struct PhantomSpec {
    Shape shape{32, 32, 32};
    int organs_min = 2;
    int organs_max = 4;
    int lesions_min = 1;
    int lesions_max = 3;
    double bone_shell_voxels = 1.5;
    std::array<double, 3> voxel_size_mm{2.0, 2.0, 2.0};

    double ct_air = -1000.0;
    Range ct_soft{20.0, 60.0};
    Range ct_bone{700.0, 1200.0};

    Range pet_background{0.8, 1.2};
    Range pet_organ{1.5, 3.0};
    Range pet_lesion{4.0, 8.0};
    double modulation = 0.1; // relative amplitude of the smooth activity field

    std::uint64_t seed = 0;

    void validate() const
    {
        require(shape.size() == 3, "phantom: shape must be (D,H,W)");
        for (int d : shape)
            require(d >= 8 && d % 2 == 0, "phantom: extents must be even and >= 8, got " + to_string(shape));
        require(organs_min >= 1 && organs_min <= organs_max, "phantom: invalid organ count range");
        require(lesions_min >= 0 && lesions_min <= lesions_max, "phantom: invalid lesion count range");
        require(bone_shell_voxels > 0.0, "phantom: bone shell thickness must be positive");
        for (double v : voxel_size_mm)
            require(v > 0.0, "phantom: voxel size must be positive");
        require(ct_soft.valid() && ct_bone.valid() && pet_background.valid() && pet_organ.valid() && pet_lesion.valid(),
                "phantom: malformed intensity range");
        require(ct_air < ct_soft.lo && ct_soft.hi < ct_bone.lo, "phantom: CT tiers must satisfy air < soft tissue < bone");
        require(pet_background.lo > 0.0 && pet_background.hi < pet_organ.lo && pet_organ.hi < pet_lesion.lo,
                "phantom: PET tiers must satisfy background < organ < lesion");
        require(modulation >= 0.0 && modulation < 1.0, "phantom: modulation must lie in [0, 1)");
        // Smooth modulation must not break the tier ordering.
        require(pet_background.hi * (1 + modulation) < pet_organ.lo * (1 - modulation) &&
                    pet_organ.hi * (1 + modulation) < pet_lesion.lo * (1 - modulation),
                "phantom: modulation amplitude overlaps PET tiers");
    }
};

enum class Tissue : std::uint8_t { air = 0, soft = 1, organ = 2, bone = 3, lesion = 4 };

struct Phantom {
    Tensor<float> ct;   // (1,D,H,W), HU
    Tensor<float> spet; // (1,D,H,W), activity
    std::vector<Tissue> labels;
};

namespace detail {

struct Ellipsoid {
    std::array<double, 3> c; // centre (z,y,x) in voxels
    std::array<double, 3> r; // semi-axes in voxels

    // Normalized radius; < 1 inside.
    double rho(double z, double y, double x) const
    {
        const double dz = (z - c[0]) / r[0], dy = (y - c[1]) / r[1], dx = (x - c[2]) / r[2];
        return std::sqrt(dz * dz + dy * dy + dx * dx);
    }
    double min_axis() const { return std::min({r[0], r[1], r[2]}); }
};

inline Ellipsoid random_ellipsoid_within(const Ellipsoid& host, double frac_lo, double frac_hi, Rng& rng)
{
    Ellipsoid e;
    for (int a = 0; a < 3; ++a)
        e.r[a] = host.r[a] * rng.uniform(frac_lo, frac_hi);
    // Keep the child inside the host: the centre offset plus the child's
    // extent along each axis stays under the host semi-axis.
    for (int a = 0; a < 3; ++a) {
        const double room = std::max(0.0, host.r[a] - e.r[a]) / std::sqrt(3.0);
        e.c[a] = host.c[a] + rng.uniform(-room, room);
    }
    return e;
}

} // namespace detail

/// Co-registered CT/SPET phantom: a body ellipsoid of soft tissue, ellipsoidal
/// organs (some wrapped in a bone shell) and hot lesions inside organs.
inline Phantom generate_phantom(const PhantomSpec& spec)
{
    spec.validate();
    Rng rng(spec.seed);
    const int D = spec.shape[0], H = spec.shape[1], W = spec.shape[2];
    const std::size_t n = static_cast<std::size_t>(D) * H * W;

    detail::Ellipsoid body;
    const std::array<int, 3> ext{D, H, W};
    for (int a = 0; a < 3; ++a) {
        body.r[a] = ext[a] * rng.uniform(0.38, 0.46);
        body.c[a] = (ext[a] - 1) / 2.0 + rng.uniform(-0.03, 0.03) * ext[a];
    }

    std::vector<Tissue> labels(n, Tissue::air);
    std::vector<float> ct(n, static_cast<float>(spec.ct_air));
    std::vector<float> pet(n, 0.0f);
    const double ct_body = rng.uniform(spec.ct_soft.lo, spec.ct_soft.hi);
    const double pet_body = rng.uniform(spec.pet_background.lo, spec.pet_background.hi);

    auto for_each_voxel = [&](auto&& f) {
        std::size_t i = 0;
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x, ++i)
                    f(i, z, y, x);
    };

    for_each_voxel([&](std::size_t i, int z, int y, int x) {
        if (body.rho(z, y, x) < 1.0) {
            labels[i] = Tissue::soft;
            ct[i] = static_cast<float>(ct_body);
            pet[i] = static_cast<float>(pet_body);
        }
    });

    const int n_organs = rng.uniform_int(spec.organs_min, spec.organs_max);
    std::vector<detail::Ellipsoid> organs;
    for (int k = 0; k < n_organs; ++k) {
        const auto organ = detail::random_ellipsoid_within(body, 0.25, 0.45, rng);
        const bool shelled = k == 0 || rng.uniform() < 0.4;
        const double ct_organ = rng.uniform(spec.ct_soft.lo, spec.ct_soft.hi);
        const double ct_bone = rng.uniform(spec.ct_bone.lo, spec.ct_bone.hi);
        const double pet_organ = rng.uniform(spec.pet_organ.lo, spec.pet_organ.hi);
        const double shell = 1.0 + spec.bone_shell_voxels / organ.min_axis();
        for_each_voxel([&](std::size_t i, int z, int y, int x) {
            if (labels[i] == Tissue::air)
                return;
            const double rho = organ.rho(z, y, x);
            if (rho < 1.0) {
                labels[i] = Tissue::organ;
                ct[i] = static_cast<float>(ct_organ);
                pet[i] = static_cast<float>(pet_organ);
            } else if (shelled && rho < shell && labels[i] != Tissue::organ) {
                labels[i] = Tissue::bone;
                ct[i] = static_cast<float>(ct_bone);
                pet[i] = static_cast<float>(pet_body);
            }
        });
        organs.push_back(organ);
    }

    const int n_lesions = rng.uniform_int(spec.lesions_min, spec.lesions_max);
    for (int k = 0; k < n_lesions; ++k) {
        const auto& host = organs[static_cast<std::size_t>(rng.uniform_int(0, n_organs - 1))];
        detail::Ellipsoid lesion;
        for (int a = 0; a < 3; ++a)
            lesion.r[a] = std::min(host.r[a] * 0.6, rng.uniform(1.5, 3.5));
        for (int a = 0; a < 3; ++a) {
            const double room = std::max(0.0, host.r[a] - lesion.r[a]) / std::sqrt(3.0);
            lesion.c[a] = host.c[a] + rng.uniform(-room, room);
        }
        const double pet_lesion = rng.uniform(spec.pet_lesion.lo, spec.pet_lesion.hi);
        for_each_voxel([&](std::size_t i, int z, int y, int x) {
            if (labels[i] != Tissue::organ && labels[i] != Tissue::lesion)
                return;
            if (lesion.rho(z, y, x) < 1.0) {
                labels[i] = Tissue::lesion;
                pet[i] = static_cast<float>(pet_lesion);
            }
        });
    }

    // Low-frequency multiplicative activity field (no blur: edges stay sharp).
    if (spec.modulation > 0.0) {
        constexpr int kWaves = 3;
        std::array<std::array<double, 4>, kWaves> waves{};
        for (auto& w : waves) {
            for (int a = 0; a < 3; ++a)
                w[a] = rng.uniform(-1.5, 1.5) * 2.0 * std::numbers::pi / ext[a];
            w[3] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        }
        for_each_voxel([&](std::size_t i, int z, int y, int x) {
            if (labels[i] == Tissue::air)
                return;
            double s = 0.0;
            for (const auto& w : waves)
                s += std::cos(w[0] * z + w[1] * y + w[2] * x + w[3]);
            pet[i] = static_cast<float>(pet[i] * (1.0 + spec.modulation * s / kWaves));
        });
    }

    Phantom p;
    p.ct = Tensor<float>({1, D, H, W}, std::move(ct));
    p.spet = Tensor<float>({1, D, H, W}, std::move(pet));
    p.labels = std::move(labels);
    return p;
}

struct DoseProtocol {
    std::vector<double> fractions{0.02, 0.05, 0.10, 0.20, 0.50};
    double kappa = 50.0; // expected counts per voxel at full dose for unit activity

    void validate() const
    {
        require(!fractions.empty(), "dose protocol: no fractions");
        for (double f : fractions)
            require(f > 0.0 && f <= 1.0, "dose protocol: fraction " + std::to_string(f) + " outside (0, 1]");
        require(kappa > 0.0 && std::isfinite(kappa), "dose protocol: kappa must be positive");
    }
};

/// Reduced-acquisition PET by Poisson thinning: c ~ Poisson(kappa*f*a),
/// returned as c / (kappa*f) so the expectation equals the activity.
template <class T>
Tensor<T> simulate_dose(const Tensor<T>& spet, const DoseLevel& dose, double kappa, std::uint64_t seed)
{
    require_finite(spet, "simulate_dose");
    require(dose.fraction > 0.0 && dose.fraction <= 1.0, "simulate_dose: dose fraction must lie in (0, 1]");
    require(kappa > 0.0, "simulate_dose: kappa must be positive");
    const double rate = kappa * dose.fraction;
    Rng rng(seed);
    Tensor<T> out(spet.shape());
    for (std::size_t i = 0; i < spet.size(); ++i) {
        const double a = spet[i];
        require(a >= 0.0, "simulate_dose: negative activity at voxel " + std::to_string(i));
        out[i] = a == 0.0 ? T{0} : static_cast<T>(static_cast<double>(rng.poisson(rate * a)) / rate);
    }
    return out;
}

struct SplitRatios {
    double train = 0.7;
    double val = 0.1;
    double test = 0.2;

    void validate() const
    {
        require(train >= 0 && val >= 0 && test >= 0 && std::abs(train + val + test - 1.0) < 1e-9,
                "split ratios must be non-negative and sum to 1");
    }
};

struct DatasetSpec {
    PhantomSpec phantom;
    DoseProtocol protocol;
    int n_phantoms = 100;
    SplitRatios splits;
    std::uint64_t master_seed = 0;
};

/// Split of phantom `id` out of `n`; ids are partitioned into contiguous
/// train / val / test blocks.
inline Split split_for_phantom(int id, int n, const SplitRatios& r)
{
    const int n_train = static_cast<int>(std::floor(n * r.train + 1e-9));
    const int n_val = static_cast<int>(std::floor(n * r.val + 1e-9));
    if (id < n_train)
        return Split::train;
    if (id < n_train + n_val)
        return Split::val;
    return Split::test;
}

inline std::string phantom_stem(int id)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%04d", id);
    return buf;
}

inline std::string dose_tag(double fraction)
{
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03d", static_cast<int>(std::lround(fraction * 100.0)));
    return buf;
}

/// Writes CT, SPET and one LPET per dose fraction for each phantom, plus
/// manifest.json. Paths in the manifest are relative to out_dir. Every random
/// draw is keyed on (master seed, phantom id, dose) so the files do not
/// depend on generation order.
inline std::vector<SampleRecord> build_dataset(const DatasetSpec& spec, const fs::path& out_dir)
{
    spec.phantom.validate();
    spec.protocol.validate();
    spec.splits.validate();
    require(spec.n_phantoms > 0, "build_dataset: n_phantoms must be positive");
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec)
        throw IoError(out_dir, "cannot create directory: " + ec.message());

    std::vector<SampleRecord> records;
    for (int id = 0; id < spec.n_phantoms; ++id) {
        PhantomSpec ps = spec.phantom;
        ps.seed = derive_seed(spec.master_seed, {0, static_cast<std::uint64_t>(id)});
        const Phantom ph = generate_phantom(ps);
        const std::string stem = phantom_stem(id);
        const std::string ct_name = stem + "_ct.vol";
        const std::string spet_name = stem + "_spet.vol";

        VolumeMeta meta;
        meta.shape = ph.ct.shape();
        meta.voxel_size_mm = ps.voxel_size_mm;
        meta.seed = ps.seed;
        meta.modality = Modality::CT;
        write_volume(out_dir / ct_name, ph.ct, meta);
        meta.modality = Modality::PET;
        meta.dose_fraction = 1.0;
        write_volume(out_dir / spet_name, ph.spet, meta);

        const Split split = split_for_phantom(id, spec.n_phantoms, spec.splits);
        for (std::size_t j = 0; j < spec.protocol.fractions.size(); ++j) {
            const DoseLevel dose = DoseLevel::from_fraction(spec.protocol.fractions[j]);
            const std::uint64_t seed = derive_seed(spec.master_seed, {1, static_cast<std::uint64_t>(id), j});
            const std::string lpet_name = stem + "_lpet_" + dose_tag(dose.fraction) + ".vol";
            meta.dose_fraction = dose.fraction;
            meta.seed = seed;
            write_volume(out_dir / lpet_name, simulate_dose(ph.spet, dose, spec.protocol.kappa, seed), meta);

            SampleRecord r;
            r.id = stem + "_d" + dose_tag(dose.fraction);
            r.lpet_path = lpet_name;
            r.spet_path = spet_name;
            r.ct_path = ct_name;
            r.dose = dose;
            r.seed = seed;
            r.split = split;
            r.phantom_id = id;
            records.push_back(std::move(r));
        }
    }
    write_manifest(out_dir / "manifest.json", records);
    return records;
}

} // namespace dosediff
