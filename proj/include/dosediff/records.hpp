#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace dosediff {

inline constexpr double kStandardAcquisitionSeconds = 300.0;

/// Acquisition dose as a fraction of the 300 s standard acquisition.
struct DoseLevel {
    double fraction = 1.0;

    static DoseLevel from_fraction(double f)
    {
        require(std::isfinite(f) && f > 0.0 && f <= 1.0,
                "dose fraction must lie in (0, 1], got " + std::to_string(f));
        return DoseLevel{f};
    }

    double seconds() const noexcept { return fraction * kStandardAcquisitionSeconds; }
};

/// The fractions the dataset generator emits: 6, 15, 30, 60 and 150 s of a
/// 300 s acquisition, plus the full-dose reference.
inline const std::vector<double>& protocol_fractions()
{
    static const std::vector<double> f{0.02, 0.05, 0.10, 0.20, 0.50, 1.00};
    return f;
}

inline bool is_protocol_fraction(double f)
{
    for (double p : protocol_fractions())
        if (std::abs(p - f) < 1e-12)
            return true;
    return false;
}

enum class Split { train, val, test };

inline std::string to_string(Split s)
{
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "train";
}

inline Split split_from_string(const std::string& s)
{
    if (s == "train")
        return Split::train;
    if (s == "val")
        return Split::val;
    if (s == "test")
        return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

enum class Modality { PET, CT };

/// Sidecar metadata of a .vol file.
struct VolumeMeta {
    Shape shape;
    std::array<double, 3> voxel_size_mm{1.0, 1.0, 1.0};
    std::optional<Modality> modality;
    std::optional<double> dose_fraction;
    std::optional<std::uint64_t> seed;
};

/// One (LPET, SPET, CT) training/evaluation example. Paths are relative to
/// the manifest's directory.
struct SampleRecord {
    std::string id;
    std::string lpet_path;
    std::string spet_path;
    std::string ct_path;
    DoseLevel dose;
    std::uint64_t seed = 0;
    Split split = Split::train;
    int phantom_id = 0;
};

} // namespace dosediff
