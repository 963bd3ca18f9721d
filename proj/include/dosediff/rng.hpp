#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "tensor.hpp"

namespace dosediff {

/// splitmix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Seed for a sub-stream identified by a path of integers, e.g.
/// derive_seed(master, {phantom_id, dose_index}). Order independent of
/// when the stream is consumed, so parallel generation cannot change output.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path)
{
    std::uint64_t s = mix_seed(master);
    for (std::uint64_t p : path)
        s = mix_seed(s ^ mix_seed(p + 0x632BE59BD9B4E019ull));
    return s;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0)
        : engine_(seed)
    {
    }

    double uniform(double lo = 0.0, double hi = 1.0)
    {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }

    double normal() { return normal_(engine_); }

    long poisson(double mean)
    {
        if (mean <= 0.0)
            return 0;
        return std::poisson_distribution<long>(mean)(engine_);
    }

    template <class T>
    Tensor<T> normal_tensor(const Shape& shape)
    {
        Tensor<T> out(shape);
        for (auto& v : out.values())
            v = static_cast<T>(normal_(engine_));
        return out;
    }

    template <class T>
    Tensor<T> uniform_tensor(const Shape& shape, double lo, double hi)
    {
        Tensor<T> out(shape);
        std::uniform_real_distribution<double> dist(lo, hi);
        for (auto& v : out.values())
            v = static_cast<T>(dist(engine_));
        return out;
    }

    std::mt19937_64& engine() noexcept { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

} // namespace dosediff
