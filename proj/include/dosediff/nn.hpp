#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"

namespace dosediff {

using ag::Var;

/// Named, insertion-ordered collection of trainable tensors.
template <class T>
class ParamStore {
public:
    Var<T> add(const std::string& name, Tensor<T> init)
    {
        require(!index_.contains(name), "duplicate parameter '" + name + "'");
        index_[name] = params_.size();
        params_.emplace_back(name, Var<T>(std::move(init), true));
        return params_.back().second;
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Var<T> get(const std::string& name) const
    {
        const auto it = index_.find(name);
        require(it != index_.end(), "unknown parameter '" + name + "'");
        return params_[it->second].second;
    }

    std::size_t size() const noexcept { return params_.size(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    std::size_t element_count() const
    {
        std::size_t n = 0;
        for (const auto& [_, p] : params_)
            n += p.value().size();
        return n;
    }

    void zero_grad()
    {
        for (auto& [_, p] : params_)
            p.zero_grad();
    }

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Kaiming-uniform style init with bound 1/sqrt(fan_in).
template <class T>
Tensor<T> fan_in_uniform(const Shape& shape, int fan_in, Rng& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return rng.uniform_tensor<T>(shape, -bound, bound);
}

template <class T>
struct Conv3d {
    Var<T> weight;
    Var<T> bias;
    ConvSpec spec;

    static Conv3d create(ParamStore<T>& store, const std::string& name, int cin, int cout, int k, ConvSpec spec,
                         Rng& rng)
    {
        const int fan_in = cin * k * k * k;
        Conv3d c;
        c.weight = store.add(name + ".weight", fan_in_uniform<T>({cout, cin, k, k, k}, fan_in, rng));
        c.bias = store.add(name + ".bias", fan_in_uniform<T>({cout}, fan_in, rng));
        c.spec = spec;
        return c;
    }

    /// Same-padded 3x3x3 (optionally dilated) convolution.
    static Conv3d same3(ParamStore<T>& store, const std::string& name, int cin, int cout, Rng& rng, int dilation = 1)
    {
        return create(store, name, cin, cout, 3, ConvSpec{1, dilation, dilation}, rng);
    }

    static Conv3d pointwise(ParamStore<T>& store, const std::string& name, int cin, int cout, Rng& rng)
    {
        return create(store, name, cin, cout, 1, ConvSpec{}, rng);
    }

    Var<T> operator()(const Var<T>& x) const { return ag::conv3d(x, weight, bias, spec); }
    int out_channels() const { return weight.dim(0); }
    int in_channels() const { return weight.dim(1); }
};

template <class T>
struct Linear {
    Var<T> weight;
    Var<T> bias;

    static Linear create(ParamStore<T>& store, const std::string& name, int in, int out, Rng& rng)
    {
        Linear l;
        l.weight = store.add(name + ".weight", fan_in_uniform<T>({out, in}, in, rng));
        l.bias = store.add(name + ".bias", fan_in_uniform<T>({out}, in, rng));
        return l;
    }

    Var<T> operator()(const Var<T>& x) const { return ag::linear(x, weight, bias); }
    int out_features() const { return weight.dim(0); }
    int in_features() const { return weight.dim(1); }
};

/// Group normalization with per-channel affine parameters.
template <class T>
struct GroupNorm {
    Var<T> gamma;
    Var<T> beta;
    int groups = 1;

    static GroupNorm create(ParamStore<T>& store, const std::string& name, int channels, int max_groups = 8)
    {
        GroupNorm n;
        n.groups = std::gcd(channels, max_groups);
        n.gamma = store.add(name + ".gamma", Tensor<T>({channels}, T{1}));
        n.beta = store.add(name + ".beta", Tensor<T>({channels}, T{0}));
        return n;
    }

    Var<T> operator()(const Var<T>& x) const
    {
        return ag::shift_channels(ag::scale_channels(ag::group_norm(x, groups, T(1e-5)), gamma), beta);
    }
};

} // namespace dosediff
