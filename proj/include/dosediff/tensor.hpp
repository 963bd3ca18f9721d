#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dosediff {

using Shape = std::vector<int>;

inline void require(bool condition, const std::string& message)
{
    if (!condition)
        throw std::invalid_argument(message);
}

inline std::size_t element_count(const Shape& shape)
{
    std::size_t n = 1;
    for (int d : shape)
        n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

/// Dense row-major array. Rank-4 tensors are laid out (C, D, H, W) and
/// are what the rest of the library calls a volume.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0})
        : shape_(std::move(shape))
        , data_(element_count(shape_), fill)
    {
        for (int d : shape_)
            require(d > 0, "tensor dimensions must be positive, got " + to_string(shape_));
    }

    Tensor(Shape shape, std::vector<T> data)
        : shape_(std::move(shape))
        , data_(std::move(data))
    {
        require(data_.size() == element_count(shape_),
                "data size " + std::to_string(data_.size()) + " does not match shape " + to_string(shape_));
    }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    const Shape& shape() const noexcept { return shape_; }
    int rank() const noexcept { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // Volume accessors; only meaningful for rank 4.
    int channels() const { return dim(0); }
    int depth() const { return dim(1); }
    int height() const { return dim(2); }
    int width() const { return dim(3); }
    Shape spatial_shape() const { return {dim(1), dim(2), dim(3)}; }
    std::size_t spatial_size() const
    {
        return static_cast<std::size_t>(dim(1)) * dim(2) * dim(3);
    }

    T& at(int c, int z, int y, int x)
    {
        return data_[((static_cast<std::size_t>(c) * dim(1) + z) * dim(2) + y) * dim(3) + x];
    }
    const T& at(int c, int z, int y, int x) const
    {
        return data_[((static_cast<std::size_t>(c) * dim(1) + z) * dim(2) + y) * dim(3) + x];
    }

    Tensor reshaped(Shape shape) const
    {
        require(element_count(shape) == data_.size(),
                "cannot reshape " + to_string(shape_) + " to " + to_string(shape));
        return Tensor(std::move(shape), data_);
    }

    template <class U>
    Tensor<U> cast() const
    {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

/// A rank-4 (channels, depth, height, width) tensor.
template <class T>
using Volume = Tensor<T>;

template <class T>
void require_volume(const Tensor<T>& v, const char* what)
{
    require(v.rank() == 4, std::string(what) + ": expected a (C,D,H,W) volume, got shape " + to_string(v.shape()));
}

template <class T>
void require_finite(const Tensor<T>& v, const char* what)
{
    require(v.all_finite(), std::string(what) + ": non-finite value");
}

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what)
{
    require(a.shape() == b.shape(),
            std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

/// Checks the volume invariants needed by an L-level encoder: every spatial
/// extent at least 8 and divisible by 2^levels.
template <class T>
void require_valid_volume(const Tensor<T>& v, int levels, const char* what)
{
    require_volume(v, what);
    require_finite(v, what);
    const int div = 1 << levels;
    for (int d : v.spatial_shape())
        require(d >= 8 && d % div == 0,
                std::string(what) + ": spatial extents must be >= 8 and divisible by " + std::to_string(div) +
                    ", got " + to_string(v.shape()));
}

// Small elementwise helpers used outside the autograd graph.

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "add");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] += b[i];
    return out;
}

template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "sub");
    Tensor<T> out = a;
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] -= b[i];
    return out;
}

template <class T>
Tensor<T> operator*(T s, const Tensor<T>& a)
{
    Tensor<T> out = a;
    for (auto& v : out.values())
        v *= s;
    return out;
}

template <class T>
T max_abs(const Tensor<T>& a)
{
    T m = 0;
    for (T v : a.values())
        m = std::max(m, std::abs(v));
    return m;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "max_abs_diff");
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

template <class T>
double mean_squared_difference(const Tensor<T>& a, const Tensor<T>& b)
{
    require_same_shape(a, b, "mean_squared_difference");
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

/// Slice of channels [start, start+count) of a rank-4 volume.
template <class T>
Tensor<T> channel_slice(const Tensor<T>& v, int start, int count)
{
    require_volume(v, "channel_slice");
    require(start >= 0 && count > 0 && start + count <= v.channels(), "channel_slice: range out of bounds");
    Shape s = v.shape();
    s[0] = count;
    const std::size_t n = v.spatial_size();
    std::vector<T> out(v.data() + start * n, v.data() + (start + count) * n);
    return Tensor<T>(s, std::move(out));
}

/// Concatenation along the leading dimension; trailing dimensions must agree.
template <class T>
Tensor<T> concat_leading(const std::vector<const Tensor<T>*>& parts)
{
    require(!parts.empty(), "concat: no inputs");
    Shape s = parts.front()->shape();
    int lead = 0;
    std::vector<T> out;
    for (const auto* p : parts) {
        require(p->rank() == static_cast<int>(s.size()) &&
                    std::equal(s.begin() + 1, s.end(), p->shape().begin() + 1),
                "concat: trailing shapes differ");
        lead += p->dim(0);
        out.insert(out.end(), p->values().begin(), p->values().end());
    }
    s[0] = lead;
    return Tensor<T>(s, std::move(out));
}

} // namespace dosediff
