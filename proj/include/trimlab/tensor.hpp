#pragma once

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <span>
#include <vector>

#include "trimlab/core.hpp"

namespace trimlab {

/// Dense row-major n-dimensional array. Value semantics: copies own their
/// storage, so tensors can be handed between threads freely.
///
/// Dimensions are non-negative. Zero-extent axes only appear in models where a
/// whole maskable site was removed; every primitive accepts them.
template <class T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor", shape_, Shape{data_.size()}, "element count does not match shape");
    }

    static Tensor from(Shape shape, std::initializer_list<T> values) {
        return Tensor(std::move(shape), std::vector<T>(values));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item", shape_, Shape{}, "tensor is not a scalar");
        return data_[0];
    }

    /// Product of dims before `axis` and after it; handy for axis-wise kernels.
    std::size_t outer(std::size_t axis) const {
        std::size_t n = 1;
        for (std::size_t i = 0; i < axis; ++i) n *= shape_[i];
        return n;
    }
    std::size_t inner(std::size_t axis) const {
        std::size_t n = 1;
        for (std::size_t i = axis + 1; i < shape_.size(); ++i) n *= shape_[i];
        return n;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != size()) throw ShapeError("reshape", shape_, s);
        return Tensor(std::move(s), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

   private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff", a.shape(), b.shape());
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

/// Copy of `src` keeping only `keep` (sorted indices) along `axis`.
template <class T>
Tensor<T> take_along(const Tensor<T>& src, std::size_t axis, std::span<const std::size_t> keep) {
    Shape s = src.shape();
    const std::size_t outer = src.outer(axis), inner = src.inner(axis), n = s.at(axis);
    s[axis] = keep.size();
    Tensor<T> out(s);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < keep.size(); ++j) {
            const T* from = src.data() + (o * n + keep[j]) * inner;
            std::copy(from, from + inner, out.data() + (o * keep.size() + j) * inner);
        }
    return out;
}

}  // namespace trimlab
