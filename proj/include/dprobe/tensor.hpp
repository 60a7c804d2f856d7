// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "dprobe/error.hpp"

namespace dprobe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Allocator with a fixed 64-byte alignment. Vectorized kernels peel loops according to pointer
/// alignment, so fixing it keeps floating-point results independent of where the heap puts a buffer.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major tensor. Image batches use NCHW.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        check_length();
    }

    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_dims();
        check_length();
    }

    const Shape& shape() const noexcept { return shape_; }
        std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const {
        if (i >= shape_.size()) throw IndexError("dim " + std::to_string(i) + " of rank-" + std::to_string(rank()));
        return shape_[i];
    }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != size())
            throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    /// Contiguous slab of items [first, first + count) along the leading axis.
    Tensor slice(std::size_t first, std::size_t count) const {
        if (rank() == 0 || first + count > shape_[0])
            throw IndexError("slice [" + std::to_string(first) + ", +" + std::to_string(count) + ") of " +
                             shape_string(shape_));
        Shape s = shape_;
        s[0] = count;
        const std::size_t stride = shape_[0] ? size() / shape_[0] : 0;
        return Tensor(std::move(s), AlignedVector<T>(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                                                   data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride)));
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_length() const {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_string(shape_));
    }

    void check_dims() const {
        for (std::size_t i = 1; i < shape_.size(); ++i)
            if (shape_[i] == 0)
                throw ShapeError("zero-sized trailing dimension in " + shape_string(shape_));
    }

    Shape shape_;
    AlignedVector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace dprobe
