#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "colabel/error.hpp"

namespace colabel::ad {

using Shape = std::vector<int>;

// 64-byte aligned storage. Vectorised kernels choose their code path from the
// buffer alignment, so a fixed alignment keeps results bit-identical between runs.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array with an optional gradient buffer of the same length.
template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (data_.size() != shape_size(shape_)) {
            throw DimensionError("Tensor: " + std::to_string(data_.size()) + " values for shape " +
                                 shape_string(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return !grad_.empty(); }
    std::span<T> grad() { return grad_; }
    std::span<const T> grad() const { return grad_; }
    // Allocates the gradient buffer if needed and fills it with zeros.
    void zero_grad() { grad_.assign(data_.size(), T(0)); }
    void clear_grad() { grad_.clear(); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        out.set_requires_grad(requires_grad_);
        return out;
    }

private:
    Shape shape_;
    Buffer<T> data_;
    Buffer<T> grad_;
    bool requires_grad_ = false;
};

} // namespace colabel::ad
