#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "colabel/error.hpp"

namespace colabel {

// Row-major 2D array.
template <typename T>
class Grid2D {
public:
    Grid2D() = default;
    Grid2D(int rows, int cols, T fill = T{})
        : rows_(rows), cols_(cols), values_(checked_count(rows, cols), fill) {}
    Grid2D(int rows, int cols, std::vector<T> values)
        : rows_(rows), cols_(cols), values_(std::move(values)) {
        if (values_.size() != checked_count(rows, cols)) {
            throw DimensionError("Grid2D: value count does not match " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        }
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    T& operator()(int r, int c) { return values_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const { return values_[static_cast<std::size_t>(r) * cols_ + c]; }

    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }

    bool same_shape(const Grid2D& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
    bool operator==(const Grid2D&) const = default;

private:
    static std::size_t checked_count(int rows, int cols) {
        if (rows < 0 || cols < 0) throw DimensionError("Grid2D: negative extent");
        return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> values_;
};

// [slice][row][col] array, slices contiguous.
template <typename T>
class Grid3D {
public:
    Grid3D() = default;
    Grid3D(int depth, int rows, int cols, T fill = T{})
        : depth_(depth), rows_(rows), cols_(cols),
          values_(static_cast<std::size_t>(depth) * rows * cols, fill) {
        if (depth < 0 || rows < 0 || cols < 0) throw DimensionError("Grid3D: negative extent");
    }

    int depth() const { return depth_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    std::size_t slice_size() const { return static_cast<std::size_t>(rows_) * cols_; }

    T& operator()(int n, int r, int c) { return values_[index(n, r, c)]; }
    const T& operator()(int n, int r, int c) const { return values_[index(n, r, c)]; }

    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }

    std::span<T> slice_values(int n) { return {values_.data() + n * slice_size(), slice_size()}; }
    std::span<const T> slice_values(int n) const { return {values_.data() + n * slice_size(), slice_size()}; }

    Grid2D<T> slice(int n) const {
        check_slice(n);
        auto s = slice_values(n);
        return Grid2D<T>(rows_, cols_, std::vector<T>(s.begin(), s.end()));
    }

    void set_slice(int n, const Grid2D<T>& plane) {
        check_slice(n);
        if (plane.rows() != rows_ || plane.cols() != cols_) {
            throw DimensionError("Grid3D::set_slice: plane shape mismatch");
        }
        std::copy(plane.values().begin(), plane.values().end(), slice_values(n).begin());
    }

    bool same_shape(const Grid3D& o) const { return depth_ == o.depth_ && rows_ == o.rows_ && cols_ == o.cols_; }
    bool operator==(const Grid3D&) const = default;

private:
    std::size_t index(int n, int r, int c) const {
        return (static_cast<std::size_t>(n) * rows_ + r) * cols_ + c;
    }
    void check_slice(int n) const {
        if (n < 0 || n >= depth_) throw DimensionError("Grid3D: slice index " + std::to_string(n) + " out of range");
    }

    int depth_ = 0;
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> values_;
};

using Image2D = Grid2D<float>;
using Mask2D = Grid2D<std::uint8_t>;
using MaskGrid = Grid3D<std::uint8_t>;

// Millimetres per row, per column and per slice.
struct Spacing {
    double row = 1.0;
    double col = 1.0;
    double slice = 1.0;
    bool operator==(const Spacing&) const = default;
};

struct Volume {
    std::string id;
    Grid3D<float> voxels;
    Spacing spacing;

    int depth() const { return voxels.depth(); }
    int height() const { return voxels.rows(); }
    int width() const { return voxels.cols(); }

    // Throws SpecError unless N >= 3, H, W >= 8, values finite and spacing positive.
    void check_invariants() const;
};

// Full reference segmentation of a volume.
struct LabelVolume {
    std::string id;
    MaskGrid labels;
    Spacing spacing;
};

// Zero-based index of the annotated slice; the later-middle slice for even depth.
constexpr int central_index(int depth) { return depth / 2; }

struct CentralAnnotation {
    std::string volume_id;
    int index = 0;
    Mask2D mask;
};

// The only part of a reference segmentation the training stages may see.
CentralAnnotation central_annotation(const LabelVolume& reference);

bool is_binary(std::span<const std::uint8_t> values);
std::size_t count_foreground(std::span<const std::uint8_t> values);

} // namespace colabel
