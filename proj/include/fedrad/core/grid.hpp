#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace fedrad {

/// Extent of a 3-D grid, slowest axis first (D x H x W).
struct Dims {
  std::uint32_t d = 0;
  std::uint32_t h = 0;
  std::uint32_t w = 0;

  constexpr std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(d) * h * w;
  }
  constexpr std::uint32_t operator[](std::size_t axis) const noexcept {
    return axis == 0 ? d : (axis == 1 ? h : w);
  }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

/// Dense row-major 3-D grid.
template <typename T>
class Grid3 {
 public:
  Grid3() = default;
  explicit Grid3(Dims dims, T fill = T{}) : dims_(dims), data_(dims.voxels(), fill) {}
  Grid3(Dims dims, std::vector<T> data) : dims_(dims), data_(std::move(data)) {}

  const Dims& dims() const noexcept { return dims_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return (z * dims_.h + y) * dims_.w + x;
  }
  T& operator()(std::size_t z, std::size_t y, std::size_t x) noexcept { return data_[index(z, y, x)]; }
  const T& operator()(std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return data_[index(z, y, x)];
  }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  friend bool operator==(const Grid3&, const Grid3&) = default;

 private:
  Dims dims_{};
  std::vector<T> data_;
};

/// mm per voxel along (d, h, w).
using Spacing = std::array<double, 3>;

inline double voxel_volume_mm3(const Spacing& s) noexcept { return s[0] * s[1] * s[2]; }

}  // namespace fedrad
