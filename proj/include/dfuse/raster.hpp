#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dfuse/errors.hpp"

namespace dfuse {

/// Row-major pixel grid. Index i maps to (x, y) = (i mod W, i div W), so the
/// right neighbour of i is i+1 and the neighbour below is i+W.
template <class V>
class Raster {
 public:
  Raster() = default;
  Raster(int width, int height, V fill = V{})
      : width_(width), height_(height),
        values_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width <= 0 || height <= 0)
      throw Error(Err::InvalidArgument, "raster dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return values_.size(); }

  bool in_bounds(int x, int y) const { return x >= 0 && x < width_ && y >= 0 && y < height_; }

  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width_ + x; }
  int x_of(std::size_t i) const { return static_cast<int>(i % width_); }
  int y_of(std::size_t i) const { return static_cast<int>(i / width_); }

  V& at(int x, int y) { return values_[index(x, y)]; }
  const V& at(int x, int y) const { return values_[index(x, y)]; }

  V& operator[](std::size_t i) { return values_[i]; }
  const V& operator[](std::size_t i) const { return values_[i]; }

  V* data() { return values_.data(); }
  const V* data() const { return values_.data(); }

  bool same_size(int w, int h) const { return width_ == w && height_ == h; }

  template <class U>
  bool same_size(const Raster<U>& o) const { return same_size(o.width(), o.height()); }

  void fill(V v) { values_.assign(values_.size(), v); }

  bool operator==(const Raster&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<V> values_;
};

using Mask = Raster<std::uint8_t>;

template <class A, class B>
void require_same_size(const Raster<A>& a, const Raster<B>& b, const char* what) {
  if (!a.same_size(b))
    throw Error(Err::DimensionMismatch, std::string(what) + ": " + std::to_string(a.width()) + "x" +
                                            std::to_string(a.height()) + " vs " +
                                            std::to_string(b.width()) + "x" +
                                            std::to_string(b.height()));
}

}  // namespace dfuse
