#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <span>
#include <vector>

#include "stpc/errors.hpp"
#include "stpc/matrix.hpp"

namespace stpc {

/// One raw detector hit: position in detector units plus deposited charge.
struct Point4 {
  double x = 0, y = 0, z = 0, q = 0;
  bool operator==(const Point4&) const = default;
};

/// Lattice site (b, i, j, k). Ordering is lexicographic, which is the
/// canonical row order of every SparseTensor.
struct VoxelCoord {
  std::int32_t b = 0, i = 0, j = 0, k = 0;
  auto operator<=>(const VoxelCoord&) const = default;
};

using Site3 = std::array<std::int32_t, 3>;

/// Result of voxelizing one event. Sites are unique and sorted.
struct QuantizedEvent {
  std::vector<Site3> sites;
  std::vector<double> charge;                   // summed charge per site
  std::vector<std::array<double, 3>> centroid;  // mean (x,y,z) of merged hits
};

/// Maps every point to floor(p / voxel_size), merging duplicates by charge sum.
/// Throws EmptyEvent on empty input and InvalidPoint on non-finite values.
QuantizedEvent quantize(std::span<const Point4> points, double voxel_size);

template <class T>
struct SparseTensor {
  std::vector<VoxelCoord> coords;
  Matrix<T> features;
  int tensor_stride = 1;
  int batch_size = 0;

  std::size_t size() const { return coords.size(); }
  std::size_t channels() const { return features.cols; }
};

/// Per-event input to `batch`: unique sorted sites and one feature row per site.
template <class T>
struct EventSites {
  std::vector<Site3> sites;
  Matrix<T> features;
};

/// Concatenates events without padding, prepending the batch index.
template <class T>
SparseTensor<T> batch(std::span<const EventSites<T>> events);

/// Open-addressing hash from packed (b,i,j,k) keys to row indices.
/// Each component is stored in 16 bits; coordinates outside [-32767, 32767]
/// (or batch indices above 65535) raise RangeError.
class CoordIndex {
 public:
  explicit CoordIndex(std::span<const VoxelCoord> coords);

  /// Row of `c`, or -1 when absent.
  std::int32_t find(const VoxelCoord& c) const;
  std::size_t size() const { return count_; }

  static std::uint64_t pack(const VoxelCoord& c);

 private:
  std::vector<std::uint64_t> keys_;
  std::vector<std::int32_t> rows_;
  std::uint64_t mask_ = 0;
  std::size_t count_ = 0;
};

/// Input/output row pairs of a sparse convolution or pooling, grouped by
/// kernel offset. `offsets[o]` is the lattice offset in units of the input
/// tensor stride.
struct KernelMap {
  struct Pair {
    std::int32_t in = 0;
    std::int32_t out = 0;
    bool operator==(const Pair&) const = default;
  };

  int kernel_size = 3;
  int stride = 1;
  int in_stride = 1;
  int out_stride = 1;
  std::size_t in_rows = 0;
  std::vector<Site3> offsets;
  std::vector<std::vector<Pair>> pairs;
  std::vector<VoxelCoord> out_coords;

  /// CSR views of `pairs`, indexed by output row and by input row. Entries
  /// within a row are ordered by offset index, so reductions have a fixed order.
  struct Entry {
    std::int32_t offset = 0;
    std::int32_t row = 0;
  };
  std::vector<std::int32_t> by_out_ptr, by_in_ptr;
  std::vector<Entry> by_out, by_in;

  std::size_t volume() const { return offsets.size(); }
  std::size_t pair_count() const;
  /// Rebuilds the CSR views from `pairs`.
  void index();
};

/// Output coordinates of a stride-`stride` op on tensor stride `in_stride`:
/// unique floor_div(c, s*t) * (s*t), sorted. For stride 1 the input is returned.
std::vector<VoxelCoord> strided_coords(std::span<const VoxelCoord> coords, int in_stride,
                                       int stride);

/// Kernel map for a kernel_size^3 convolution (kernel_size 1 or 3, offsets
/// centered on zero). Pairs (in, out) exist iff coord(in) = coord(out) + o*t.
template <class T>
KernelMap build_kernel_map(const SparseTensor<T>& input, int kernel_size, int stride);

/// Kernel map for 2^3 max pooling with stride 2, offsets {0,1}^3.
template <class T>
KernelMap pool_map(const SparseTensor<T>& input);

/// Coordinate-only variants shared by the templated entry points.
KernelMap build_kernel_map(std::span<const VoxelCoord> coords, int in_stride, int kernel_size,
                           int stride);
KernelMap pool_map(std::span<const VoxelCoord> coords, int in_stride);

}  // namespace stpc
