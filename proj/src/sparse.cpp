#include "stpc/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

namespace stpc {

namespace {

constexpr std::int32_t kCoordLimit = 32767;

std::int32_t floor_div(std::int32_t a, std::int32_t b) {
  std::int32_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::uint64_t mix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

std::vector<Site3> cube_offsets(int lo, int hi) {
  std::vector<Site3> out;
  for (int a = lo; a <= hi; ++a)
    for (int b = lo; b <= hi; ++b)
      for (int c = lo; c <= hi; ++c) out.push_back({a, b, c});
  return out;
}

KernelMap map_with_offsets(std::span<const VoxelCoord> coords, int in_stride, int kernel_size,
                           int stride, std::vector<Site3> offsets) {
  KernelMap km;
  km.kernel_size = kernel_size;
  km.stride = stride;
  km.in_stride = in_stride;
  km.out_stride = in_stride * stride;
  km.in_rows = coords.size();
  km.offsets = std::move(offsets);
  km.out_coords = strided_coords(coords, in_stride, stride);
  km.pairs.resize(km.offsets.size());

  const CoordIndex in_index(coords);
  for (std::size_t o = 0; o < km.offsets.size(); ++o) {
    const auto& off = km.offsets[o];
    auto& list = km.pairs[o];
    for (std::size_t p = 0; p < km.out_coords.size(); ++p) {
      const VoxelCoord& c = km.out_coords[p];
      const VoxelCoord probe{c.b, c.i + off[0] * in_stride, c.j + off[1] * in_stride,
                             c.k + off[2] * in_stride};
      if (std::abs(probe.i) > kCoordLimit || std::abs(probe.j) > kCoordLimit ||
          std::abs(probe.k) > kCoordLimit)
        continue;
      const std::int32_t row = in_index.find(probe);
      if (row >= 0) list.push_back({row, static_cast<std::int32_t>(p)});
    }
  }
  km.index();
  return km;
}

}  // namespace

QuantizedEvent quantize(std::span<const Point4> points, double voxel_size) {
  if (!(voxel_size > 0) || !std::isfinite(voxel_size))
    throw ConfigError("quantize: voxel size must be positive, got " + std::to_string(voxel_size));
  if (points.empty()) throw EmptyEvent("quantize: event has no points");

  struct Acc {
    double q = 0;
    std::array<double, 3> sum{0, 0, 0};
    std::size_t n = 0;
  };
  std::map<Site3, Acc> cells;
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z) || !std::isfinite(p.q))
      throw InvalidPoint("quantize: non-finite point component");
    Site3 s;
    const double v[3] = {p.x, p.y, p.z};
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor(v[a] / voxel_size);
      if (std::abs(f) > kCoordLimit)
        throw RangeError("quantize: lattice coordinate " + std::to_string(f) +
                         " exceeds +/-32767");
      s[a] = static_cast<std::int32_t>(f);
    }
    auto& acc = cells[s];
    acc.q += p.q;
    acc.sum[0] += p.x;
    acc.sum[1] += p.y;
    acc.sum[2] += p.z;
    ++acc.n;
  }

  QuantizedEvent out;
  out.sites.reserve(cells.size());
  out.charge.reserve(cells.size());
  out.centroid.reserve(cells.size());
  for (const auto& [site, acc] : cells) {
    out.sites.push_back(site);
    out.charge.push_back(acc.q);
    const double n = static_cast<double>(acc.n);
    out.centroid.push_back({acc.sum[0] / n, acc.sum[1] / n, acc.sum[2] / n});
  }
  return out;
}

template <class T>
SparseTensor<T> batch(std::span<const EventSites<T>> events) {
  SparseTensor<T> out;
  if (events.empty()) return out;
  const std::size_t width = events.front().features.cols;
  std::size_t total = 0;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const auto& ev = events[e];
    if (ev.sites.empty()) throw EmptyEvent("batch: event " + std::to_string(e) + " has no sites");
    if (ev.features.cols != width)
      throw ShapeError("batch: event " + std::to_string(e) + " has feature width " +
                       std::to_string(ev.features.cols) + ", expected " + std::to_string(width));
    if (ev.features.rows != ev.sites.size())
      throw ShapeError("batch: event " + std::to_string(e) + " feature rows != site count");
    total += ev.sites.size();
  }
  if (events.size() > 65535) throw RangeError("batch: more than 65535 events");

  out.coords.reserve(total);
  out.features = Matrix<T>(total, width);
  out.batch_size = static_cast<int>(events.size());
  std::size_t row = 0;
  for (std::size_t e = 0; e < events.size(); ++e) {
    const auto& ev = events[e];
    for (const auto& s : ev.sites)
      out.coords.push_back({static_cast<std::int32_t>(e), s[0], s[1], s[2]});
    std::copy(ev.features.data.begin(), ev.features.data.end(),
              out.features.data.begin() + static_cast<std::ptrdiff_t>(row * width));
    row += ev.sites.size();
  }
  return out;
}

template SparseTensor<float> batch(std::span<const EventSites<float>>);
template SparseTensor<double> batch(std::span<const EventSites<double>>);

std::uint64_t CoordIndex::pack(const VoxelCoord& c) {
  auto comp = [](std::int32_t v) -> std::uint64_t {
    if (v < -kCoordLimit || v > kCoordLimit)
      throw RangeError("coordinate " + std::to_string(v) + " outside +/-32767");
    return static_cast<std::uint64_t>(static_cast<std::uint16_t>(v + 32768));
  };
  if (c.b < 0 || c.b > 65535) throw RangeError("batch index " + std::to_string(c.b) + " out of range");
  return (static_cast<std::uint64_t>(c.b) << 48) | (comp(c.i) << 32) | (comp(c.j) << 16) | comp(c.k);
}

CoordIndex::CoordIndex(std::span<const VoxelCoord> coords) {
  std::size_t cap = 16;
  while (cap < coords.size() * 2) cap <<= 1;
  keys_.assign(cap, ~std::uint64_t{0});
  rows_.assign(cap, -1);
  mask_ = cap - 1;
  for (std::size_t r = 0; r < coords.size(); ++r) {
    const std::uint64_t key = pack(coords[r]);
    std::uint64_t slot = mix64(key) & mask_;
    while (rows_[slot] >= 0) {
      if (keys_[slot] == key) throw ShapeError("CoordIndex: duplicate coordinate");
      slot = (slot + 1) & mask_;
    }
    keys_[slot] = key;
    rows_[slot] = static_cast<std::int32_t>(r);
    ++count_;
  }
}

std::int32_t CoordIndex::find(const VoxelCoord& c) const {
  const std::uint64_t key = pack(c);
  std::uint64_t slot = mix64(key) & mask_;
  while (rows_[slot] >= 0) {
    if (keys_[slot] == key) return rows_[slot];
    slot = (slot + 1) & mask_;
  }
  return -1;
}

std::size_t KernelMap::pair_count() const {
  std::size_t n = 0;
  for (const auto& p : pairs) n += p.size();
  return n;
}

void KernelMap::index() {
  const std::size_t n_out = out_coords.size();
  by_out_ptr.assign(n_out + 1, 0);
  by_in_ptr.assign(in_rows + 1, 0);
  for (const auto& list : pairs)
    for (const auto& pr : list) {
      ++by_out_ptr[static_cast<std::size_t>(pr.out) + 1];
      ++by_in_ptr[static_cast<std::size_t>(pr.in) + 1];
    }
  for (std::size_t r = 0; r < n_out; ++r) by_out_ptr[r + 1] += by_out_ptr[r];
  for (std::size_t r = 0; r < in_rows; ++r) by_in_ptr[r + 1] += by_in_ptr[r];
  by_out.resize(static_cast<std::size_t>(by_out_ptr.back()));
  by_in.resize(static_cast<std::size_t>(by_in_ptr.back()));
  std::vector<std::int32_t> fill_out(by_out_ptr.begin(), by_out_ptr.end() - 1);
  std::vector<std::int32_t> fill_in(by_in_ptr.begin(), by_in_ptr.end() - 1);
  for (std::size_t o = 0; o < pairs.size(); ++o)
    for (const auto& pr : pairs[o]) {
      by_out[static_cast<std::size_t>(fill_out[pr.out]++)] = {static_cast<std::int32_t>(o), pr.in};
      by_in[static_cast<std::size_t>(fill_in[pr.in]++)] = {static_cast<std::int32_t>(o), pr.out};
    }
}

std::vector<VoxelCoord> strided_coords(std::span<const VoxelCoord> coords, int in_stride,
                                       int stride) {
  if (stride < 1 || in_stride < 1) throw ShapeError("strided_coords: stride must be positive");
  if (stride == 1) return {coords.begin(), coords.end()};
  const std::int32_t step = in_stride * stride;
  std::vector<VoxelCoord> out;
  out.reserve(coords.size());
  for (const auto& c : coords)
    out.push_back({c.b, floor_div(c.i, step) * step, floor_div(c.j, step) * step,
                   floor_div(c.k, step) * step});
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

KernelMap build_kernel_map(std::span<const VoxelCoord> coords, int in_stride, int kernel_size,
                           int stride) {
  if (kernel_size != 1 && kernel_size != 3)
    throw ShapeError("build_kernel_map: kernel size must be 1 or 3");
  const int r = kernel_size / 2;
  return map_with_offsets(coords, in_stride, kernel_size, stride, cube_offsets(-r, r));
}

KernelMap pool_map(std::span<const VoxelCoord> coords, int in_stride) {
  return map_with_offsets(coords, in_stride, 2, 2, cube_offsets(0, 1));
}

template <class T>
KernelMap build_kernel_map(const SparseTensor<T>& input, int kernel_size, int stride) {
  return build_kernel_map(input.coords, input.tensor_stride, kernel_size, stride);
}

template <class T>
KernelMap pool_map(const SparseTensor<T>& input) {
  return pool_map(input.coords, input.tensor_stride);
}

template KernelMap build_kernel_map(const SparseTensor<float>&, int, int);
template KernelMap build_kernel_map(const SparseTensor<double>&, int, int);
template KernelMap pool_map(const SparseTensor<float>&);
template KernelMap pool_map(const SparseTensor<double>&);

}  // namespace stpc
