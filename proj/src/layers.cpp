#include "stpc/layers.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <string>

namespace stpc {

namespace {

std::atomic<bool> g_backward_fault{false};

constexpr std::size_t kParallelRows = 256;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <class T>
void check_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols)
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows) + "x" +
                     std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" +
                     std::to_string(b.cols) + ")");
}

}  // namespace

namespace testing {
void set_backward_fault(bool enabled) { g_backward_fault = enabled; }
bool backward_fault() { return g_backward_fault; }
}  // namespace testing

// ---------------------------------------------------------------------------

template <class T>
SparseTensor<T> sparse_conv_fwd(const SparseTensor<T>& input, const ConvParams<T>& params,
                                const KernelMap& kmap) {
  const std::size_t cin = static_cast<std::size_t>(params.in_channels);
  const std::size_t cout = static_cast<std::size_t>(params.out_channels);
  if (input.channels() != cin)
    throw ShapeError("sparse_conv_fwd: input has " + std::to_string(input.channels()) +
                     " channels, weights expect " + std::to_string(cin));
  if (kmap.volume() != static_cast<std::size_t>(params.kernel_volume))
    throw ShapeError("sparse_conv_fwd: kernel volume mismatch");
  if (kmap.in_rows != input.size() || kmap.in_stride != input.tensor_stride)
    throw ShapeError("sparse_conv_fwd: kernel map was built for a different tensor");

  SparseTensor<T> out;
  out.coords = kmap.out_coords;
  out.tensor_stride = kmap.out_stride;
  out.batch_size = input.batch_size;
  const std::size_t n_out = out.coords.size();
  out.features = Matrix<T>(n_out, cout);

  const T* x = input.features.data.data();
  T* y = out.features.data.data();
#pragma omp parallel for schedule(static) if (n_out > kParallelRows)
  for (std::size_t r = 0; r < n_out; ++r) {
    T* acc = y + r * cout;
    for (auto e = kmap.by_out_ptr[r]; e < kmap.by_out_ptr[r + 1]; ++e) {
      const auto& ent = kmap.by_out[static_cast<std::size_t>(e)];
      const T* xr = x + static_cast<std::size_t>(ent.row) * cin;
      const T* w = params.offset_matrix(ent.offset);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T xv = xr[ci];
        const T* wr = w + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * wr[co];
      }
    }
  }
  return out;
}

template <class T>
ConvGrads<T> sparse_conv_bwd(const SparseTensor<T>& input, const ConvParams<T>& params,
                             const KernelMap& kmap, const Matrix<T>& grad_out) {
  const std::size_t cin = static_cast<std::size_t>(params.in_channels);
  const std::size_t cout = static_cast<std::size_t>(params.out_channels);
  if (grad_out.rows != kmap.out_coords.size() || grad_out.cols != cout)
    throw ShapeError("sparse_conv_bwd: grad_out shape does not match forward output");
  if (input.channels() != cin || input.size() != kmap.in_rows)
    throw ShapeError("sparse_conv_bwd: input does not match kernel map / weights");

  ConvGrads<T> g;
  g.d_weights.assign(params.weights.size(), T(0));
  g.d_input = Matrix<T>(input.size(), cin);

  const T* x = input.features.data.data();
  const T* go = grad_out.data.data();
  T* dx = g.d_input.data.data();
  const std::size_t n_in = input.size();
#pragma omp parallel for schedule(static) if (n_in > kParallelRows)
  for (std::size_t r = 0; r < n_in; ++r) {
    T* acc = dx + r * cin;
    for (auto e = kmap.by_in_ptr[r]; e < kmap.by_in_ptr[r + 1]; ++e) {
      const auto& ent = kmap.by_in[static_cast<std::size_t>(e)];
      const T* gr = go + static_cast<std::size_t>(ent.row) * cout;
      const T* w = params.offset_matrix(ent.offset);
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* wr = w + ci * cout;
        T s = T(0);
        for (std::size_t co = 0; co < cout; ++co) s += gr[co] * wr[co];
        acc[ci] += s;
      }
    }
  }

  const int vol = params.kernel_volume;
#pragma omp parallel for schedule(static)
  for (int o = 0; o < vol; ++o) {
    T* dw = g.d_weights.data() + static_cast<std::size_t>(o) * cin * cout;
    for (const auto& pr : kmap.pairs[static_cast<std::size_t>(o)]) {
      const T* xr = x + static_cast<std::size_t>(pr.in) * cin;
      const T* gr = go + static_cast<std::size_t>(pr.out) * cout;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T xv = xr[ci];
        T* dwr = dw + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) dwr[co] += xv * gr[co];
      }
    }
  }
  if (testing::backward_fault())
    for (auto& v : g.d_weights) v *= T(1.01);
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
SparseTensor<T> batchnorm_fwd(const SparseTensor<T>& input, BNParams<T>& params, Mode mode,
                              BNCache<T>* cache) {
  const std::size_t c = params.channels();
  if (input.channels() != c)
    throw ShapeError("batchnorm_fwd: input has " + std::to_string(input.channels()) +
                     " channels, parameters have " + std::to_string(c));
  const std::size_t n = input.size();
  SparseTensor<T> out;
  out.coords = input.coords;
  out.tensor_stride = input.tensor_stride;
  out.batch_size = input.batch_size;
  out.features = Matrix<T>(n, c);

  std::vector<T> mean(c), inv_std(c);
  if (mode == Mode::Train) {
    if (n == 0) throw EmptyEvent("batchnorm_fwd: empty tensor in train mode");
#pragma omp parallel for schedule(static) if (n * c > 4096)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T s = T(0);
      for (std::size_t r = 0; r < n; ++r) s += input.features(r, ch);
      const T m = s / static_cast<T>(n);
      T v = T(0);
      for (std::size_t r = 0; r < n; ++r) {
        const T d = input.features(r, ch) - m;
        v += d * d;
      }
      v /= static_cast<T>(n);
      mean[ch] = m;
      inv_std[ch] = T(1) / std::sqrt(v + params.eps);
      const T unbiased = n > 1 ? v * static_cast<T>(n) / static_cast<T>(n - 1) : v;
      params.running_mean[ch] = (T(1) - params.momentum) * params.running_mean[ch] + params.momentum * m;
      params.running_var[ch] = (T(1) - params.momentum) * params.running_var[ch] + params.momentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = params.running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(params.running_var[ch] + params.eps);
    }
  }

  Matrix<T> x_hat(n, c);
#pragma omp parallel for schedule(static) if (n > kParallelRows)
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T xh = (input.features(r, ch) - mean[ch]) * inv_std[ch];
      x_hat(r, ch) = xh;
      out.features(r, ch) = params.gamma[ch] * xh + params.beta[ch];
    }
  if (cache) {
    cache->mode = mode;
    cache->x_hat = std::move(x_hat);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

template <class T>
BNGrads<T> batchnorm_bwd(const BNParams<T>& params, const BNCache<T>& cache,
                         const Matrix<T>& grad_out) {
  check_same_shape(cache.x_hat, grad_out, "batchnorm_bwd");
  const std::size_t n = grad_out.rows, c = grad_out.cols;
  BNGrads<T> g;
  g.d_gamma.assign(c, T(0));
  g.d_beta.assign(c, T(0));
  g.d_input = Matrix<T>(n, c);
#pragma omp parallel for schedule(static) if (n * c > 4096)
  for (std::size_t ch = 0; ch < c; ++ch) {
    T sg = T(0), sgx = T(0);
    for (std::size_t r = 0; r < n; ++r) {
      sg += grad_out(r, ch);
      sgx += grad_out(r, ch) * cache.x_hat(r, ch);
    }
    g.d_beta[ch] = sg;
    g.d_gamma[ch] = sgx;
    const T k = params.gamma[ch] * cache.inv_std[ch];
    if (cache.mode == Mode::Train) {
      const T inv_n = T(1) / static_cast<T>(n);
      for (std::size_t r = 0; r < n; ++r)
        g.d_input(r, ch) = k * (grad_out(r, ch) - inv_n * sg - cache.x_hat(r, ch) * inv_n * sgx);
    } else {
      for (std::size_t r = 0; r < n; ++r) g.d_input(r, ch) = k * grad_out(r, ch);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
Matrix<T> relu_fwd(const Matrix<T>& x) {
  Matrix<T> y = x;
  for (auto& v : y.data) v = v > T(0) ? v : T(0);
  return y;
}

template <class T>
Matrix<T> relu_bwd(const Matrix<T>& x, const Matrix<T>& grad_out) {
  check_same_shape(x, grad_out, "relu_bwd");
  Matrix<T> g(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) g.data[i] = x.data[i] > T(0) ? grad_out.data[i] : T(0);
  return g;
}

template <class T>
Matrix<T> gelu_fwd(const Matrix<T>& x) {
  Matrix<T> y(x.rows, x.cols);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const T v = x.data[i];
    y.data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  return y;
}

template <class T>
Matrix<T> gelu_bwd(const Matrix<T>& x, const Matrix<T>& grad_out) {
  check_same_shape(x, grad_out, "gelu_bwd");
  Matrix<T> g(x.rows, x.cols);
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  const T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const T v = x.data[i];
    const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
    g.data[i] = grad_out.data[i] * (cdf + v * pdf);
  }
  return g;
}

template <class T>
DropoutResult<T> dropout_fwd(const Matrix<T>& x, double p, const DropoutKey& key, Mode mode) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must lie in [0, 1)");
  DropoutResult<T> r;
  if (mode == Mode::Eval || p == 0.0) {
    r.out = x;
    return r;
  }
  r.scale = static_cast<T>(1.0 / (1.0 - p));
  r.out = Matrix<T>(x.rows, x.cols);
  r.keep.resize(x.data.size());
  const std::uint64_t base = splitmix(splitmix(splitmix(key.seed) ^ key.layer) ^ key.step);
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double u = static_cast<double>(splitmix(base ^ splitmix(i)) >> 11) * 0x1.0p-53;
    const bool keep = u >= p;
    r.keep[i] = keep ? 1 : 0;
    r.out.data[i] = keep ? x.data[i] * r.scale : T(0);
  }
  return r;
}

template <class T>
Matrix<T> dropout_bwd(const DropoutResult<T>& fwd, const Matrix<T>& grad_out) {
  check_same_shape(fwd.out, grad_out, "dropout_bwd");
  if (fwd.keep.empty()) return grad_out;
  Matrix<T> g(grad_out.rows, grad_out.cols);
  for (std::size_t i = 0; i < g.data.size(); ++i)
    g.data[i] = fwd.keep[i] ? grad_out.data[i] * fwd.scale : T(0);
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
PoolResult<T> sparse_maxpool_fwd(const SparseTensor<T>& input, const KernelMap& kmap) {
  if (kmap.in_rows != input.size()) throw ShapeError("sparse_maxpool_fwd: kernel map mismatch");
  const std::size_t c = input.channels();
  PoolResult<T> r;
  r.out.coords = kmap.out_coords;
  r.out.tensor_stride = kmap.out_stride;
  r.out.batch_size = input.batch_size;
  const std::size_t n_out = kmap.out_coords.size();
  r.out.features = Matrix<T>(n_out, c);
  r.argmax.assign(n_out * c, -1);
  for (std::size_t o = 0; o < n_out; ++o) {
    for (auto e = kmap.by_out_ptr[o]; e < kmap.by_out_ptr[o + 1]; ++e) {
      const std::int32_t in = kmap.by_out[static_cast<std::size_t>(e)].row;
      for (std::size_t ch = 0; ch < c; ++ch) {
        auto& best = r.argmax[o * c + ch];
        const T v = input.features(static_cast<std::size_t>(in), ch);
        if (best < 0 || v > r.out.features(o, ch) || (v == r.out.features(o, ch) && in < best)) {
          best = in;
          r.out.features(o, ch) = v;
        }
      }
    }
    for (std::size_t ch = 0; ch < c; ++ch)
      if (r.argmax[o * c + ch] < 0) throw EmptyEvent("sparse_maxpool_fwd: output site without inputs");
  }
  return r;
}

template <class T>
Matrix<T> sparse_maxpool_bwd(const PoolResult<T>& fwd, std::size_t in_rows,
                             const Matrix<T>& grad_out) {
  check_same_shape(fwd.out.features, grad_out, "sparse_maxpool_bwd");
  const std::size_t c = grad_out.cols;
  Matrix<T> g(in_rows, c);
  for (std::size_t o = 0; o < grad_out.rows; ++o)
    for (std::size_t ch = 0; ch < c; ++ch)
      g(static_cast<std::size_t>(fwd.argmax[o * c + ch]), ch) += grad_out(o, ch);
  return g;
}

template <class T>
GlobalPoolResult<T> global_maxpool_fwd(const SparseTensor<T>& input) {
  const std::size_t b = static_cast<std::size_t>(input.batch_size);
  const std::size_t c = input.channels();
  GlobalPoolResult<T> r;
  r.out = Matrix<T>(b, c);
  r.argmax.assign(b * c, -1);
  for (std::size_t row = 0; row < input.size(); ++row) {
    const auto ev = static_cast<std::size_t>(input.coords[row].b);
    if (ev >= b) throw ShapeError("global_maxpool_fwd: batch index out of range");
    for (std::size_t ch = 0; ch < c; ++ch) {
      auto& best = r.argmax[ev * c + ch];
      const T v = input.features(row, ch);
      if (best < 0 || v > r.out(ev, ch)) {
        best = static_cast<std::int32_t>(row);
        r.out(ev, ch) = v;
      }
    }
  }
  for (std::size_t ev = 0; ev < b; ++ev)
    if (c > 0 && r.argmax[ev * c] < 0)
      throw EmptyEvent("global_maxpool_fwd: event " + std::to_string(ev) + " has no sites");
  return r;
}

template <class T>
Matrix<T> global_maxpool_bwd(const GlobalPoolResult<T>& fwd, std::size_t in_rows,
                             const Matrix<T>& grad_out) {
  check_same_shape(fwd.out, grad_out, "global_maxpool_bwd");
  const std::size_t c = grad_out.cols;
  Matrix<T> g(in_rows, c);
  for (std::size_t ev = 0; ev < grad_out.rows; ++ev)
    for (std::size_t ch = 0; ch < c; ++ch)
      g(static_cast<std::size_t>(fwd.argmax[ev * c + ch]), ch) += grad_out(ev, ch);
  return g;
}

// ---------------------------------------------------------------------------

template <class T>
Matrix<T> linear_fwd(const Matrix<T>& x, const LinearParams<T>& params) {
  const std::size_t d = static_cast<std::size_t>(params.in_features);
  const std::size_t k = static_cast<std::size_t>(params.out_features);
  if (x.cols != d)
    throw ShapeError("linear_fwd: input width " + std::to_string(x.cols) + " != " + std::to_string(d));
  Matrix<T> y(x.rows, k);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) y(r, j) = params.bias[j];
    for (std::size_t i = 0; i < d; ++i) {
      const T xv = x(r, i);
      for (std::size_t j = 0; j < k; ++j) y(r, j) += xv * params.weights[i * k + j];
    }
  }
  return y;
}

template <class T>
LinearGrads<T> linear_bwd(const Matrix<T>& x, const LinearParams<T>& params,
                          const Matrix<T>& grad_out) {
  const std::size_t d = static_cast<std::size_t>(params.in_features);
  const std::size_t k = static_cast<std::size_t>(params.out_features);
  if (x.cols != d || grad_out.cols != k || grad_out.rows != x.rows)
    throw ShapeError("linear_bwd: shape mismatch");
  LinearGrads<T> g;
  g.d_weights.assign(d * k, T(0));
  g.d_bias.assign(k, T(0));
  g.d_input = Matrix<T>(x.rows, d);
  for (std::size_t r = 0; r < x.rows; ++r) {
    for (std::size_t j = 0; j < k; ++j) g.d_bias[j] += grad_out(r, j);
    for (std::size_t i = 0; i < d; ++i) {
      T s = T(0);
      for (std::size_t j = 0; j < k; ++j) {
        g.d_weights[i * k + j] += x(r, i) * grad_out(r, j);
        s += grad_out(r, j) * params.weights[i * k + j];
      }
      g.d_input(r, i) = s;
    }
  }
  return g;
}

#define STPC_INSTANTIATE_LAYERS(T)                                                              \
  template SparseTensor<T> sparse_conv_fwd(const SparseTensor<T>&, const ConvParams<T>&,        \
                                           const KernelMap&);                                   \
  template ConvGrads<T> sparse_conv_bwd(const SparseTensor<T>&, const ConvParams<T>&,           \
                                        const KernelMap&, const Matrix<T>&);                    \
  template SparseTensor<T> batchnorm_fwd(const SparseTensor<T>&, BNParams<T>&, Mode,            \
                                         BNCache<T>*);                                          \
  template BNGrads<T> batchnorm_bwd(const BNParams<T>&, const BNCache<T>&, const Matrix<T>&);   \
  template Matrix<T> relu_fwd(const Matrix<T>&);                                                \
  template Matrix<T> relu_bwd(const Matrix<T>&, const Matrix<T>&);                              \
  template Matrix<T> gelu_fwd(const Matrix<T>&);                                                \
  template Matrix<T> gelu_bwd(const Matrix<T>&, const Matrix<T>&);                              \
  template DropoutResult<T> dropout_fwd(const Matrix<T>&, double, const DropoutKey&, Mode);     \
  template Matrix<T> dropout_bwd(const DropoutResult<T>&, const Matrix<T>&);                    \
  template PoolResult<T> sparse_maxpool_fwd(const SparseTensor<T>&, const KernelMap&);          \
  template Matrix<T> sparse_maxpool_bwd(const PoolResult<T>&, std::size_t, const Matrix<T>&);   \
  template GlobalPoolResult<T> global_maxpool_fwd(const SparseTensor<T>&);                      \
  template Matrix<T> global_maxpool_bwd(const GlobalPoolResult<T>&, std::size_t,                \
                                        const Matrix<T>&);                                      \
  template Matrix<T> linear_fwd(const Matrix<T>&, const LinearParams<T>&);                      \
  template LinearGrads<T> linear_bwd(const Matrix<T>&, const LinearParams<T>&, const Matrix<T>&);

STPC_INSTANTIATE_LAYERS(float)
STPC_INSTANTIATE_LAYERS(double)

#undef STPC_INSTANTIATE_LAYERS

}  // namespace stpc
