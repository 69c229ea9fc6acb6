#pragma once

#include <cstdint>
#include <vector>

#include "stpc/matrix.hpp"
#include "stpc/sparse.hpp"

namespace stpc {

enum class Mode { Train, Eval };

// ---------------------------------------------------------------------------
// Sparse convolution (gather - GEMM - scatter over a kernel map)
// ---------------------------------------------------------------------------

/// weights laid out as [offset][in_channel][out_channel]. No bias: every
/// convolution in the network is followed by batch norm.
template <class T>
struct ConvParams {
  int in_channels = 0;
  int out_channels = 0;
  int kernel_volume = 27;
  std::vector<T> weights;

  ConvParams() = default;
  ConvParams(int cin, int cout, int kvol)
      : in_channels(cin),
        out_channels(cout),
        kernel_volume(kvol),
        weights(static_cast<std::size_t>(cin) * cout * kvol, T(0)) {}

  T* offset_matrix(int o) { return weights.data() + static_cast<std::size_t>(o) * in_channels * out_channels; }
  const T* offset_matrix(int o) const {
    return weights.data() + static_cast<std::size_t>(o) * in_channels * out_channels;
  }
};

template <class T>
struct ConvGrads {
  std::vector<T> d_weights;
  Matrix<T> d_input;
};

template <class T>
SparseTensor<T> sparse_conv_fwd(const SparseTensor<T>& input, const ConvParams<T>& params,
                                const KernelMap& kmap);

template <class T>
ConvGrads<T> sparse_conv_bwd(const SparseTensor<T>& input, const ConvParams<T>& params,
                             const KernelMap& kmap, const Matrix<T>& grad_out);

// ---------------------------------------------------------------------------
// Batch normalization over all active sites of the batch
// ---------------------------------------------------------------------------

template <class T>
struct BNParams {
  std::vector<T> gamma, beta, running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  BNParams() = default;
  explicit BNParams(int channels)
      : gamma(static_cast<std::size_t>(channels), T(1)),
        beta(static_cast<std::size_t>(channels), T(0)),
        running_mean(static_cast<std::size_t>(channels), T(0)),
        running_var(static_cast<std::size_t>(channels), T(1)) {}

  std::size_t channels() const { return gamma.size(); }
};

template <class T>
struct BNCache {
  Mode mode = Mode::Train;
  Matrix<T> x_hat;
  std::vector<T> inv_std;
};

template <class T>
struct BNGrads {
  std::vector<T> d_gamma, d_beta;
  Matrix<T> d_input;
};

/// Train mode normalizes with the batch mean and population variance and
/// updates the running statistics; eval mode uses the running statistics.
template <class T>
SparseTensor<T> batchnorm_fwd(const SparseTensor<T>& input, BNParams<T>& params, Mode mode,
                              BNCache<T>* cache = nullptr);

template <class T>
BNGrads<T> batchnorm_bwd(const BNParams<T>& params, const BNCache<T>& cache,
                         const Matrix<T>& grad_out);

// ---------------------------------------------------------------------------
// Elementwise activations and dropout
// ---------------------------------------------------------------------------

template <class T>
Matrix<T> relu_fwd(const Matrix<T>& x);
template <class T>
Matrix<T> relu_bwd(const Matrix<T>& x, const Matrix<T>& grad_out);

/// Exact GELU: x * Phi(x).
template <class T>
Matrix<T> gelu_fwd(const Matrix<T>& x);
template <class T>
Matrix<T> gelu_bwd(const Matrix<T>& x, const Matrix<T>& grad_out);

/// Identifies one dropout application. The mask is a pure function of it.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
};

/// Inverted dropout: p is the drop probability, survivors scale by 1/(1-p).
template <class T>
struct DropoutResult {
  Matrix<T> out;
  std::vector<std::uint8_t> keep;  // empty in eval mode
  T scale = T(1);
};

template <class T>
DropoutResult<T> dropout_fwd(const Matrix<T>& x, double p, const DropoutKey& key, Mode mode);
template <class T>
Matrix<T> dropout_bwd(const DropoutResult<T>& fwd, const Matrix<T>& grad_out);

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// `argmax` holds, per (output row, channel), the selected input row.
template <class T>
struct PoolResult {
  SparseTensor<T> out;
  std::vector<std::int32_t> argmax;
};

/// Max over mapped input sites, ties broken by the lowest input row.
template <class T>
PoolResult<T> sparse_maxpool_fwd(const SparseTensor<T>& input, const KernelMap& kmap);
template <class T>
Matrix<T> sparse_maxpool_bwd(const PoolResult<T>& fwd, std::size_t in_rows,
                             const Matrix<T>& grad_out);

template <class T>
struct GlobalPoolResult {
  Matrix<T> out;  // batch_size x C
  std::vector<std::int32_t> argmax;
};

/// Per-event channel-wise max. Throws EmptyEvent if any batch index is absent.
template <class T>
GlobalPoolResult<T> global_maxpool_fwd(const SparseTensor<T>& input);
template <class T>
Matrix<T> global_maxpool_bwd(const GlobalPoolResult<T>& fwd, std::size_t in_rows,
                             const Matrix<T>& grad_out);

// ---------------------------------------------------------------------------
// Fully connected head
// ---------------------------------------------------------------------------

template <class T>
struct LinearParams {
  int in_features = 0;
  int out_features = 0;
  std::vector<T> weights;  // in_features x out_features
  std::vector<T> bias;

  LinearParams() = default;
  LinearParams(int d, int k)
      : in_features(d),
        out_features(k),
        weights(static_cast<std::size_t>(d) * k, T(0)),
        bias(static_cast<std::size_t>(k), T(0)) {}
};

template <class T>
struct LinearGrads {
  std::vector<T> d_weights, d_bias;
  Matrix<T> d_input;
};

template <class T>
Matrix<T> linear_fwd(const Matrix<T>& x, const LinearParams<T>& params);
template <class T>
LinearGrads<T> linear_bwd(const Matrix<T>& x, const LinearParams<T>& params,
                          const Matrix<T>& grad_out);

namespace testing {
/// Negative-control hook for the self-test: when enabled, the convolution
/// weight gradient is deliberately perturbed.
void set_backward_fault(bool enabled);
bool backward_fault();
}  // namespace testing

}  // namespace stpc
