#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stpc/layers.hpp"
#include "stpc/sparse.hpp"

namespace stpc {

/// How hits become per-site input features (q, x, y, z).
struct InputConfig {
  double voxel_size = 0.05;
  double charge_scale = 10.0;  // features carry q / charge_scale
  double coord_scale = 1.0;   // and (centroid - origin) / coord_scale
  bool center_coords = true;  // origin = mean voxel centroid of the event (else 0)
  // Whole-voxel shift placing the charge-weighted mean site at (anchor, anchor, anchor).
  // 32 keeps compact events inside the span read by the stride-3 conv at tensor stride 64.
  bool anchor_sites = true;
  int anchor = 32;

  bool operator==(const InputConfig&) const = default;
};

struct ArchConfig {
  int in_channels = 4;
  std::array<int, 4> stage_widths{64, 128, 256, 512};
  int blocks_per_stage = 1;
  int head_classes = 2;
  double dropout_p = 0.8;
  std::uint64_t seed = 0;
  InputConfig input;

  /// Desk-scale widths (16, 32, 64, 128).
  static ArchConfig small();
  /// Throws ConfigError on invalid values.
  void validate() const;
  int embedding_dim() const { return stage_widths[3]; }

  bool operator==(const ArchConfig&) const = default;
};

template <class T>
struct BasicBlock {
  int stride = 2;
  ConvParams<T> conv1;
  BNParams<T> bn1;
  ConvParams<T> conv2;
  BNParams<T> bn2;
  std::optional<ConvParams<T>> ds_conv;  // 1^3 projection shortcut
  std::optional<BNParams<T>> ds_bn;
};

/// Learnable parameters and running statistics of the sparse ResNet14.
/// The same structure holds gradients (running statistics unused there).
template <class T>
struct ModelState {
  ArchConfig config;
  ConvParams<T> stem_conv;
  BNParams<T> stem_bn;
  std::vector<BasicBlock<T>> blocks;  // stage-major
  ConvParams<T> pre_conv;
  BNParams<T> pre_bn;
  LinearParams<T> head;
};

enum class InitMode { Random, Zero };

/// Builds the architecture. Random mode draws Kaiming fan-in normal weights
/// from `config.seed`; Zero mode yields a zero-filled gradient container.
template <class T>
ModelState<T> init_model(const ArchConfig& config, InitMode mode = InitMode::Random);

template <class T>
struct NamedTensor {
  std::string name;
  std::vector<T>* values = nullptr;
  std::vector<std::uint32_t> shape;
};

/// Learnable tensors in a fixed canonical order.
template <class T>
std::vector<NamedTensor<T>> parameters(ModelState<T>& model);
/// Batch-norm running statistics in a fixed canonical order.
template <class T>
std::vector<NamedTensor<T>> buffers(ModelState<T>& model);

/// Number of 3^3 sparse convolutions (downsample projections excluded).
template <class T>
int count_3x3_convs(const ModelState<T>& model);

struct ForwardOptions {
  Mode mode = Mode::Eval;
  std::uint64_t seed = 0;  // dropout stream
  std::uint64_t step = 0;
};

/// Everything the backward pass needs from a forward pass.
template <class T>
struct ForwardTrace {
  struct Block {
    SparseTensor<T> input;
    KernelMap map1, map2, ds_map;
    BNCache<T> bn1, bn2, ds_bn;
    Matrix<T> bn1_out;
    SparseTensor<T> act1;  // relu(bn1(conv1(input))), input of conv2
    Matrix<T> sum;         // bn2 output + shortcut, before relu
  };

  ForwardOptions options;
  SparseTensor<T> input;
  KernelMap stem_map;
  BNCache<T> stem_bn;
  Matrix<T> stem_bn_out;
  SparseTensor<T> stem_act;
  KernelMap stem_pool_map;
  PoolResult<T> stem_pool;
  std::vector<Block> blocks;
  SparseTensor<T> pre_input;
  DropoutResult<T> dropout;
  SparseTensor<T> dropped;
  KernelMap pre_map;
  BNCache<T> pre_bn;
  Matrix<T> pre_bn_out;
  SparseTensor<T> pre_act;
  GlobalPoolResult<T> global_pool;
  Matrix<T> embedding;  // batch x D, global max pool output
  Matrix<T> logits;     // batch x K
};

/// Runs stem -> residual stages -> pre-pooling block -> global max pool ->
/// linear head. Train mode updates batch-norm running statistics in `model`.
template <class T>
ForwardTrace<T> forward(ModelState<T>& model, const SparseTensor<T>& batch,
                        const ForwardOptions& options);

/// Eval-mode forward that leaves the model untouched.
template <class T>
ForwardTrace<T> forward_eval(const ModelState<T>& model, const SparseTensor<T>& batch);

template <class T>
struct ModelGrads {
  ModelState<T> params;
  Matrix<T> d_input;
};

/// Exact adjoint of `forward` given dL/dlogits.
template <class T>
ModelGrads<T> backward(const ModelState<T>& model, const ForwardTrace<T>& trace,
                       const Matrix<T>& grad_logits);

/// Eval-mode penultimate-layer embeddings (global max pool output), one row
/// per event in input order. Batching does not change the result.
template <class T>
Matrix<double> embed(const ModelState<T>& model, std::span<const EventSites<T>> events,
                     std::size_t batch_size = 64);

// ---------------------------------------------------------------------------
// Checkpoints: "STPC" magic, u16 version, length-prefixed JSON metadata,
// then shape-headed little-endian tensors.
// ---------------------------------------------------------------------------

constexpr std::uint16_t kCheckpointVersion = 1;

enum class Precision { Float32, Float64 };

template <class T>
constexpr Precision precision_of() {
  return sizeof(T) == 4 ? Precision::Float32 : Precision::Float64;
}

struct CheckpointInfo {
  std::uint16_t version = 0;
  Precision precision = Precision::Float32;
  ArchConfig config;
  std::string tag;  // e.g. "rand" / "train"
};

template <class T>
void save_checkpoint(const ModelState<T>& model, const std::filesystem::path& path,
                     const std::string& tag = "");

template <class T>
ModelState<T> load_checkpoint(const std::filesystem::path& path);

/// Reads only the header; throws CheckpointError on malformed files.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

std::string arch_to_json(const ArchConfig& config);
ArchConfig arch_from_json(const std::string& text);

}  // namespace stpc
