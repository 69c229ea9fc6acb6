#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stpc/matrix.hpp"
#include "stpc/model.hpp"

namespace stpc {

struct OptimConfig {
  double lr0 = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int t_max = 13;
  double eta_min = 0.0;
  double clip_max_norm = 1.0;
  int batch_size = 64;
  int epochs = 15;
  std::uint64_t seed = 0;
  double val_fraction = 0.2;

  void validate() const;
};

// ---------------------------------------------------------------------------

template <class T>
struct LossResult {
  double loss = 0;
  Matrix<T> grad;  // dL/dlogits
};

/// Mean softmax cross-entropy; grad = (softmax - onehot) / B. Throws LabelError.
template <class T>
LossResult<T> cross_entropy(const Matrix<T>& logits, std::span<const int> targets);

template <class T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::int64_t step = 0;
};

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // coupled L2: added to the gradient
};

/// One bias-corrected Adam update. Throws NumericsError (leaving params and
/// state untouched) when any gradient is non-finite.
template <class T>
void adam_step(std::span<std::vector<T>* const> params,
               std::span<const std::vector<T>* const> grads, AdamState<T>& state, double lr,
               const AdamHyper& hyper);

/// eta_min + (lr0 - eta_min) * (1 + cos(pi * min(t, t_max) / t_max)) / 2
double cosine_lr(double epoch, double lr0, int t_max, double eta_min = 0.0);

/// Scales all tensors by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the pre-clip norm.
template <class T>
double clip_grad_norm(std::span<std::vector<T>* const> grads, double max_norm);

/// Sampling with replacement, P(i) proportional to 1 / count(class(i)).
class WeightedSampler {
 public:
  WeightedSampler(std::span<const int> labels, int num_classes, std::uint64_t seed);
  std::size_t next();

 private:
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> dist_;
};

struct MetricsReport {
  int num_classes = 0;
  double accuracy = 0;
  std::vector<double> precision, recall, f1;
  std::vector<std::size_t> support;
  double macro_f1 = 0;
  double weighted_f1 = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};

MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> targets,
                              int num_classes);

/// Per-class shuffle with `seed`, then round(fraction * count) of every
/// class goes to the second (validation) split. Index order is ascending.
struct Split {
  std::vector<std::size_t> train, val;
};
Split stratified_split(std::span<const int> labels, double val_fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------

template <class T>
struct Dataset {
  std::vector<EventSites<T>> events;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  Dataset subset(std::span<const std::size_t> idx) const;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_loss = 0;
  double accuracy = 0;
  double macro_f1 = 0;
  double weighted_f1 = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = 0;
};

template <class T>
struct TrainResult {
  ModelState<T> best;
  TrainHistory history;
  MetricsReport best_metrics;
};

template <class T>
struct EvalResult {
  double loss = 0;
  std::vector<int> preds;
};

/// Eval-mode loss and argmax predictions, batched in dataset order.
template <class T>
EvalResult<T> evaluate(const ModelState<T>& model, const Dataset<T>& data, std::size_t batch_size);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Weighted-sampler epochs with cosine lr, clipping and Adam; keeps the
/// state with the lowest validation loss. Throws NumericsError with
/// epoch/step context.
template <class T>
TrainResult<T> train_loop(ModelState<T> model, const Dataset<T>& train, const Dataset<T>& val,
                          const OptimConfig& config, const EpochCallback& on_epoch = {});

/// History as CSV: epoch,lr,train_loss,val_loss,accuracy,macro_f1
std::string history_csv(const TrainHistory& history);

}  // namespace stpc
