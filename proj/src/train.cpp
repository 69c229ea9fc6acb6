#include "stpc/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace stpc {

void OptimConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("optim: lr0 must be positive");
  if (weight_decay < 0) throw ConfigError("optim: weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("optim: betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("optim: adam_eps must be positive");
  if (t_max < 1) throw ConfigError("optim: t_max must be >= 1");
  if (eta_min < 0) throw ConfigError("optim: eta_min must be non-negative");
  if (!(clip_max_norm > 0)) throw ConfigError("optim: clip_max_norm must be positive");
  if (batch_size < 1) throw ConfigError("optim: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("optim: epochs must be >= 0");
  if (!(val_fraction > 0 && val_fraction < 1)) throw ConfigError("optim: val_fraction must lie in (0, 1)");
}

template <class T>
LossResult<T> cross_entropy(const Matrix<T>& logits, std::span<const int> targets) {
  const std::size_t b = logits.rows, k = logits.cols;
  if (targets.size() != b) throw ShapeError("cross_entropy: target count != batch size");
  LossResult<T> r;
  r.grad = Matrix<T>(b, k);
  if (b == 0) return r;
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= k)
      throw LabelError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(k) + ")");
    double mx = static_cast<double>(logits(i, 0));
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(logits(i, j)));
    double z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(logits(i, j)) - mx);
    const double log_z = std::log(z) + mx;
    total += log_z - static_cast<double>(logits(i, static_cast<std::size_t>(t)));
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(logits(i, j)) - log_z);
      r.grad(i, j) = static_cast<T>((p - (j == static_cast<std::size_t>(t) ? 1.0 : 0.0)) /
                                    static_cast<double>(b));
    }
  }
  r.loss = total / static_cast<double>(b);
  return r;
}

template <class T>
void adam_step(std::span<std::vector<T>* const> params,
               std::span<const std::vector<T>* const> grads, AdamState<T>& state, double lr,
               const AdamHyper& h) {
  if (params.size() != grads.size()) throw ShapeError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->size() != grads[i]->size())
      throw ShapeError("adam_step: tensor " + std::to_string(i) + " size mismatch");
    for (const T g : *grads[i])
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericsError("adam_step: non-finite gradient in tensor " + std::to_string(i));
  }
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->size(), T(0));
      state.v.emplace_back(p->size(), T(0));
    }
  }
  ++state.step;
  const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
  const T bc1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(state.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(state.step)));
  const T step = static_cast<T>(lr), eps = static_cast<T>(h.eps), wd = static_cast<T>(h.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    const auto& g = *grads[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = g[j] + wd * p[j];
      m[j] = b1 * m[j] + (T(1) - b1) * gj;
      v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
      const T m_hat = m[j] / bc1;
      const T v_hat = v[j] / bc2;
      p[j] -= step * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

double cosine_lr(double epoch, double lr0, int t_max, double eta_min) {
  const double t = std::min(std::max(epoch, 0.0), static_cast<double>(t_max));
  return eta_min + (lr0 - eta_min) * (1.0 + std::cos(std::numbers::pi * t / t_max)) / 2.0;
}

template <class T>
double clip_grad_norm(std::span<std::vector<T>* const> grads, double max_norm) {
  double sq = 0;
  for (const auto* g : grads)
    for (const T v : *g) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  auto sq_norm = [&] {
    double s = 0;
    for (const auto* g : grads)
      for (const T v : *g) s += static_cast<double>(v) * static_cast<double>(v);
    return s;
  };
  double current = norm;
  // rounding can leave the rescaled norm an ulp above the bound; shrink again until it holds
  for (int pass = 0; current > max_norm && pass < 8; ++pass) {
    const double scale = max_norm / current * (pass == 0 ? 1.0 : 1.0 - std::ldexp(1.0, -20 + pass));
    for (auto* g : grads)
      for (T& v : *g) v = static_cast<T>(static_cast<double>(v) * scale);
    current = std::sqrt(sq_norm());
  }
  return norm;
}

namespace {

std::vector<double> inverse_frequency_weights(std::span<const int> labels, int num_classes) {
  if (labels.empty()) throw ConfigError("weighted sampler: no labels");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int l : labels) {
    if (l < 0 || l >= num_classes) throw LabelError("weighted sampler: label out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  // absent classes simply receive no draws
  std::vector<double> w(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    w[i] = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(labels[i])]);
  return w;
}

}  // namespace

WeightedSampler::WeightedSampler(std::span<const int> labels, int num_classes, std::uint64_t seed)
    : rng_(seed) {
  const auto w = inverse_frequency_weights(labels, num_classes);
  dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
}

std::size_t WeightedSampler::next() { return dist_(rng_); }

MetricsReport compute_metrics(std::span<const int> preds, std::span<const int> targets,
                              int num_classes) {
  if (preds.size() != targets.size()) throw ShapeError("compute_metrics: length mismatch");
  const auto k = static_cast<std::size_t>(num_classes);
  MetricsReport r;
  r.num_classes = num_classes;
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (targets[i] < 0 || targets[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
      throw LabelError("compute_metrics: label out of range");
    ++r.confusion[static_cast<std::size_t>(targets[i])][static_cast<std::size_t>(preds[i])];
    correct += preds[i] == targets[i];
  }
  const double n = static_cast<double>(preds.size());
  r.accuracy = preds.empty() ? 0.0 : static_cast<double>(correct) / n;
  r.precision.assign(k, 0);
  r.recall.assign(k, 0);
  r.f1.assign(k, 0);
  r.support.assign(k, 0);
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = r.confusion[c][c], pred_c = 0, true_c = 0;
    for (std::size_t o = 0; o < k; ++o) {
      pred_c += r.confusion[o][c];
      true_c += r.confusion[c][o];
    }
    r.support[c] = true_c;
    const double p = pred_c ? static_cast<double>(tp) / static_cast<double>(pred_c) : 0.0;
    const double rc = true_c ? static_cast<double>(tp) / static_cast<double>(true_c) : 0.0;
    r.precision[c] = p;
    r.recall[c] = rc;
    r.f1[c] = p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
  }
  double macro = 0, weighted = 0;
  for (std::size_t c = 0; c < k; ++c) {
    macro += r.f1[c];
    weighted += r.f1[c] * static_cast<double>(r.support[c]);
  }
  r.macro_f1 = k ? macro / static_cast<double>(k) : 0.0;
  r.weighted_f1 = preds.empty() ? 0.0 : weighted / n;
  return r;
}

Split stratified_split(std::span<const int> labels, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction >= 0 && val_fraction <= 1)) throw ConfigError("split fraction must lie in [0, 1]");
  int max_label = -1;
  for (int l : labels) {
    if (l < 0) throw LabelError("stratified_split: negative label");
    max_label = std::max(max_label, l);
  }
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(max_label + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[static_cast<std::size_t>(labels[i])].push_back(i);
  std::mt19937_64 rng(seed);
  Split s;
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(idx.size())));
    s.val.insert(s.val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.insert(s.train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

template <class T>
Dataset<T> Dataset<T>::subset(std::span<const std::size_t> idx) const {
  Dataset<T> d;
  d.events.reserve(idx.size());
  d.labels.reserve(idx.size());
  for (auto i : idx) {
    d.events.push_back(events.at(i));
    d.labels.push_back(labels.at(i));
  }
  return d;
}

template <class T>
EvalResult<T> evaluate(const ModelState<T>& model, const Dataset<T>& data, std::size_t batch_size) {
  EvalResult<T> r;
  if (data.size() == 0) return r;
  double total = 0;
  const std::span<const EventSites<T>> all(data.events);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    const auto b = batch(all.subspan(start, n));
    const auto tr = forward_eval(model, b);
    const std::span<const int> tgt(data.labels.data() + start, n);
    total += cross_entropy(tr.logits, tgt).loss * static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = tr.logits.row(i);
      r.preds.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  r.loss = total / static_cast<double>(data.size());
  return r;
}

template <class T>
TrainResult<T> train_loop(ModelState<T> model, const Dataset<T>& train, const Dataset<T>& val,
                          const OptimConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  const int k = model.config.head_classes;
  TrainResult<T> result;
  result.best = model;
  if (cfg.epochs == 0) return result;
  if (train.size() == 0) throw ConfigError("train_loop: empty training set");
  if (val.size() == 0) throw ConfigError("train_loop: empty validation set");

  WeightedSampler sampler(train.labels, k, cfg.seed);
  AdamState<T> adam;
  const AdamHyper hyper{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps = (train.size() + bs - 1) / bs;
  std::uint64_t global_step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.lr0, cfg.t_max, cfg.eta_min);
    double loss_sum = 0;
    for (std::size_t s = 0; s < steps; ++s, ++global_step) {
      const std::size_t n = std::min(bs, train.size() - s * bs);
      std::vector<EventSites<T>> events;
      std::vector<int> labels;
      events.reserve(n);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = sampler.next();
        events.push_back(train.events[idx]);
        labels.push_back(train.labels[idx]);
      }
      const auto b = batch(std::span<const EventSites<T>>(events));
      const auto tr = forward(model, b, ForwardOptions{Mode::Train, cfg.seed, global_step});
      const auto loss = cross_entropy(tr.logits, labels);
      if (!std::isfinite(loss.loss))
        throw NumericsError("epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
                            ": non-finite loss");
      auto grads = backward(model, tr, loss.grad);

      auto p = parameters(model);
      auto g = parameters(grads.params);
      std::vector<std::vector<T>*> pp, gp;
      for (std::size_t i = 0; i < p.size(); ++i) {
        pp.push_back(p[i].values);
        gp.push_back(g[i].values);
        for (const T v : *g[i].values)
          if (!std::isfinite(static_cast<double>(v)))
            throw NumericsError("epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
                                ": non-finite gradient in " + g[i].name);
      }
      clip_grad_norm<T>(gp, cfg.clip_max_norm);
      std::vector<const std::vector<T>*> gc(gp.begin(), gp.end());
      adam_step<T>(pp, gc, adam, lr, hyper);
      loss_sum += loss.loss;
    }

    const auto ev = evaluate(model, val, bs);
    const auto metrics = compute_metrics(ev.preds, val.labels, k);
    EpochRecord rec{epoch,          lr,           loss_sum / static_cast<double>(steps), ev.loss,
                    metrics.accuracy, metrics.macro_f1, metrics.weighted_f1};
    result.history.epochs.push_back(rec);
    if (result.history.best_epoch < 0 || ev.loss < result.history.best_val_loss) {
      result.history.best_epoch = epoch;
      result.history.best_val_loss = ev.loss;
      result.best = model;
      result.best_metrics = metrics;
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

std::string history_csv(const TrainHistory& history) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,lr,train_loss,val_loss,accuracy,macro_f1\n";
  for (const auto& e : history.epochs)
    os << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.val_loss << ',' << e.accuracy
       << ',' << e.macro_f1 << '\n';
  return os.str();
}

#define STPC_INSTANTIATE_TRAIN(T)                                                              \
  template LossResult<T> cross_entropy(const Matrix<T>&, std::span<const int>);                \
  template void adam_step(std::span<std::vector<T>* const>,                                    \
                          std::span<const std::vector<T>* const>, AdamState<T>&, double,       \
                          const AdamHyper&);                                                   \
  template double clip_grad_norm(std::span<std::vector<T>* const>, double);                    \
  template struct Dataset<T>;                                                                  \
  template EvalResult<T> evaluate(const ModelState<T>&, const Dataset<T>&, std::size_t);       \
  template TrainResult<T> train_loop(ModelState<T>, const Dataset<T>&, const Dataset<T>&,      \
                                     const OptimConfig&, const EpochCallback&);

STPC_INSTANTIATE_TRAIN(float)
STPC_INSTANTIATE_TRAIN(double)

#undef STPC_INSTANTIATE_TRAIN

}  // namespace stpc
