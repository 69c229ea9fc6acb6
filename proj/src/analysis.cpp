#define EIGEN_DONT_PARALLELIZE
#include "stpc/analysis.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "stpc/errors.hpp"

namespace stpc {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> as_eigen(const Matrix<double>& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

Eigen::Map<RowMat> as_eigen(Matrix<double>& m) {
  return {m.data.data(), static_cast<Eigen::Index>(m.rows), static_cast<Eigen::Index>(m.cols)};
}

template <class E>
[[noreturn]] void rethrow_with(const E& e, const std::string& ctx) {
  throw E(ctx + ": " + e.what());
}

}  // namespace

void EmbeddingSet::validate() const {
  if (X.rows != labels.size()) throw ShapeError("embedding rows and labels differ in length");
  if (X.data.size() != X.rows * X.cols) throw ShapeError("embedding matrix storage mismatch");
  for (double v : X.data)
    if (!std::isfinite(v)) throw NumericsError("embedding set '" + tag + "/" + task + "' has non-finite entries");
  if (num_classes < 1) throw LabelError("embedding set needs at least one class");
  for (int l : labels)
    if (l < 0 || l >= num_classes) throw LabelError("label " + std::to_string(l) + " out of range");
  if (labels.size() < static_cast<std::size_t>(num_classes))
    throw ShapeError("fewer embeddings than classes");
}

EmbeddingSet EmbeddingSet::subset(std::span<const std::size_t> idx) const {
  EmbeddingSet s;
  s.X = Matrix<double>(idx.size(), X.cols);
  s.labels.reserve(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(X.data.begin() + static_cast<std::ptrdiff_t>(idx[r] * X.cols), X.cols,
                s.X.data.begin() + static_cast<std::ptrdiff_t>(r * X.cols));
    s.labels.push_back(labels.at(idx[r]));
  }
  s.num_classes = num_classes;
  s.task = task;
  s.tag = tag;
  return s;
}

void ProbeConfig::validate() const {
  if (!(C > 0)) throw ConfigError("probe C must be positive");
  if (!(tolerance > 0)) throw ConfigError("probe tolerance must be positive");
  if (max_iter < 1) throw ConfigError("probe max_iter must be >= 1");
  if (!(test_fraction > 0 && test_fraction < 1)) throw ConfigError("probe test_fraction must lie in (0, 1)");
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

namespace {

RowMat standardize(const Matrix<double>& X, const std::vector<double>& mean, const std::vector<double>& scale) {
  RowMat Z = as_eigen(X);
  for (Eigen::Index c = 0; c < Z.cols(); ++c) {
    const auto j = static_cast<std::size_t>(c);
    Z.col(c) = (Z.col(c).array() - mean[j]) / scale[j];
  }
  return Z;
}

struct BinaryFit {
  Eigen::VectorXd w;
  double b = 0;
  ProbeTrace trace;
};

BinaryFit fit_binary(const RowMat& Z, const Eigen::VectorXd& y, const ProbeConfig& cfg) {
  const auto n = Z.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(Z.cols());
  double b = 0;
  BinaryFit best{w, b, {}};
  best.trace.objective = std::numeric_limits<double>::infinity();

  Eigen::VectorXd coef(n);
  for (int t = 1; t <= cfg.max_iter; ++t) {
    const Eigen::VectorXd margin = y.cwiseProduct((Z * w).array().matrix() + Eigen::VectorXd::Constant(n, b));
    double hinge = 0, gb = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (margin[i] < 1) {
        hinge += 1 - margin[i];
        coef[i] = y[i];
        gb -= y[i];
      } else {
        coef[i] = 0;
      }
    }
    const double obj = 0.5 * w.squaredNorm() + cfg.C * hinge * inv_n;
    if (obj < best.trace.objective) {
      best.w = w;
      best.b = b;
      best.trace.objective = obj;
    }
    best.trace.iterations = t;
    const Eigen::VectorXd gw = w - (cfg.C * inv_n) * (Z.transpose() * coef);
    gb *= cfg.C * inv_n;
    if (std::sqrt(gw.squaredNorm() + gb * gb) < cfg.tolerance) {
      best.trace.converged = true;
      break;
    }
    const double eta = 1.0 / t;
    w -= eta * gw;
    b -= eta * gb;
  }
  return best;
}

}  // namespace

LinearProbe fit_probe(const EmbeddingSet& train, const ProbeConfig& config) {
  config.validate();
  train.validate();
  std::vector<std::size_t> counts(static_cast<std::size_t>(train.num_classes), 0);
  for (int l : train.labels) ++counts[static_cast<std::size_t>(l)];
  if (std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) < 2)
    throw TaskError("probe needs at least two classes in the training set");

  LinearProbe p;
  p.num_classes = train.num_classes;
  p.dim = train.dim();
  p.C = config.C;
  p.class_counts = counts;
  p.tie_tolerance = config.tolerance;
  const auto X = as_eigen(train.X);
  const Eigen::RowVectorXd mean = X.colwise().mean();
  p.mean.assign(mean.data(), mean.data() + mean.size());
  p.scale.resize(p.dim);
  for (std::size_t c = 0; c < p.dim; ++c) {
    const auto col = X.col(static_cast<Eigen::Index>(c)).array() - mean[static_cast<Eigen::Index>(c)];
    const double sd = std::sqrt(col.square().sum() / static_cast<double>(X.rows()));
    p.scale[c] = sd > 1e-12 ? sd : 1.0;
  }
  const RowMat Z = standardize(train.X, p.mean, p.scale);

  p.W = Matrix<double>(static_cast<std::size_t>(p.num_classes), p.dim);
  p.b.assign(static_cast<std::size_t>(p.num_classes), 0.0);
  p.trace.resize(static_cast<std::size_t>(p.num_classes));
  Eigen::VectorXd y(Z.rows());
  for (int k = 0; k < p.num_classes; ++k) {
    for (Eigen::Index i = 0; i < Z.rows(); ++i) y[i] = train.labels[static_cast<std::size_t>(i)] == k ? 1.0 : -1.0;
    const auto fit = fit_binary(Z, y, config);
    const auto ku = static_cast<std::size_t>(k);
    std::copy_n(fit.w.data(), p.dim, p.W.data.begin() + static_cast<std::ptrdiff_t>(ku * p.dim));
    p.b[ku] = fit.b;
    p.trace[ku] = fit.trace;
  }
  return p;
}

Matrix<double> LinearProbe::scores(const Matrix<double>& X) const {
  if (X.cols != dim)
    throw ShapeError("probe expects dimension " + std::to_string(dim) + ", got " + std::to_string(X.cols));
  const RowMat Z = standardize(X, mean, scale);
  Matrix<double> s(X.rows, static_cast<std::size_t>(num_classes));
  auto S = as_eigen(s);
  S.noalias() = Z * as_eigen(W).transpose();
  S.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  return s;
}

std::vector<int> LinearProbe::predict(const Matrix<double>& X) const {
  const auto s = scores(X);
  std::vector<int> out(X.rows);
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto row = s.row(r);
    const double top = *std::max_element(row.begin(), row.end());
    auto count = [&](std::size_t k) { return k < class_counts.size() ? class_counts[k] : 0; };
    std::size_t best = row.size();
    for (std::size_t k = 0; k < row.size(); ++k) {
      if (row[k] < top - tie_tolerance) continue;
      if (best == row.size() || count(k) > count(best)) best = k;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

MetricsReport eval_probe(const LinearProbe& probe, const EmbeddingSet& test) {
  if (test.dim() != probe.dim)
    throw ShapeError("probe expects dimension " + std::to_string(probe.dim) + ", got " + std::to_string(test.dim()));
  return compute_metrics(probe.predict(test.X), test.labels, probe.num_classes);
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

std::array<double, 2> PcaModel::explained_ratio() const {
  return {explained_variance[0] / total_variance, explained_variance[1] / total_variance};
}

PcaModel fit_pca(const Matrix<double>& X) {
  if (X.rows < 2) throw ShapeError("PCA needs at least two rows");
  if (X.cols < 2) throw ShapeError("PCA needs at least two dimensions");
  for (double v : X.data)
    if (!std::isfinite(v)) throw NumericsError("PCA input has non-finite entries");
  const auto A = as_eigen(X);
  const Eigen::RowVectorXd mean = A.colwise().mean();
  const RowMat C = A.rowwise() - mean;
  const Eigen::MatrixXd cov = (C.transpose() * C) / static_cast<double>(X.rows - 1);
  const double total = cov.trace();
  if (!(total > 0)) throw DegenerateData("PCA input has zero variance");

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericsError("PCA eigendecomposition failed");
  const auto d = cov.rows();
  PcaModel m;
  m.mean.assign(mean.data(), mean.data() + mean.size());
  m.total_variance = total;
  m.components = Matrix<double>(2, X.cols);
  for (int k = 0; k < 2; ++k) {
    // eigenvalues ascend
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    m.explained_variance[static_cast<std::size_t>(k)] = std::max(0.0, eig.eigenvalues()[d - 1 - k]);
    std::copy_n(v.data(), X.cols, m.components.data.begin() + static_cast<std::ptrdiff_t>(k * X.cols));
  }
  return m;
}

Matrix<double> project(const PcaModel& pca, const Matrix<double>& X) {
  if (X.cols != pca.mean.size()) throw ShapeError("PCA projection dimension mismatch");
  const Eigen::Map<const Eigen::RowVectorXd> mean(pca.mean.data(), static_cast<Eigen::Index>(pca.mean.size()));
  Matrix<double> Y(X.rows, 2);
  as_eigen(Y).noalias() = (as_eigen(X).rowwise() - mean) * as_eigen(pca.components).transpose();
  return Y;
}

Matrix<double> back_project(const PcaModel& pca, const Matrix<double>& Y) {
  if (Y.cols != 2) throw ShapeError("back projection expects two columns");
  const Eigen::Map<const Eigen::RowVectorXd> mean(pca.mean.data(), static_cast<Eigen::Index>(pca.mean.size()));
  Matrix<double> X(Y.rows, pca.mean.size());
  auto E = as_eigen(X);
  E.noalias() = as_eigen(Y) * as_eigen(pca.components);
  E.rowwise() += mean;
  return X;
}

// ---------------------------------------------------------------------------

MetricsReport naive_baseline(std::span<const int> train_labels, std::span<const int> test_labels,
                             int num_classes) {
  if (train_labels.empty() || test_labels.empty()) throw ShapeError("naive baseline needs non-empty labels");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int l : train_labels) {
    if (l < 0 || l >= num_classes) throw LabelError("label out of range");
    ++counts[static_cast<std::size_t>(l)];
  }
  const int mode = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  const std::vector<int> preds(test_labels.size(), mode);
  return compute_metrics(preds, test_labels, num_classes);
}

ProbeCell run_probe_cell(const EmbeddingSet& set, const ProbeConfig& config) {
  const std::string ctx = "probe cell (model " + set.tag + ", task " + set.task + ")";
  try {
    config.validate();
    set.validate();
    const auto split = stratified_split(set.labels, config.test_fraction, config.seed);
    const auto train = set.subset(split.train);
    const auto test = set.subset(split.val);
    if (test.size() == 0) throw TaskError("empty test split");
    ProbeCell cell;
    cell.task = set.task;
    cell.tag = set.tag;
    cell.num_classes = set.num_classes;
    cell.n_train = train.size();
    cell.n_test = test.size();
    cell.probe = eval_probe(fit_probe(train, config), test);
    cell.naive = naive_baseline(train.labels, test.labels, set.num_classes);
    cell.pca = fit_pca(set.X);
    cell.projection = project(cell.pca, set.X);
    cell.labels = set.labels;
    return cell;
  } catch (const TaskError& e) {
    rethrow_with(e, ctx);
  } catch (const ShapeError& e) {
    rethrow_with(e, ctx);
  } catch (const LabelError& e) {
    rethrow_with(e, ctx);
  } catch (const NumericsError& e) {
    rethrow_with(e, ctx);
  } catch (const DegenerateData& e) {
    rethrow_with(e, ctx);
  }
}

SuiteReport run_probe_suite(std::span<const EmbeddingSet> sets, const ProbeConfig& config) {
  SuiteReport r;
  r.cells.resize(sets.size());
  // cells are independent; each writes only its own slot
  std::vector<std::exception_ptr> errors(sets.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(sets.size()); ++i) {
    const auto u = static_cast<std::size_t>(i);
    try {
      r.cells[u] = run_probe_cell(sets[u], config);
    } catch (...) {
      errors[u] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return r;
}

}  // namespace stpc
