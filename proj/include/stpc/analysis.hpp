#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stpc/matrix.hpp"
#include "stpc/train.hpp"

namespace stpc {

/// Frozen embeddings with aligned labels.
struct EmbeddingSet {
  Matrix<double> X;  // N x D
  std::vector<int> labels;
  int num_classes = 0;
  std::string task;
  std::string tag;  // source model, e.g. "rand" / "train"

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return X.cols; }
  /// Throws ShapeError / NumericsError / LabelError.
  void validate() const;
  EmbeddingSet subset(std::span<const std::size_t> idx) const;
};

struct ProbeConfig {
  double C = 1.0;
  double tolerance = 1e-6;  // subgradient norm
  int max_iter = 100000;
  std::uint64_t seed = 0;   // split seed
  double test_fraction = 0.2;

  void validate() const;
};

struct ProbeTrace {
  int iterations = 0;
  bool converged = false;
  double objective = 0;  // best objective reached
};

/// One-vs-rest linear SVM on z-scored features.
struct LinearProbe {
  int num_classes = 0;
  std::size_t dim = 0;
  double C = 1.0;
  std::vector<double> mean, scale;  // standardization, from the training set
  Matrix<double> W;                 // K x D, standardized space
  std::vector<double> b;
  std::vector<ProbeTrace> trace;    // per class
  // Scores within tie_tolerance of the best are ties, resolved toward the
  // class with more training examples, then the lower index.
  std::vector<std::size_t> class_counts;
  double tie_tolerance = 0;

  Matrix<double> scores(const Matrix<double>& X) const;
  std::vector<int> predict(const Matrix<double>& X) const;
};

/// Minimizes 0.5 |w|^2 + C * mean hinge per class by full-batch subgradient
/// descent with step 1/t, keeping the best iterate. Throws TaskError when
/// fewer than two classes are present.
LinearProbe fit_probe(const EmbeddingSet& train, const ProbeConfig& config);

/// Throws ShapeError on dimension mismatch.
MetricsReport eval_probe(const LinearProbe& probe, const EmbeddingSet& test);

struct PcaModel {
  std::vector<double> mean;
  Matrix<double> components;  // 2 x D, orthonormal rows
  std::array<double, 2> explained_variance{};
  double total_variance = 0;

  std::array<double, 2> explained_ratio() const;
};

/// Covariance eigendecomposition; each component's largest-magnitude entry
/// is made positive. Throws DegenerateData on zero variance.
PcaModel fit_pca(const Matrix<double>& X);
Matrix<double> project(const PcaModel& pca, const Matrix<double>& X);
/// mean + Y * components
Matrix<double> back_project(const PcaModel& pca, const Matrix<double>& Y);

/// Predicts the training-set mode (lowest class on ties) for every test item.
MetricsReport naive_baseline(std::span<const int> train_labels, std::span<const int> test_labels,
                             int num_classes);

// ---------------------------------------------------------------------------

struct ProbeCell {
  std::string task;
  std::string tag;
  int num_classes = 0;
  std::size_t n_train = 0, n_test = 0;
  MetricsReport probe;
  MetricsReport naive;
  PcaModel pca;
  Matrix<double> projection;  // N x 2, all events
  std::vector<int> labels;
};

struct SuiteReport {
  std::vector<ProbeCell> cells;
};

/// Embedding set -> stratified split -> probe + naive baseline + PCA.
/// Errors are rethrown with (model, task) context.
ProbeCell run_probe_cell(const EmbeddingSet& set, const ProbeConfig& config);
SuiteReport run_probe_suite(std::span<const EmbeddingSet> sets, const ProbeConfig& config);

/// One entry per task with every predictor's scores.
std::string report_json(const SuiteReport& report);
/// task,predictor,accuracy,macro_f1,weighted_f1
std::string report_csv(const SuiteReport& report);
/// pca1,pca2,label
std::string pca_csv(const ProbeCell& cell);
std::string pca_svg(const ProbeCell& cell);

}  // namespace stpc
