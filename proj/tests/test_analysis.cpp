#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <random>

#include "stpc/analysis.hpp"

using namespace stpc;

namespace {

// Three Gaussian blobs in `d` dimensions, `n` points per class.
EmbeddingSet blobs(std::size_t n, std::size_t d, double sep, std::uint64_t seed, const std::string& tag = "x") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  EmbeddingSet s;
  s.X = Matrix<double>(3 * n, d);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = k * n + i;
      for (std::size_t c = 0; c < d; ++c) s.X(r, c) = normal(rng) + (c == k ? sep : 0.0);
      s.labels.push_back(static_cast<int>(k));
    }
  s.num_classes = 3;
  s.task = "blobs";
  s.tag = tag;
  return s;
}

}  // namespace

TEST_CASE("probe separates well-separated classes") {
  const auto s = blobs(60, 5, 8.0, 1);
  ProbeConfig cfg;
  cfg.max_iter = 2000;
  const auto p = fit_probe(s, cfg);
  CHECK(p.W.rows == 3);
  CHECK(p.W.cols == 5);
  CHECK(p.trace[0].iterations > 0);
  CHECK(eval_probe(p, s).accuracy == 1.0);
}

TEST_CASE("probe standardization ignores constant features") {
  auto s = blobs(30, 4, 6.0, 2);
  for (std::size_t r = 0; r < s.size(); ++r) s.X(r, 3) = 7.0;
  ProbeConfig cfg;
  cfg.max_iter = 500;
  const auto p = fit_probe(s, cfg);
  CHECK(p.scale[3] == 1.0);
  CHECK(p.mean[3] == 7.0);
}

TEST_CASE("probe fitting is deterministic") {
  const auto s = blobs(40, 6, 1.0, 3);
  ProbeConfig cfg;
  cfg.max_iter = 300;
  CHECK(fit_probe(s, cfg).W == fit_probe(s, cfg).W);
}

TEST_CASE("probe errors") {
  auto s = blobs(10, 3, 1.0, 4);
  for (auto& l : s.labels) l = 1;
  CHECK_THROWS_AS(fit_probe(s, ProbeConfig{}), TaskError);
  const auto good = blobs(10, 3, 1.0, 4);
  ProbeConfig cfg;
  cfg.max_iter = 10;
  const auto p = fit_probe(good, cfg);
  const auto wrong = blobs(10, 4, 1.0, 4);
  CHECK_THROWS_AS(eval_probe(p, wrong), ShapeError);
  cfg.C = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("naive baseline predicts the training mode, lowest class on ties") {
  const std::vector<int> train{0, 1, 1, 2, 2}, test{0, 1, 2, 2};
  const auto m = naive_baseline(train, test, 3);
  CHECK(m.accuracy == doctest::Approx(0.25));
  const std::vector<int> tie{2, 2, 1, 1}, t2{1, 2};
  CHECK(naive_baseline(tie, t2, 3).recall[1] == 1.0);
}

TEST_CASE("PCA sign convention and degenerate input") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  Matrix<double> X(100, 4);
  for (std::size_t r = 0; r < 100; ++r)
    for (std::size_t c = 0; c < 4; ++c) X(r, c) = normal(rng) * (c == 2 ? -10.0 : 1.0);
  const auto pca = fit_pca(X);
  for (std::size_t k = 0; k < 2; ++k) {
    double big = 0;
    for (std::size_t c = 0; c < 4; ++c)
      if (std::abs(pca.components(k, c)) > std::abs(big)) big = pca.components(k, c);
    CHECK(big > 0);
  }
  CHECK(std::abs(pca.components(0, 2)) > 0.99);
  const auto ratio = pca.explained_ratio();
  CHECK(ratio[0] > 0.9);
  CHECK(ratio[0] + ratio[1] <= 1.0 + 1e-12);

  Matrix<double> flat(10, 3, 2.0);
  CHECK_THROWS_AS(fit_pca(flat), DegenerateData);
}

TEST_CASE("suite report holds every predictor plus the naive row") {
  const std::vector<EmbeddingSet> sets{blobs(40, 5, 4.0, 6, "rand"), blobs(40, 5, 8.0, 6, "train")};
  ProbeConfig cfg;
  cfg.max_iter = 500;
  const auto rep = run_probe_suite(sets, cfg);
  REQUIRE(rep.cells.size() == 2);
  CHECK(rep.cells[0].n_test == 24);
  CHECK(rep.cells[0].projection.rows == 120);

  const auto csv = report_csv(rep);
  CHECK(csv.rfind("task,predictor,accuracy,macro_f1,weighted_f1\n", 0) == 0);
  CHECK(csv.find("blobs,naive,") != std::string::npos);
  const auto j = nlohmann::json::parse(report_json(rep));
  CHECK(j["tasks"][0]["predictors"].contains("naive"));
  CHECK(j["tasks"][0]["predictors"].contains("train"));
  CHECK(pca_csv(rep.cells[0]).rfind("pca1,pca2,label\n", 0) == 0);
  CHECK(pca_svg(rep.cells[1]).find("<svg") == 0);
}

TEST_CASE("suite errors name the model and task") {
  auto bad = blobs(10, 3, 1.0, 7, "broken");
  bad.X(0, 0) = std::nan("");
  const std::vector<EmbeddingSet> sets{blobs(10, 3, 1.0, 7, "ok"), bad};
  try {
    run_probe_suite(sets, ProbeConfig{});
    FAIL("expected an error");
  } catch (const NumericsError& e) {
    CHECK(std::string(e.what()).find("model broken, task blobs") != std::string::npos);
  }
}

TEST_CASE("probe on two separable points") {
  EmbeddingSet s;
  s.X = Matrix<double>(2, 2);
  s.X.data = {-1, 0, 1, 0};
  s.labels = {0, 1};
  s.num_classes = 2;
  ProbeConfig cfg;
  cfg.max_iter = 1000;
  CHECK(eval_probe(fit_probe(s, cfg), s).accuracy == 1.0);
}

TEST_CASE("probe on shuffled labels scores near chance") {
  auto s = blobs(300, 4, 0.0, 8);
  std::mt19937_64 rng(9);
  std::shuffle(s.labels.begin(), s.labels.end(), rng);
  ProbeConfig cfg;
  cfg.max_iter = 2000;
  const auto cell = run_probe_cell(s, cfg);
  const double n = static_cast<double>(cell.n_test);
  CHECK(std::abs(cell.probe.accuracy - 1.0 / 3) < 3 * std::sqrt((1.0 / 3) * (2.0 / 3) / n));
}

TEST_CASE("duplicating every training point leaves the probe unchanged") {
  const auto s = blobs(30, 3, 1.5, 10);
  EmbeddingSet d = s;
  d.X = Matrix<double>(2 * s.size(), s.dim());
  d.labels.clear();
  for (std::size_t r = 0; r < s.size(); ++r)
    for (int rep = 0; rep < 2; ++rep) {
      const std::size_t out = 2 * r + static_cast<std::size_t>(rep);
      for (std::size_t c = 0; c < s.dim(); ++c) d.X(out, c) = s.X(r, c);
      d.labels.push_back(s.labels[r]);
    }
  ProbeConfig cfg;
  cfg.max_iter = 500;
  const auto a = fit_probe(s, cfg), b = fit_probe(d, cfg);
  for (std::size_t i = 0; i < a.W.data.size(); ++i) CHECK(a.W.data[i] == doctest::Approx(b.W.data[i]).epsilon(1e-9));
  for (std::size_t k = 0; k < a.b.size(); ++k) CHECK(a.b[k] == doctest::Approx(b.b[k]).epsilon(1e-9));
  CHECK(a.predict(s.X) == b.predict(s.X));
}

TEST_CASE("constant embeddings reduce the probe to the naive baseline") {
  for (int mode : {45, 50, 80}) {
    EmbeddingSet s;
    s.labels.assign(static_cast<std::size_t>(mode), 1);
    s.labels.insert(s.labels.end(), 35, 0);
    s.labels.insert(s.labels.end(), 25, 2);
    s.X = Matrix<double>(s.labels.size(), 3, 1.25);
    s.num_classes = 3;
    ProbeConfig cfg;
    cfg.max_iter = 5000;
    const auto probe = eval_probe(fit_probe(s, cfg), s);
    const auto naive = naive_baseline(s.labels, s.labels, 3);
    CHECK(probe.accuracy == naive.accuracy);
    CHECK(probe.macro_f1 == naive.macro_f1);
    CHECK(probe.weighted_f1 == naive.weighted_f1);
  }
}

TEST_CASE("naive baseline on single-class data") {
  const std::vector<int> one(7, 0);
  CHECK(naive_baseline(one, one, 3).accuracy == 1.0);
}

TEST_CASE("PCA of a line and of isotropic noise") {
  Matrix<double> L(50, 2);
  for (std::size_t r = 0; r < 50; ++r) {
    L(r, 0) = static_cast<double>(r) - 20;
    L(r, 1) = 2 * L(r, 0);
  }
  const auto p = fit_pca(L);
  CHECK(p.components(0, 0) == doctest::Approx(1 / std::sqrt(5.0)).epsilon(1e-12));
  CHECK(p.components(0, 1) == doctest::Approx(2 / std::sqrt(5.0)).epsilon(1e-12));
  CHECK(p.explained_ratio()[0] == doctest::Approx(1.0).epsilon(1e-12));

  std::mt19937_64 rng(12);
  std::normal_distribution<double> normal;
  Matrix<double> I(10000, 2);
  for (auto& v : I.data) v = normal(rng);
  const auto q = fit_pca(I);
  CHECK(q.explained_variance[1] / q.explained_variance[0] > 0.95);
}

TEST_CASE("two-task report shape, rerun and projection rows") {
  auto other = [](const EmbeddingSet& e) {
    auto c = e;
    c.task = "second";
    return c;
  };
  const auto r1 = blobs(30, 4, 3.0, 13, "rand"), t1 = blobs(30, 4, 6.0, 13, "train");
  const std::vector<EmbeddingSet> sets{r1, t1, other(r1), other(t1)};
  ProbeConfig cfg;
  cfg.max_iter = 300;
  const auto rep = run_probe_suite(sets, cfg);
  const auto j = nlohmann::json::parse(report_json(rep));
  REQUIRE(j["tasks"].size() == 2);
  for (const auto& t : j["tasks"]) CHECK(t["predictors"].size() == 3);
  const auto csv = report_csv(rep);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 3);
  CHECK(report_csv(run_probe_suite(sets, cfg)) == csv);
  const auto pc = pca_csv(rep.cells[0]);
  CHECK(std::count(pc.begin(), pc.end(), '\n') == 1 + 90);
}
