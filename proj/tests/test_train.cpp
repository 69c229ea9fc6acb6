#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "stpc/train.hpp"

using namespace stpc;

TEST_CASE("cross entropy value and gradient") {
  Matrix<double> logits(2, 2);
  logits.data = {0.0, 0.0, 2.0, 0.0};
  const std::vector<int> y{1, 0};
  const auto r = cross_entropy(logits, y);
  const double p = std::exp(2.0) / (std::exp(2.0) + 1);
  CHECK(r.loss == doctest::Approx((std::log(2.0) - std::log(p)) / 2));
  CHECK(r.grad(0, 0) == doctest::Approx(0.25));
  CHECK(r.grad(0, 1) == doctest::Approx(-0.25));
  CHECK(r.grad(1, 0) == doctest::Approx((p - 1) / 2));
  const std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(cross_entropy(logits, bad), LabelError);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 5e-4, 13) == 5e-4);
  CHECK(cosine_lr(13, 5e-4, 13) == 0.0);
  CHECK(cosine_lr(14, 5e-4, 13) == 0.0);
  CHECK(cosine_lr(6.5, 5e-4, 13) == doctest::Approx(2.5e-4));
  CHECK(cosine_lr(13, 5e-4, 13, 1e-5) == doctest::Approx(1e-5));
}

TEST_CASE("adam leaves state untouched on a non-finite gradient") {
  std::vector<float> p{1.0f, 2.0f}, g{0.5f, NAN};
  std::vector<float>* pp[] = {&p};
  const std::vector<float>* gp[] = {&g};
  AdamState<float> st;
  CHECK_THROWS_AS(adam_step<float>(pp, gp, st, 1e-3, {}), NumericsError);
  CHECK(p == std::vector<float>{1.0f, 2.0f});
  CHECK(st.step == 0);
}

TEST_CASE("adam first step moves each parameter by about lr") {
  std::vector<double> p{1.0, -1.0}, g{3.0, -0.01};
  std::vector<double>* pp[] = {&p};
  const std::vector<double>* gp[] = {&g};
  AdamState<double> st;
  adam_step<double>(pp, gp, st, 0.1, {});
  CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(-0.9).epsilon(1e-5));
}

TEST_CASE("gradient clipping") {
  std::vector<double> a{3.0}, b{4.0};
  std::vector<double>* g[] = {&a, &b};
  CHECK(clip_grad_norm<double>(g, 1.0) == doctest::Approx(5.0));
  CHECK(a[0] == doctest::Approx(0.6));
  CHECK(std::hypot(a[0], b[0]) <= 1.0);
  std::vector<double> c{0.3};
  std::vector<double>* h[] = {&c};
  clip_grad_norm<double>(h, 1.0);
  CHECK(c[0] == 0.3);
}

TEST_CASE("weighted sampler balances classes") {
  std::vector<int> labels(900, 0);
  labels.insert(labels.end(), 100, 1);
  WeightedSampler s(labels, 2, 3);
  int ones = 0;
  for (int i = 0; i < 20000; ++i) ones += labels[s.next()];
  CHECK(ones / 20000.0 == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("metrics: accuracy, per-class and averaged F1") {
  const std::vector<int> pred{0, 0, 1, 1, 2, 0}, truth{0, 1, 1, 1, 2, 2};
  const auto m = compute_metrics(pred, truth, 3);
  CHECK(m.accuracy == doctest::Approx(4.0 / 6));
  CHECK(m.precision[0] == doctest::Approx(1.0 / 3));
  CHECK(m.recall[1] == doctest::Approx(2.0 / 3));
  CHECK(m.f1[2] == doctest::Approx(2.0 / 3));
  CHECK(m.macro_f1 == doctest::Approx((0.5 + 0.8 + 2.0 / 3) / 3));
  CHECK(m.weighted_f1 == doctest::Approx((0.5 * 1 + 0.8 * 3 + 2.0 / 3 * 2) / 6));
  CHECK(m.confusion[2][0] == 1);
  // a class that is never predicted has zero precision, not NaN
  const auto z = compute_metrics(std::vector<int>{0, 0}, std::vector<int>{0, 1}, 2);
  CHECK(z.precision[1] == 0.0);
  CHECK(z.f1[1] == 0.0);
}

TEST_CASE("stratified split keeps class proportions and is seeded") {
  std::vector<int> labels;
  for (int k = 0; k < 3; ++k) labels.insert(labels.end(), 100 * (k + 1), k);
  const auto a = stratified_split(labels, 0.2, 7), b = stratified_split(labels, 0.2, 7),
             c = stratified_split(labels, 0.2, 8);
  CHECK(a.val == b.val);
  CHECK(a.val != c.val);
  CHECK(a.val.size() == 120);
  CHECK(a.train.size() == 480);
  std::array<int, 3> per{};
  for (auto i : a.val) ++per[static_cast<std::size_t>(labels[i])];
  CHECK(per == std::array<int, 3>{20, 40, 60});
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  CHECK(all.size() == labels.size());
}

TEST_CASE("train loop records one history row per epoch and keeps the best state") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pos(0, 30);
  Dataset<float> data;
  for (int e = 0; e < 24; ++e) {
    std::set<Site3> s;
    while (s.size() < 20) s.insert({pos(rng), pos(rng), pos(rng)});
    EventSites<float> ev;
    ev.sites.assign(s.begin(), s.end());
    ev.features = Matrix<float>(s.size(), 4, e % 2 ? 1.0f : -1.0f);
    data.events.push_back(ev);
    data.labels.push_back(e % 2);
  }
  OptimConfig oc;
  oc.epochs = 3;
  oc.batch_size = 8;
  const auto r = train_loop(init_model<float>(ArchConfig::small()), data, data, oc);
  CHECK(r.history.epochs.size() == 3);
  CHECK(r.history.best_epoch >= 0);
  CHECK(r.history.epochs[static_cast<std::size_t>(r.history.best_epoch)].val_loss == r.history.best_val_loss);
  const auto csv = history_csv(r.history);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  oc.epochs = -1;
  CHECK_THROWS_AS(oc.validate(), ConfigError);
}

TEST_CASE("cross entropy: equal logits, saturated logits, gradient rows") {
  Matrix<double> even(1, 2);
  const std::vector<int> y0{0};
  CHECK(cross_entropy(even, y0).loss == doctest::Approx(std::log(2.0)));
  Matrix<double> big(1, 2);
  big.data = {1000.0, 0.0};
  const auto r = cross_entropy(big, y0);
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss < 1e-12);

  Matrix<double> l(3, 3);
  l.data = {0.1, -2, 3, 5, 5, 5, -1, 0, 1};
  const auto g = cross_entropy(l, std::vector<int>{2, 0, 1}).grad;
  for (std::size_t i = 0; i < 3; ++i) CHECK(g(i, 0) + g(i, 1) + g(i, 2) == doctest::Approx(0.0));
}

TEST_CASE("adam: unit scalar gradient and zero gradients") {
  std::vector<double> p{0.0}, g{1.0};
  std::vector<double>* pp[] = {&p};
  const std::vector<double>* gp[] = {&g};
  AdamState<double> st;
  adam_step<double>(pp, gp, st, 1e-3, {});
  CHECK(p[0] == doctest::Approx(-1e-3).epsilon(1e-6));

  std::vector<double> q{1.0, -2.0}, z{0.0, 0.0};
  std::vector<double>* qp[] = {&q};
  const std::vector<double>* zp[] = {&z};
  AdamState<double> s2;
  for (int i = 0; i < 3; ++i) adam_step<double>(qp, zp, s2, 1e-3, {});
  CHECK(q == std::vector<double>{1.0, -2.0});
}

TEST_CASE("clipping a norm-2 gradient halves every entry") {
  std::vector<double> a{1.0, 1.0}, b{1.0, -1.0};
  std::vector<double>* g[] = {&a, &b};
  CHECK(clip_grad_norm<double>(g, 1.0) == doctest::Approx(2.0));
  CHECK(a[0] == doctest::Approx(0.5));
  CHECK(b[1] == doctest::Approx(-0.5));
}

TEST_CASE("sampler: single class and a balanced chi-square") {
  const std::vector<int> one(50, 1);
  WeightedSampler s(one, 2, 4);
  for (int i = 0; i < 1000; ++i) CHECK(one[s.next()] == 1);

  std::vector<int> labels;
  for (int k = 0; k < 3; ++k) labels.insert(labels.end(), 40, k);
  WeightedSampler b(labels, 3, 5);
  std::array<double, 3> c{};
  const int n = 30000;
  for (int i = 0; i < n; ++i) ++c[static_cast<std::size_t>(labels[b.next()])];
  double chi2 = 0;
  for (double v : c) chi2 += (v - n / 3.0) * (v - n / 3.0) / (n / 3.0);
  // 2 degrees of freedom, p = 0.001
  CHECK(chi2 < 13.82);
}

TEST_CASE("metrics: perfect, mode-only and single-class predictions") {
  const std::vector<int> t{0, 1, 2, 2, 1, 0};
  const auto p = compute_metrics(t, t, 3);
  CHECK(p.accuracy == 1.0);
  CHECK(p.macro_f1 == 1.0);
  CHECK(p.weighted_f1 == 1.0);

  // 48 of 100 in the predicted class
  std::vector<int> truth(48, 0);
  truth.insert(truth.end(), 30, 1);
  truth.insert(truth.end(), 22, 2);
  const auto m = compute_metrics(std::vector<int>(100, 0), truth, 3);
  const double f = 2 * 0.48 / 1.48;
  CHECK(m.accuracy == doctest::Approx(0.48));
  CHECK(m.weighted_f1 == doctest::Approx(0.48 * f));
  CHECK(m.macro_f1 == doctest::Approx(f / 3));
  CHECK(std::round(m.weighted_f1 * 100) / 100 == doctest::Approx(0.31));
  CHECK(std::round(m.macro_f1 * 100) / 100 == doctest::Approx(0.22));

  CHECK(compute_metrics(std::vector<int>(5, 1), std::vector<int>(5, 1), 2).accuracy == 1.0);
}

TEST_CASE("train loop lr history follows the cosine schedule") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> pos(0, 20);
  Dataset<float> data;
  for (int e = 0; e < 12; ++e) {
    std::set<Site3> s;
    while (s.size() < 10) s.insert({pos(rng), pos(rng), pos(rng)});
    EventSites<float> ev;
    ev.sites.assign(s.begin(), s.end());
    ev.features = Matrix<float>(s.size(), 4, e % 2 ? 0.5f : -0.5f);
    data.events.push_back(ev);
    data.labels.push_back(e % 2);
  }
  OptimConfig oc;
  oc.epochs = 4;
  oc.batch_size = 6;
  const auto r = train_loop(init_model<float>(ArchConfig::small()), data, data, oc);
  double best = 1e300;
  for (std::size_t i = 0; i < r.history.epochs.size(); ++i) {
    CHECK(r.history.epochs[i].lr == cosine_lr(static_cast<double>(i), oc.lr0, oc.t_max, oc.eta_min));
    best = std::min(best, r.history.epochs[i].val_loss);
  }
  CHECK(r.history.best_val_loss == best);
}
