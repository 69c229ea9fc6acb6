#include "stpc/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "stpc/layers.hpp"
#include "stpc/model.hpp"
#include "stpc/train.hpp"

namespace stpc {

namespace {

constexpr double kH = 1e-5;
constexpr double kLayerTol = 1e-4;
constexpr double kEndToEndTol = 1e-3;

using Rng = std::mt19937_64;

double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

/// Unique random sites inside [0, box)^3, sorted.
std::vector<Site3> random_sites(Rng& rng, std::size_t n, int box, int step = 1) {
  std::uniform_int_distribution<int> d(0, box / step - 1);
  std::set<Site3> s;
  while (s.size() < n) s.insert({d(rng) * step, d(rng) * step, d(rng) * step});
  return {s.begin(), s.end()};
}

EventSites<double> random_event(Rng& rng, std::size_t n, int box, std::size_t channels) {
  EventSites<double> e;
  e.sites = random_sites(rng, n, box);
  e.features = Matrix<double>(e.sites.size(), channels);
  for (auto& v : e.features.data) v = normal(rng);
  return e;
}

SparseTensor<double> random_tensor(Rng& rng, std::size_t events, std::size_t sites, int box,
                                   std::size_t channels) {
  std::vector<EventSites<double>> ev;
  for (std::size_t e = 0; e < events; ++e) ev.push_back(random_event(rng, sites, box, channels));
  return batch(std::span<const EventSites<double>>(ev));
}

Matrix<double> random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix<double> m(r, c);
  for (auto& v : m.data) v = normal(rng);
  return m;
}

double dot(const Matrix<double>& a, const Matrix<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

/// Central differences of `loss` with respect to every entry of `values`.
std::vector<double> numeric_grad(std::vector<double>& values, const std::function<double()>& loss) {
  std::vector<double> g(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    values[i] = v + kH;
    const double lp = loss();
    values[i] = v - kH;
    const double lm = loss();
    values[i] = v;
    g[i] = (lp - lm) / (2 * kH);
  }
  return g;
}

CheckResult make_result(std::string name, double err, double tol, std::string detail = {}) {
  return {std::move(name), err, tol, err < tol, std::move(detail)};
}

CheckResult grad_check(const std::string& name, const std::vector<double>& analytic,
                       std::vector<double>& values, const std::function<double()>& loss) {
  const auto numeric = numeric_grad(values, loss);
  return make_result(name, max_rel_error(analytic, numeric), kLayerTol);
}

}  // namespace

double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                     double floor) {
  if (analytic.size() != numeric.size()) return std::numeric_limits<double>::infinity();
  double e = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double den = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    const double r = std::abs(analytic[i] - numeric[i]) / den;
    if (!(r <= e)) e = r;  // NaN propagates as a failure
  }
  return e;
}

// ---------------------------------------------------------------------------
// Per-layer checks
// ---------------------------------------------------------------------------

std::vector<CheckResult> layer_gradient_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CheckResult> out;

  // sparse convolution, several kernel/stride combinations
  struct ConvCase {
    const char* name;
    int kernel, stride, in_stride;
  };
  for (const ConvCase cc : {ConvCase{"conv3 s1", 3, 1, 1}, ConvCase{"conv3 s2", 3, 2, 1},
                            ConvCase{"conv3 s3 (t=2)", 3, 3, 2}, ConvCase{"conv1 s2", 1, 2, 1}}) {
    auto x = random_tensor(rng, 2, 60, 8, 3);
    if (cc.in_stride > 1) {
      for (auto& c : x.coords) c = {c.b, c.i * cc.in_stride, c.j * cc.in_stride, c.k * cc.in_stride};
      x.tensor_stride = cc.in_stride;
    }
    ConvParams<double> p(3, 4, cc.kernel == 3 ? 27 : 1);
    for (auto& w : p.weights) w = normal(rng);
    const auto km = build_kernel_map(x, cc.kernel, cc.stride);
    const auto y0 = sparse_conv_fwd(x, p, km);
    const auto w = random_matrix(rng, y0.size(), y0.channels());
    const auto g = sparse_conv_bwd(x, p, km, w);
    auto loss = [&] { return dot(sparse_conv_fwd(x, p, km).features, w); };
    out.push_back(grad_check(std::string(cc.name) + " d_input", g.d_input.data, x.features.data, loss));
    out.push_back(grad_check(std::string(cc.name) + " d_weights", g.d_weights, p.weights, loss));
  }

  // batch norm, both modes
  for (const Mode mode : {Mode::Train, Mode::Eval}) {
    const std::string tag = mode == Mode::Train ? "batchnorm train" : "batchnorm eval";
    auto x = random_tensor(rng, 2, 40, 6, 3);
    for (auto& v : x.features.data) v = 2 * v + 0.5;
    BNParams<double> p(3);
    for (std::size_t c = 0; c < 3; ++c) {
      p.gamma[c] = 1 + 0.5 * normal(rng);
      p.beta[c] = normal(rng);
      p.running_mean[c] = normal(rng);
      p.running_var[c] = 1.5 + std::abs(normal(rng));
    }
    const auto w = random_matrix(rng, x.size(), 3);
    BNCache<double> cache;
    auto p0 = p;
    batchnorm_fwd(x, p0, mode, &cache);
    const auto g = batchnorm_bwd(p, cache, w);
    auto loss = [&] {
      auto q = p;
      return dot(batchnorm_fwd(x, q, mode).features, w);
    };
    out.push_back(grad_check(tag + " d_input", g.d_input.data, x.features.data, loss));
    out.push_back(grad_check(tag + " d_gamma", g.d_gamma, p.gamma, loss));
    out.push_back(grad_check(tag + " d_beta", g.d_beta, p.beta, loss));
  }

  // activations; keep ReLU inputs away from the kink
  {
    auto x = random_matrix(rng, 50, 4);
    for (auto& v : x.data)
      if (std::abs(v) < 1e-2) v += 0.05;
    const auto w = random_matrix(rng, 50, 4);
    out.push_back(grad_check("relu", relu_bwd(x, w).data, x.data, [&] { return dot(relu_fwd(x), w); }));
    out.push_back(grad_check("gelu", gelu_bwd(x, w).data, x.data, [&] { return dot(gelu_fwd(x), w); }));
  }

  // dropout with a fixed mask
  {
    auto x = random_matrix(rng, 50, 4);
    const auto w = random_matrix(rng, 50, 4);
    const DropoutKey key{seed, 7, 3};
    const auto fwd = dropout_fwd(x, 0.8, key, Mode::Train);
    out.push_back(grad_check("dropout", dropout_bwd(fwd, w).data, x.data,
                             [&] { return dot(dropout_fwd(x, 0.8, key, Mode::Train).out, w); }));
  }

  // pooling
  {
    auto x = random_tensor(rng, 2, 80, 8, 3);
    const auto km = pool_map(x);
    const auto fwd = sparse_maxpool_fwd(x, km);
    const auto w = random_matrix(rng, fwd.out.size(), 3);
    out.push_back(grad_check("maxpool", sparse_maxpool_bwd(fwd, x.size(), w).data, x.features.data,
                             [&] { return dot(sparse_maxpool_fwd(x, km).out.features, w); }));
  }
  {
    auto x = random_tensor(rng, 3, 30, 6, 4);
    const auto fwd = global_maxpool_fwd(x);
    const auto w = random_matrix(rng, 3, 4);
    out.push_back(grad_check("global maxpool", global_maxpool_bwd(fwd, x.size(), w).data, x.features.data,
                             [&] { return dot(global_maxpool_fwd(x).out, w); }));
  }

  // linear head
  {
    auto x = random_matrix(rng, 5, 6);
    LinearParams<double> p(6, 3);
    for (auto& v : p.weights) v = normal(rng);
    for (auto& v : p.bias) v = normal(rng);
    const auto w = random_matrix(rng, 5, 3);
    const auto g = linear_bwd(x, p, w);
    auto loss = [&] { return dot(linear_fwd(x, p), w); };
    out.push_back(grad_check("linear d_input", g.d_input.data, x.data, loss));
    out.push_back(grad_check("linear d_weights", g.d_weights, p.weights, loss));
    out.push_back(grad_check("linear d_bias", g.d_bias, p.bias, loss));
  }

  // softmax cross-entropy
  {
    auto z = random_matrix(rng, 6, 3);
    const std::vector<int> y{0, 2, 1, 1, 0, 2};
    const auto ce = cross_entropy(z, y);
    out.push_back(grad_check("cross-entropy", ce.grad.data, z.data, [&] { return cross_entropy(z, y).loss; }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// End-to-end
// ---------------------------------------------------------------------------

namespace {

/// ReLU signs and pooling argmaxes of one forward pass. FD across a change
/// in this pattern measures a kink, not a derivative.
std::vector<std::int64_t> activation_pattern(const ForwardTrace<double>& t) {
  std::vector<std::int64_t> p;
  auto signs = [&](const Matrix<double>& m) {
    for (double v : m.data) p.push_back(v > 0);
  };
  signs(t.stem_bn_out);
  for (const auto& b : t.blocks) {
    signs(b.bn1_out);
    signs(b.sum);
  }
  p.insert(p.end(), t.stem_pool.argmax.begin(), t.stem_pool.argmax.end());
  p.insert(p.end(), t.global_pool.argmax.begin(), t.global_pool.argmax.end());
  return p;
}

}  // namespace

CheckResult end_to_end_gradient_check(std::uint64_t seed) {
  Rng rng(seed);
  ArchConfig cfg;
  cfg.stage_widths = {4, 4, 4, 4};
  cfg.seed = seed;
  auto model = init_model<double>(cfg);
  // non-trivial BN affine parameters
  for (auto& nt : parameters(model))
    if (nt.name.find("gamma") != std::string::npos || nt.name.find("beta") != std::string::npos)
      for (auto& v : *nt.values) v += 0.2 * normal(rng);

  // Two events spread over a large box so every stage keeps several sites.
  std::vector<EventSites<double>> ev{random_event(rng, 60, 256, 4), random_event(rng, 45, 256, 4)};
  auto x = batch(std::span<const EventSites<double>>(ev));
  const std::vector<int> y{0, 1};
  const ForwardOptions opts{Mode::Train, seed, 1};

  auto run = [&](ModelState<double>& m) {
    auto scratch = m;
    return forward(scratch, x, opts);
  };
  const auto base = run(model);
  const auto base_pattern = activation_pattern(base);
  const auto ce = cross_entropy(base.logits, y);
  const auto grads = backward(model, base, ce.grad);

  std::size_t total = 0, skipped = 0;
  double err = 0;
  auto check_entry = [&](double& value, double analytic) {
    const double v = value;
    value = v + kH;
    const auto tp = run(model);
    value = v - kH;
    const auto tm = run(model);
    value = v;
    ++total;
    if (activation_pattern(tp) != base_pattern || activation_pattern(tm) != base_pattern) {
      ++skipped;
      return;
    }
    const double numeric = (cross_entropy(tp.logits, y).loss - cross_entropy(tm.logits, y).loss) / (2 * kH);
    err = std::max(err, max_rel_error({analytic}, {numeric}));
  };

  auto params = parameters(model);
  auto gparams = parameters(const_cast<ModelState<double>&>(grads.params));
  for (std::size_t t = 0; t < params.size(); ++t)
    for (std::size_t i = 0; i < params[t].values->size(); ++i)
      check_entry((*params[t].values)[i], (*gparams[t].values)[i]);
  for (std::size_t i = 0; i < x.features.data.size(); ++i) check_entry(x.features.data[i], grads.d_input.data[i]);

  const double skip_frac = total ? static_cast<double>(skipped) / static_cast<double>(total) : 1.0;
  std::ostringstream d;
  d << total << " entries, " << skipped << " skipped at kinks";
  auto r = make_result("end-to-end (widths 4,4,4,4)", err, kEndToEndTol, d.str());
  if (skip_frac > 0.05) {
    r.pass = false;
    r.detail += " (too many)";
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dense-convolution oracle
// ---------------------------------------------------------------------------

std::vector<CheckResult> dense_oracle_checks(std::size_t n_events, std::uint64_t seed) {
  constexpr int box = 7;
  constexpr std::size_t cin = 3, cout = 4;
  struct Case {
    const char* name;
    int kernel, stride;
  };
  std::vector<CheckResult> out;
  for (const Case cs : {Case{"dense oracle conv3 s1", 3, 1}, Case{"dense oracle conv3 s2", 3, 2},
                        Case{"dense oracle conv1 s1", 1, 1}}) {
    Rng rng(seed + static_cast<std::uint64_t>(cs.kernel * 10 + cs.stride));
    double err = 0;
    bool coords_ok = true;
    for (std::size_t e = 0; e < n_events; ++e) {
      std::uniform_int_distribution<std::size_t> nd(1, 120);
      auto x = random_tensor(rng, 1, nd(rng), box, cin);
      ConvParams<double> p(cin, cout, cs.kernel == 3 ? 27 : 1);
      for (auto& w : p.weights) w = normal(rng);
      const auto km = build_kernel_map(x, cs.kernel, cs.stride);
      const auto y = sparse_conv_fwd(x, p, km);

      // dense grid, zero where no site is active
      std::vector<double> grid(static_cast<std::size_t>(box * box * box) * cin, 0.0);
      auto at = [&](int i, int j, int k) { return ((static_cast<std::size_t>(i) * box + j) * box + k) * cin; };
      for (std::size_t r = 0; r < x.size(); ++r)
        for (std::size_t c = 0; c < cin; ++c) grid[at(x.coords[r].i, x.coords[r].j, x.coords[r].k) + c] = x.features(r, c);

      std::set<Site3> expect;
      for (const auto& c : x.coords)
        expect.insert({c.i / cs.stride * cs.stride, c.j / cs.stride * cs.stride, c.k / cs.stride * cs.stride});
      if (expect.size() != y.size()) coords_ok = false;
      std::size_t row = 0;
      for (const auto& o : expect) {
        if (row >= y.size() || y.coords[row].i != o[0] || y.coords[row].j != o[1] || y.coords[row].k != o[2]) {
          coords_ok = false;
          break;
        }
        for (std::size_t co = 0; co < cout; ++co) {
          double ref = 0;
          for (std::size_t off = 0; off < km.offsets.size(); ++off) {
            const auto& d = km.offsets[off];
            const int i = o[0] + d[0], j = o[1] + d[1], k = o[2] + d[2];
            if (i < 0 || j < 0 || k < 0 || i >= box || j >= box || k >= box) continue;
            const double* W = p.offset_matrix(static_cast<int>(off));
            for (std::size_t ci = 0; ci < cin; ++ci) ref += grid[at(i, j, k) + ci] * W[ci * cout + co];
          }
          err = std::max(err, std::abs(ref - y.features(row, co)));
        }
        ++row;
      }
    }
    auto r = make_result(cs.name, err, 1e-6, std::to_string(n_events) + " events");
    if (!coords_ok) {
      r.pass = false;
      r.detail += ", output coordinates differ";
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kernel-map brute force
// ---------------------------------------------------------------------------

std::vector<CheckResult> kernel_map_checks(std::size_t n_sites, std::uint64_t seed) {
  struct Case {
    const char* name;
    int kernel, stride, in_stride;
    bool pool;
  };
  std::vector<CheckResult> out;
  for (const Case cs : {Case{"kernel map conv3 s1", 3, 1, 1, false}, Case{"kernel map conv3 s2", 3, 2, 1, false},
                        Case{"kernel map conv3 s3 (t=2)", 3, 3, 2, false},
                        Case{"kernel map conv1 s2 (t=4)", 1, 2, 4, false},
                        Case{"kernel map maxpool (t=2)", 2, 2, 2, true}}) {
    Rng rng(seed + static_cast<std::uint64_t>(cs.kernel * 100 + cs.stride * 10 + cs.in_stride));
    // two events, coordinates on the tensor-stride lattice, some negative
    std::vector<VoxelCoord> coords;
    std::set<VoxelCoord> seen;
    std::uniform_int_distribution<int> d(-6, 6);
    while (seen.size() < n_sites) {
      const VoxelCoord c{static_cast<std::int32_t>(seen.size() % 2), d(rng) * cs.in_stride, d(rng) * cs.in_stride,
                         d(rng) * cs.in_stride};
      seen.insert(c);
    }
    coords.assign(seen.begin(), seen.end());
    const KernelMap km = cs.pool ? pool_map(coords, cs.in_stride)
                                 : build_kernel_map(coords, cs.in_stride, cs.kernel, cs.stride);

    // independent expectation
    const int step = cs.in_stride * cs.stride;
    auto fdiv = [](int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); };
    std::set<VoxelCoord> outs;
    for (const auto& c : coords)
      outs.insert({c.b, fdiv(c.i, step) * step, fdiv(c.j, step) * step, fdiv(c.k, step) * step});
    const std::vector<VoxelCoord> out_coords(outs.begin(), outs.end());
    std::vector<Site3> offs;
    const int lo = cs.pool ? 0 : -(cs.kernel / 2), hi = cs.pool ? 1 : cs.kernel / 2;
    for (int a = lo; a <= hi; ++a)
      for (int b = lo; b <= hi; ++b)
        for (int c = lo; c <= hi; ++c) offs.push_back({a, b, c});

    bool ok = km.out_coords == out_coords && km.volume() == offs.size();
    std::set<Site3> got_offs(km.offsets.begin(), km.offsets.end());
    ok = ok && got_offs == std::set<Site3>(offs.begin(), offs.end());
    std::size_t mismatches = 0;
    for (std::size_t o = 0; ok && o < km.volume(); ++o) {
      const auto& off = km.offsets[o];
      std::vector<KernelMap::Pair> expect;
      for (std::size_t p = 0; p < out_coords.size(); ++p)
        for (std::size_t q = 0; q < coords.size(); ++q) {
          const auto& a = out_coords[p];
          const auto& b = coords[q];
          if (a.b == b.b && b.i == a.i + off[0] * cs.in_stride && b.j == a.j + off[1] * cs.in_stride &&
              b.k == a.k + off[2] * cs.in_stride)
            expect.push_back({static_cast<std::int32_t>(q), static_cast<std::int32_t>(p)});
        }
      auto got = km.pairs[o];
      auto key = [](const KernelMap::Pair& a, const KernelMap::Pair& b) {
        return std::pair(a.out, a.in) < std::pair(b.out, b.in);
      };
      std::sort(got.begin(), got.end(), key);
      std::sort(expect.begin(), expect.end(), key);
      if (got != expect) ++mismatches;
    }
    if (!ok) mismatches = km.volume() + 1;
    // error = number of mismatching offsets; exact agreement required
    out.push_back({cs.name, static_cast<double>(mismatches), 0.0, mismatches == 0,
                   std::to_string(n_sites) + " sites, " + std::to_string(km.pair_count()) + " pairs"});
  }
  return out;
}

std::vector<CheckResult> run_selftest(std::uint64_t seed) {
  auto all = layer_gradient_checks(seed);
  all.push_back(end_to_end_gradient_check(seed + 1));
  for (auto& r : dense_oracle_checks(100, seed + 2)) all.push_back(std::move(r));
  for (auto& r : kernel_map_checks(200, seed + 3)) all.push_back(std::move(r));
  return all;
}

}  // namespace stpc
