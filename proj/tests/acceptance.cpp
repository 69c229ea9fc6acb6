// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stpc/analysis.hpp"
#include "stpc/cli.hpp"
#include "stpc/events.hpp"
#include "stpc/io_util.hpp"
#include "stpc/layers.hpp"
#include "stpc/model.hpp"
#include "stpc/selftest.hpp"
#include "stpc/train.hpp"

using namespace stpc;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failed = 0;

void report(int id, const std::string& title, const Outcome& o) {
  std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", id, title.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++g_failed;
}

void run(int id, const std::string& title, const std::function<Outcome()>& fn) {
  try {
    report(id, title, fn());
  } catch (const std::exception& e) {
    report(id, title, {false, std::string("exception: ") + e.what()});
  }
}

// ---------------------------------------------------------------------------
// 1

Outcome gradients() {
  const auto t0 = Clock::now();
  const auto layers = layer_gradient_checks(2024);
  const auto e2e = end_to_end_gradient_check(2024);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string failed;
  for (const auto& r : layers) {
    worst = std::max(worst, r.error);
    if (!(r.pass && r.error < 1e-4)) failed += " " + r.name;
  }
  const bool ok = failed.empty() && e2e.pass && e2e.error < 1e-3 && secs < 120;
  std::string d = std::to_string(layers.size()) + " layer checks, max rel err " + f("%.2e", worst) +
                  " (< 1e-4); end-to-end " + f("%.2e", e2e.error) + " (< 1e-3, " + e2e.detail + "); " +
                  f("%.1f", secs) + "s (< 120s)";
  if (!failed.empty()) d += "; failed:" + failed;
  return {ok, d};
}

// ---------------------------------------------------------------------------
// 2: oracles written independently of the library's convolution and maps

using Key = std::array<int, 4>;  // b, i, j, k

long floor_div(long a, long b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

std::vector<Key> keys_of(const SparseTensor<double>& t) {
  std::vector<Key> k;
  for (const auto& c : t.coords) k.push_back({c.b, c.i, c.j, c.k});
  return k;
}

std::vector<Key> oracle_out_coords(const std::vector<Key>& in, int t, int s) {
  if (s == 1) return in;
  std::set<Key> out;
  const int st = s * t;
  for (const auto& c : in)
    out.insert({c[0], static_cast<int>(floor_div(c[1], st) * st), static_cast<int>(floor_div(c[2], st) * st),
                static_cast<int>(floor_div(c[3], st) * st)});
  return {out.begin(), out.end()};
}

// Zero-padded dense grid over [-3, 11]^3 (inputs live in [0, 7)^3); weights
// are indexed by the lexicographic offset (dx slowest).
Matrix<double> dense_conv(const std::vector<Key>& in, const Matrix<double>& feat, const std::vector<Key>& out,
                          const std::vector<double>& w, int cin, int cout, int ksize) {
  constexpr int lo = -3, n = 15;
  int nb = 0;
  for (const auto& c : in) nb = std::max(nb, c[0] + 1);
  std::vector<double> grid(static_cast<std::size_t>(nb) * n * n * n * cin, 0.0);
  auto at = [&](int b, int x, int y, int z) -> double* {
    return grid.data() + ((((static_cast<std::size_t>(b) * n + (x - lo)) * n + (y - lo)) * n + (z - lo)) * cin);
  };
  for (std::size_t r = 0; r < in.size(); ++r)
    for (int c = 0; c < cin; ++c) at(in[r][0], in[r][1], in[r][2], in[r][3])[c] = feat(r, static_cast<std::size_t>(c));
  const int rad = ksize / 2;
  Matrix<double> res(out.size(), static_cast<std::size_t>(cout));
  for (std::size_t r = 0; r < out.size(); ++r) {
    int o = 0;
    for (int dx = -rad; dx <= rad; ++dx)
      for (int dy = -rad; dy <= rad; ++dy)
        for (int dz = -rad; dz <= rad; ++dz, ++o) {
          const double* x = at(out[r][0], out[r][1] + dx, out[r][2] + dy, out[r][3] + dz);
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
              res(r, static_cast<std::size_t>(co)) +=
                  x[ci] * w[(static_cast<std::size_t>(o) * cin + ci) * cout + co];
        }
  }
  return res;
}

SparseTensor<double> random_tensor(std::mt19937_64& rng, int n_events, int box, int max_sites, int channels,
                                   int stride) {
  std::uniform_int_distribution<int> pos(0, box - 1), count(1, max_sites);
  std::normal_distribution<double> normal;
  std::vector<EventSites<double>> events;
  for (int e = 0; e < n_events; ++e) {
    std::set<Site3> s;
    const int want = count(rng);
    while (static_cast<int>(s.size()) < want) s.insert({pos(rng) * stride, pos(rng) * stride, pos(rng) * stride});
    EventSites<double> ev;
    ev.sites.assign(s.begin(), s.end());
    ev.features = Matrix<double>(ev.sites.size(), static_cast<std::size_t>(channels));
    for (auto& v : ev.features.data) v = normal(rng);
    events.push_back(std::move(ev));
  }
  auto t = batch(std::span<const EventSites<double>>(events));
  t.tensor_stride = stride;
  return t;
}

Outcome sparse_dense() {
  std::mt19937_64 rng(99);
  std::normal_distribution<double> normal;
  double worst = 0;
  std::size_t coord_mismatch = 0;
  struct Case {
    int k, s;
  };
  const std::vector<Case> cases{{3, 1}, {3, 2}, {1, 1}};
  for (int ev = 0; ev < 100; ++ev) {
    auto t = random_tensor(rng, 1, 7, 120, 3, 1);
    for (const auto& cs : cases) {
      const int cin = 3, cout = 4, vol = cs.k * cs.k * cs.k;
      ConvParams<double> p(cin, cout, vol);
      for (auto& w : p.weights) w = normal(rng);
      const auto km = build_kernel_map(t, cs.k, cs.s);
      const auto y = sparse_conv_fwd(t, p, km);
      const auto expect_coords = oracle_out_coords(keys_of(t), 1, cs.s);
      if (keys_of(y) != expect_coords) {
        ++coord_mismatch;
        continue;
      }
      const auto d = dense_conv(keys_of(t), t.features, expect_coords, p.weights, cin, cout, cs.k);
      for (std::size_t i = 0; i < d.data.size(); ++i) worst = std::max(worst, std::abs(d.data[i] - y.features.data[i]));
    }
  }

  // kernel maps against an O(N^2 * 27) scan
  struct MapCase {
    int k, s, t;
    bool pool;
  };
  const std::vector<MapCase> maps{{3, 1, 1, false}, {3, 2, 1, false}, {3, 3, 2, false},
                                  {1, 2, 4, false}, {3, 2, 8, false}, {2, 2, 2, true}};
  std::size_t map_mismatch = 0, total_pairs = 0;
  for (const auto& mc : maps) {
    for (int rep = 0; rep < 3; ++rep) {
      auto t = random_tensor(rng, 2, 13, 100, 1, mc.t);
      for (auto& c : t.coords) {
        c.i -= 6 * mc.t;
        c.j -= 6 * mc.t;
        c.k -= 6 * mc.t;
      }
      if (t.size() > 200) continue;
      const auto km = mc.pool ? pool_map(t) : build_kernel_map(t, mc.k, mc.s);
      const auto in = keys_of(t);
      const auto out = oracle_out_coords(in, mc.t, mc.s);
      std::vector<Key> got_out;
      for (const auto& c : km.out_coords) got_out.push_back({c.b, c.i, c.j, c.k});
      if (got_out != out) {
        ++map_mismatch;
        continue;
      }
      std::vector<Site3> offs;
      const int lo = mc.pool ? 0 : -(mc.k / 2), hi = mc.pool ? 1 : mc.k / 2;
      for (int a = lo; a <= hi; ++a)
        for (int b = lo; b <= hi; ++b)
          for (int c = lo; c <= hi; ++c) offs.push_back({a, b, c});
      if (km.offsets != offs) {
        ++map_mismatch;
        continue;
      }
      for (std::size_t o = 0; o < offs.size(); ++o) {
        std::set<std::pair<int, int>> expect, got;
        for (std::size_t i = 0; i < in.size(); ++i)
          for (std::size_t j = 0; j < out.size(); ++j)
            if (in[i][0] == out[j][0] && in[i][1] == out[j][1] + offs[o][0] * mc.t &&
                in[i][2] == out[j][2] + offs[o][1] * mc.t && in[i][3] == out[j][3] + offs[o][2] * mc.t)
              expect.insert({static_cast<int>(i), static_cast<int>(j)});
        for (const auto& pr : km.pairs[o]) got.insert({pr.in, pr.out});
        if (got != expect || got.size() != km.pairs[o].size()) ++map_mismatch;
        total_pairs += expect.size();
      }
    }
  }
  const bool ok = worst <= 1e-6 && coord_mismatch == 0 && map_mismatch == 0;
  return {ok, "100 events x 3 conv cases, max abs diff " + f("%.2e", worst) + " (<= 1e-6), " +
                  std::to_string(coord_mismatch) + " output-coordinate mismatches; kernel maps: " +
                  std::to_string(map_mismatch) + " mismatches over " + std::to_string(total_pairs) + " pairs"};
}

// ---------------------------------------------------------------------------
// 3 and 4 share one trained model

struct Desk {
  GenConfig gen;
  ArchConfig arch = ArchConfig::small();
  OptimConfig optim;
  std::vector<GadgetEvent> gadget;
  ModelState<float> rand_model, trained;
  TrainResult<float> result;
  double train_secs = 0;
  bool ready = false;
};

Desk g_desk;

Outcome pretraining() {
  auto& d = g_desk;
  d.gen.seed = 7;
  d.arch.seed = 3;
  d.optim.seed = 3;
  const auto t0 = Clock::now();
  d.gadget = gen_gadget(d.gen, 2000);
  Dataset<float> all;
  std::size_t excluded = 0;
  for (const auto& e : d.gadget) {
    if (e.gate == GateLabel::Excluded) {
      ++excluded;
      continue;
    }
    all.events.push_back(event_sites<float>(e.points, d.arch.input));
    all.labels.push_back(static_cast<int>(e.gate));
  }
  const auto split = stratified_split(all.labels, d.optim.val_fraction, d.optim.seed);
  const auto train = all.subset(split.train), val = all.subset(split.val);
  d.rand_model = init_model<float>(d.arch);
  double peak = 0;
  d.result = train_loop(d.rand_model, train, val, d.optim, [&](const EpochRecord& r) {
    peak = std::max(peak, r.accuracy);
    std::printf("  epoch %2d  val_loss %.4f  val_acc %.4f\n", r.epoch, r.val_loss, r.accuracy);
    std::fflush(stdout);
  });
  d.train_secs = seconds_since(t0);
  d.trained = d.result.best;
  d.ready = true;
  const double acc = d.result.best_metrics.accuracy;
  const bool ok = acc >= 0.98 && static_cast<int>(d.result.history.epochs.size()) <= 15 && d.train_secs < 600;
  return {ok, "2000 events (" + std::to_string(excluded) + " excluded by the gate), " +
                  std::to_string(d.result.history.epochs.size()) + " epochs, selected epoch " +
                  std::to_string(d.result.history.best_epoch) + " val accuracy " + f("%.4f", acc) +
                  " (>= 0.98; peak " + f("%.4f", peak) + "), macro-F1 " + f("%.4f", d.result.best_metrics.macro_f1) +
                  ", " + f("%.0f", d.train_secs) + "s incl. generation (< 600s)"};
}

Outcome probe_ordering() {
  auto& d = g_desk;
  if (!d.ready) return {false, "needs the criterion-3 model"};
  std::vector<EventSites<float>> gsites;
  std::vector<int> glabels;
  for (const auto& e : d.gadget) {
    gsites.push_back(event_sites<float>(e.points, d.arch.input));
    glabels.push_back(static_cast<int>(e.cls));
  }
  const auto attpc = gen_attpc(d.gen, 2000);
  std::vector<EventSites<float>> asites;
  std::vector<int> alabels;
  for (const auto& e : attpc) {
    asites.push_back(event_sites<float>(e.points, d.arch.input));
    alabels.push_back(e.group_label());
  }
  std::vector<EmbeddingSet> sets;
  auto add = [&](const ModelState<float>& m, const std::string& tag, const std::string& task,
                 const std::vector<EventSites<float>>& sites, const std::vector<int>& labels) {
    EmbeddingSet s;
    s.X = embed<float>(m, sites);
    s.labels = labels;
    s.num_classes = 3;
    s.task = task;
    s.tag = tag;
    sets.push_back(std::move(s));
  };
  add(d.rand_model, "rand", "gadget-3class", gsites, glabels);
  add(d.trained, "train", "gadget-3class", gsites, glabels);
  add(d.rand_model, "rand", "attpc-tracks", asites, alabels);
  add(d.trained, "train", "attpc-tracks", asites, alabels);
  const auto t0 = Clock::now();
  const auto rep = run_probe_suite(sets, ProbeConfig{});
  const double secs = seconds_since(t0);

  bool ok = true;
  std::string detail;
  for (std::size_t task = 0; task < 2; ++task) {
    const auto& r = rep.cells[2 * task].probe;
    const auto& t = rep.cells[2 * task + 1].probe;
    const auto& n = rep.cells[2 * task].naive;
    const std::array<std::array<double, 3>, 3> m{{{t.accuracy, r.accuracy, n.accuracy},
                                                  {t.macro_f1, r.macro_f1, n.macro_f1},
                                                  {t.weighted_f1, r.weighted_f1, n.weighted_f1}}};
    for (const auto& row : m) ok = ok && row[0] >= row[1] && row[1] >= row[2];
    detail += rep.cells[2 * task].task + " acc train/rand/naive " + f("%.3f", t.accuracy) + "/" +
              f("%.3f", r.accuracy) + "/" + f("%.3f", n.accuracy) + ", macro-F1 " + f("%.3f", t.macro_f1) + "/" +
              f("%.3f", r.macro_f1) + "/" + f("%.3f", n.macro_f1) + "; ";
    if (task == 0) {
      ok = ok && t.accuracy - r.accuracy >= 0.05;
      detail += "gap " + f("%.3f", t.accuracy - r.accuracy) + " (>= 0.05); ";
    }
  }
  detail += "probes " + f("%.0f", secs) + "s";
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 5

Outcome naive_arithmetic() {
  std::vector<int> train, test;
  for (int k = 0; k < 3; ++k) {
    train.insert(train.end(), 200, k);
    test.insert(test.end(), 50, k);
  }
  const auto m = naive_baseline(train, test, 3);
  const double acc2 = std::round(m.accuracy * 100) / 100, f12 = std::round(m.macro_f1 * 100) / 100;
  const bool ok = acc2 == 0.33 && f12 == 0.17;
  return {ok, "balanced 3-class mode predictor: accuracy " + f("%.4f", m.accuracy) + " -> " + f("%.2f", acc2) +
                  " (0.33), macro-F1 " + f("%.4f", m.macro_f1) + " -> " + f("%.2f", f12) + " (0.17)"};
}

// ---------------------------------------------------------------------------
// 6

Outcome schedule_optimizer() {
  const OptimConfig oc;
  const double lr0 = cosine_lr(0, oc.lr0, oc.t_max), lr13 = cosine_lr(13, oc.lr0, oc.t_max);
  bool ok = lr0 == 5e-4 && lr13 == 0.0;

  // two scalar Adam steps vs the textbook recurrence
  const AdamHyper h{0.9, 0.999, 1e-8, 1e-4};
  std::vector<double> p{0.7}, g{0.3};
  AdamState<double> st;
  std::vector<double>* pp[] = {&p};
  const std::vector<double>* gp[] = {&g};
  double x = 0.7, m = 0, v = 0;
  const double grads[2] = {0.3, -1.1};
  bool adam_exact = true;
  for (int t = 1; t <= 2; ++t) {
    g[0] = grads[t - 1];
    adam_step<double>(pp, gp, st, 1e-3, h);
    const double gt = grads[t - 1] + h.weight_decay * x;
    m = h.beta1 * m + (1 - h.beta1) * gt;
    v = h.beta2 * v + (1 - h.beta2) * gt * gt;
    const double mh = m / (1 - std::pow(h.beta1, t)), vh = v / (1 - std::pow(h.beta2, t));
    x -= 1e-3 * mh / (std::sqrt(vh) + h.eps);
    adam_exact = adam_exact && p[0] == x;
  }
  ok = ok && adam_exact;

  // clipping on random gradient sets, float32 and float64
  std::mt19937_64 rng(5);
  std::normal_distribution<double> normal;
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::pow(10.0, trial % 7 - 1);
    std::vector<std::vector<float>> gf(3);
    std::vector<std::vector<double>> gd(3);
    for (std::size_t i = 0; i < 3; ++i)
      for (int j = 0; j < 50 + trial; ++j) {
        const double z = normal(rng) * scale;
        gf[i].push_back(static_cast<float>(z));
        gd[i].push_back(z);
      }
    std::vector<std::vector<float>*> pf;
    std::vector<std::vector<double>*> pd;
    for (std::size_t i = 0; i < 3; ++i) {
      pf.push_back(&gf[i]);
      pd.push_back(&gd[i]);
    }
    clip_grad_norm<float>(pf, 1.0);
    clip_grad_norm<double>(pd, 1.0);
    double sf = 0, sd = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      for (float a : gf[i]) sf += static_cast<double>(a) * a;
      for (double a : gd[i]) sd += a * a;
    }
    worst = std::max({worst, std::sqrt(sf), std::sqrt(sd)});
  }
  ok = ok && worst <= 1.0;
  return {ok, "lr(0) = " + f("%.6g", lr0) + ", lr(13) = " + f("%.3g", lr13) + "; two-step Adam " +
                  (adam_exact ? "bit-identical" : "differs") + " to the recurrence; max post-clip norm " +
                  f("%.17g", worst) + " (<= 1.0) over 400 clips"};
}

// ---------------------------------------------------------------------------
// 7

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool cli_ok(std::vector<std::string> args, std::string& log) {
  std::ostringstream out, err;
  const int rc = run_cli(args, out, err);
  if (rc != 0) log += "'" + args[0] + "' exit " + std::to_string(rc) + ": " + err.str();
  return rc == 0;
}

// gen -> train -> embed -> probe; returns false on any non-zero exit.
bool pipeline(const fs::path& dir, int threads, std::string& log) {
  fs::remove_all(dir);
  fs::create_directories(dir / "gadget");
  fs::create_directories(dir / "attpc");
  const std::string th = std::to_string(threads);
  auto p = [&](const char* name) { return (dir / name).string(); };
  const std::vector<std::string> common{"--threads", th, "-q"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), common.begin(), common.end());
    return a;
  };
  return cli_ok(with({"gen", "gadget", "-n", "240", "--seed", "11", "-o", p("g.tpce")}), log) &&
         cli_ok(with({"gen", "attpc", "-n", "240", "--seed", "11", "-o", p("a.tpce")}), log) &&
         cli_ok(with({"train", "--data", p("g.tpce"), "-o", p("rand.ckpt"), "--init", "rand", "--epochs", "0",
                      "--seed", "4"}),
                log) &&
         cli_ok(with({"train", "--data", p("g.tpce"), "-o", p("train.ckpt"), "--epochs", "2", "--seed", "4"}), log) &&
         cli_ok(with({"embed", "--checkpoint", p("train.ckpt"), "--data", p("g.tpce"), "-o", p("g.emb.csv")}), log) &&
         cli_ok(with({"embed", "--checkpoint", p("train.ckpt"), "--data", p("a.tpce"), "-o", p("a.emb.csv")}), log) &&
         cli_ok(with({"probe", "--task", "gadget-3class", "--checkpoint", p("rand.ckpt"), "--checkpoint",
                      p("train.ckpt"), "--data", p("g.tpce"), "-o", p("gadget"), "--set", "probe.max_iter=5000"}),
                log) &&
         cli_ok(with({"probe", "--task", "attpc-tracks", "--embeddings", "train=" + p("a.emb.csv"), "-o", p("attpc"),
                      "--set", "probe.max_iter=5000"}),
                log);
}

std::map<std::string, std::string> files_of(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return m;
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "stpc_acceptance_determinism";
  std::string log;
  const bool ran = pipeline(root / "serial_a", 1, log) && pipeline(root / "serial_b", 1, log) &&
                   pipeline(root / "threaded", 4, log);
  if (!ran) return {false, "pipeline failed: " + log};
  const auto a = files_of(root / "serial_a"), b = files_of(root / "serial_b"), c = files_of(root / "threaded");
  std::size_t diff_serial = 0, diff_reports = 0, reports = 0;
  for (const auto& [name, bytes] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != bytes) ++diff_serial;
  }
  if (a.size() != b.size()) ++diff_serial;
  for (const auto& [name, bytes] : a) {
    if (name.find("report.") == std::string::npos) continue;
    ++reports;
    const auto it = c.find(name);
    if (it == c.end() || it->second != bytes) ++diff_reports;
  }
  fs::remove_all(root);
  const bool ok = diff_serial == 0 && diff_reports == 0 && reports == 4;
  return {ok, std::to_string(a.size()) + " files from two --threads 1 runs, " + std::to_string(diff_serial) +
                  " differ; " + std::to_string(reports) + " reports vs --threads 4, " + std::to_string(diff_reports) +
                  " differ"};
}

// ---------------------------------------------------------------------------
// 8

Outcome variable_length() {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  const ArchConfig arch = ArchConfig::small();
  const double v = arch.input.voxel_size;

  std::vector<Point4> one{{0.3, -0.2, 0.1, 5.0}};
  std::set<Site3> used;
  std::vector<Point4> big;
  while (big.size() < 10000) {
    const Site3 s{static_cast<int>(u(rng) * 40), static_cast<int>(u(rng) * 40), static_cast<int>(u(rng) * 40)};
    if (!used.insert(s).second) continue;
    big.push_back({(s[0] + 0.5) * v, (s[1] + 0.5) * v, (s[2] + 0.5) * v, 0.1 + u(rng)});
  }
  Dataset<float> data;
  data.events = {event_sites<float>(one, arch.input), event_sites<float>(big, arch.input)};
  data.labels = {0, 1};
  const auto b = batch(std::span<const EventSites<float>>(data.events));
  const bool no_padding = data.events[0].sites.size() == 1 && data.events[1].sites.size() == 10000 &&
                          b.size() == 10001;

  OptimConfig oc;
  oc.epochs = 2;
  oc.batch_size = 2;
  auto model = init_model<float>(arch);
  const auto res = train_loop(model, data, data, oc);
  const auto both = embed<float>(res.best, data.events, 2);
  const auto solo0 = embed<float>(res.best, std::span(data.events).subspan(0, 1));
  const auto solo1 = embed<float>(res.best, std::span(data.events).subspan(1, 1));
  bool finite = true;
  for (double x : both.data) finite = finite && std::isfinite(x);
  const bool independent = both.row(0).size() == solo0.row(0).size() &&
                           std::equal(solo0.data.begin(), solo0.data.end(), both.data.begin()) &&
                           std::equal(solo1.data.begin(), solo1.data.end(), both.data.begin() + both.cols);
  const bool ok = no_padding && both.rows == 2 && finite && independent &&
                  std::isfinite(res.history.epochs.back().train_loss);
  return {ok, "batch of 1 + 10000 sites -> " + std::to_string(b.size()) + " rows; trained " +
                  std::to_string(res.history.epochs.size()) + " epochs (loss " +
                  f("%.4f", res.history.epochs.back().train_loss) + "); embeddings " + std::to_string(both.rows) +
                  " x " + std::to_string(both.cols) + (finite ? " finite" : " non-finite") +
                  (independent ? ", identical to single-event embedding" : ", differ from single-event embedding")};
}

// ---------------------------------------------------------------------------
// 9

Outcome pca_properties() {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> normal;
  const std::size_t n = 300, d = 12;
  Matrix<double> X(n, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) X(r, c) = normal(rng) * (1.0 + 0.7 * static_cast<double>(d - c)) + 3.0;
  const auto pca = fit_pca(X);

  double ortho = 0;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += pca.components(a, c) * pca.components(b, c);
      ortho = std::max(ortho, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  const bool descending = pca.explained_variance[0] >= pca.explained_variance[1] && pca.explained_variance[1] >= 0;

  Matrix<double> Xs = X;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) Xs(r, c) += 17.0 - 2.5 * static_cast<double>(c);
  const auto Y = project(pca, X), Ys = project(fit_pca(Xs), Xs);
  double shift = 0;
  for (std::size_t i = 0; i < Y.data.size(); ++i) shift = std::max(shift, std::abs(Y.data[i] - Ys.data[i]));

  // data on a 2-D affine plane is reproduced exactly from its projection
  Matrix<double> P(n, d);
  std::vector<double> u(d), w(d), o(d);
  for (std::size_t c = 0; c < d; ++c) {
    u[c] = normal(rng);
    w[c] = normal(rng);
    o[c] = normal(rng) * 4;
  }
  for (std::size_t r = 0; r < n; ++r) {
    const double s = normal(rng) * 3, t = normal(rng);
    for (std::size_t c = 0; c < d; ++c) P(r, c) = o[c] + s * u[c] + t * w[c];
  }
  const auto pp = fit_pca(P);
  const auto R = back_project(pp, project(pp, P));
  double recon = 0;
  for (std::size_t i = 0; i < P.data.size(); ++i) recon = std::max(recon, std::abs(R.data[i] - P.data[i]));

  const bool ok = ortho <= 1e-10 && descending && shift <= 1e-8 && recon <= 1e-8;
  return {ok, "orthonormality err " + f("%.1e", ortho) + " (<= 1e-10), variances " +
                  f("%.4g", pca.explained_variance[0]) + " >= " + f("%.4g", pca.explained_variance[1]) +
                  ", translation err " + f("%.1e", shift) + " (<= 1e-8), rank-2 reconstruction err " +
                  f("%.1e", recon) + " (<= 1e-8)"};
}

}  // namespace

int main() {
  std::printf("acceptance suite, %d OpenMP threads\n", omp_get_max_threads());
  const auto t0 = Clock::now();
  run(1, "gradient correctness", gradients);
  run(2, "sparse-dense oracle equivalence", sparse_dense);
  run(3, "desk-scale pretraining", pretraining);
  run(4, "probe ordering", probe_ordering);
  run(5, "naive-baseline arithmetic", naive_arithmetic);
  run(6, "schedule and optimizer contracts", schedule_optimizer);
  run(7, "determinism", determinism);
  run(8, "variable-length batches", variable_length);
  run(9, "PCA properties", pca_properties);
  std::printf("%d/9 criteria passed in %.0fs\n", 9 - g_failed, seconds_since(t0));
  return g_failed == 0 ? 0 : 1;
}
