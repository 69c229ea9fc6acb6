#include "stpc/cli.hpp"

#include <omp.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "stpc/analysis.hpp"
#include "stpc/config.hpp"
#include "stpc/events.hpp"
#include "stpc/io_util.hpp"
#include "stpc/layers.hpp"
#include "stpc/selftest.hpp"

namespace stpc {

namespace {

namespace fs = std::filesystem;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

// Options shared by every subcommand.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  int threads = -1;
  std::string precision;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_precision) {
  cmd->add_option("--config", c.config_file, "Config file ([run] [gen] [arch] [optim] [probe] sections)");
  cmd->add_option("--set", c.overrides, "Override one key: section.key=value (repeatable)");
  cmd->add_option("--threads", c.threads, "Worker threads (default: all cores; 1 = serial baseline)")
      ->check(CLI::NonNegativeNumber);
  if (with_precision)
    cmd->add_option("--precision", c.precision, "Numeric mode")->check(CLI::IsMember({"float32", "float64"}));
  cmd->add_flag("-q,--quiet", c.quiet, "Only print errors and final results");
}

// file < --set < dedicated flags, all applied before any work starts.
void resolve(ConfigStore& store, const Common& c, const std::map<std::string, std::string>& flags) {
  if (!c.config_file.empty()) store.load_file(c.config_file);
  for (const auto& o : c.overrides) store.apply_override(o);
  for (const auto& [k, v] : flags) store.set(k, v, ConfigSource::Cli);
  if (c.threads >= 0) store.set("run.threads", std::to_string(c.threads), ConfigSource::Cli);
  if (!c.precision.empty()) store.set("run.precision", c.precision, ConfigSource::Cli);
  if (c.quiet) store.set("run.verbosity", "0", ConfigSource::Cli);
  store.config().validate();
  const int t = store.config().threads;
  omp_set_num_threads(t > 0 ? t : omp_get_num_procs());
}

void print_config(const ConfigStore& store, std::ostream& out) {
  if (store.config().verbosity > 0) out << "config:\n" << store.describe();
}

fs::path in_data_dir(const ConfigStore& store, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || path.has_parent_path() ? path : store.config().data_dir / path;
}

void require_input(const fs::path& p) {
  if (!fs::is_regular_file(p)) throw IoError("cannot read " + p.string() + ": no such file");
}

void require_output_dir(const fs::path& p) {
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  if (!fs::is_directory(dir)) throw IoError("output directory " + dir.string() + " does not exist");
}

void write_snapshot(const ConfigStore& store, const fs::path& path) {
  atomic_write(path, store.snapshot());
}

fs::path sidecar(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

// ---------------------------------------------------------------------------
// gen

struct GenArgs {
  Common common;
  std::string detector;
  long long n = -1;
  std::string out;
  std::string seed;
  bool csv = false;
};

int cmd_gen(const GenArgs& a, std::ostream& out) {
  ConfigStore store;
  std::map<std::string, std::string> flags;
  if (!a.seed.empty()) flags["gen.seed"] = a.seed;
  resolve(store, a.common, flags);
  if (a.n < 1) throw UsageError("gen: -n must be >= 1");
  const fs::path path = in_data_dir(store, a.out.empty() ? a.detector + ".tpce" : a.out);
  require_output_dir(path);
  print_config(store, out);
  const auto& g = store.config().gen;
  const auto n = static_cast<std::size_t>(a.n);

  std::size_t points = 0;
  if (a.detector == "gadget") {
    const auto events = gen_gadget(g, n);
    std::array<std::size_t, 3> cls{}, gate{};
    for (const auto& e : events) {
      points += e.points.size();
      ++cls[static_cast<int>(e.cls)];
      ++gate[static_cast<int>(e.gate)];
    }
    write_events(path, events);
    if (a.csv) write_events_csv(sidecar(path, ".csv"), events);
    out << "wrote " << path.string() << ": " << n << " events, " << points << " points\n"
        << "  class mix: p800=" << cls[0] << " p1600=" << cls[1] << " alpha2000=" << cls[2] << "\n"
        << "  gate: proton=" << gate[0] << " alpha=" << gate[1] << " excluded=" << gate[2] << "\n";
  } else {
    const auto events = gen_attpc(g, n);
    std::vector<std::size_t> tracks(static_cast<std::size_t>(g.attpc_max_tracks) + 1, 0);
    std::array<std::size_t, 3> groups{};
    for (const auto& e : events) {
      points += e.points.size();
      ++tracks[static_cast<std::size_t>(e.n_tracks)];
      ++groups[static_cast<std::size_t>(e.group_label())];
    }
    write_events(path, events);
    if (a.csv) write_events_csv(sidecar(path, ".csv"), events);
    out << "wrote " << path.string() << ": " << n << " events, " << points << " points\n  tracks:";
    for (std::size_t k = 0; k < tracks.size(); ++k) out << ' ' << k << '=' << tracks[k];
    out << "\n  groups: {0,1,2}=" << groups[0] << " {3}=" << groups[1] << " {4,5}=" << groups[2] << "\n";
  }
  write_snapshot(store, sidecar(path, ".config.ini"));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  Common common;
  std::string data, out, history, init = "rand", profile, seed;
  int epochs = -1;
};

template <class T>
int train_impl(const ConfigStore& store, const TrainArgs& a, const fs::path& data, const fs::path& ckpt,
               const fs::path& history, std::ostream& out) {
  const auto& cfg = store.config();
  const bool verbose = cfg.verbosity > 0;
  const auto events = read_gadget_events(data);

  Dataset<T> all;
  std::size_t excluded = 0;
  for (const auto& e : events) {
    if (e.gate == GateLabel::Excluded) {
      ++excluded;
      continue;
    }
    all.events.push_back(event_sites<T>(e.points, cfg.arch.input));
    all.labels.push_back(static_cast<int>(e.gate));
  }
  out << "events: " << events.size() << " read, " << excluded << " excluded by the gate, " << all.size()
      << " used\n";
  if (cfg.arch.head_classes != 2) throw TaskError("train: the gated task is binary; arch.head_classes must be 2");

  auto model = init_model<T>(cfg.arch, InitMode::Random);
  if (cfg.optim.epochs == 0) {
    save_checkpoint(model, ckpt, a.init);
    atomic_write(history, history_csv(TrainHistory{}));
    write_snapshot(store, sidecar(ckpt, ".config.ini"));
    out << "wrote untrained checkpoint " << ckpt.string() << " (tag " << a.init << ")\n";
    return kExitOk;
  }

  const auto split = stratified_split(all.labels, cfg.optim.val_fraction, cfg.optim.seed);
  const auto train = all.subset(split.train), val = all.subset(split.val);
  out << "split: " << train.size() << " train, " << val.size() << " validation\n";
  const auto t0 = std::chrono::steady_clock::now();
  auto result = train_loop(std::move(model), train, val, cfg.optim, [&](const EpochRecord& r) {
    if (!verbose) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out << "epoch " << r.epoch << "  lr " << fmt("%.3e", r.lr) << "  train_loss " << fmt("%.4f", r.train_loss)
        << "  val_loss " << fmt("%.4f", r.val_loss) << "  acc " << fmt("%.4f", r.accuracy) << "  macro_f1 "
        << fmt("%.4f", r.macro_f1) << "  " << fmt("%.1f", s) << "s\n"
        << std::flush;
  });

  save_checkpoint(result.best, ckpt, "train");
  atomic_write(history, history_csv(result.history));
  write_snapshot(store, sidecar(ckpt, ".config.ini"));
  const auto& m = result.best_metrics;
  out << "best epoch " << result.history.best_epoch << ": val_loss " << fmt("%.4f", result.history.best_val_loss)
      << "  accuracy " << fmt("%.4f", m.accuracy) << "  macro_f1 " << fmt("%.4f", m.macro_f1) << "  weighted_f1 "
      << fmt("%.4f", m.weighted_f1) << "\n"
      << "wrote " << ckpt.string() << " and " << history.string() << "\n";
  return kExitOk;
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  ConfigStore store;
  std::map<std::string, std::string> flags;
  if (a.profile == "full") flags["arch.stage_widths"] = "64,128,256,512";
  if (a.profile == "small") flags["arch.stage_widths"] = "16,32,64,128";
  if (a.epochs >= 0) flags["optim.epochs"] = std::to_string(a.epochs);
  if (!a.seed.empty()) flags["arch.seed"] = flags["optim.seed"] = a.seed;
  resolve(store, a.common, flags);
  const fs::path data = in_data_dir(store, a.data);
  const fs::path ckpt(a.out);
  const fs::path history = a.history.empty() ? sidecar(ckpt, ".history.csv") : fs::path(a.history);
  require_input(data);
  require_output_dir(ckpt);
  require_output_dir(history);
  if (peek_detector(data) != Detector::Gadget)
    throw TaskError("train: " + data.string() + " holds active-target events; training needs gated compact-TPC events");
  print_config(store, out);
  if (store.config().precision == Precision::Float64) return train_impl<double>(store, a, data, ckpt, history, out);
  return train_impl<float>(store, a, data, ckpt, history, out);
}

// ---------------------------------------------------------------------------
// embed / probe helpers

struct LabeledEvents {
  Detector detector = Detector::Gadget;
  std::vector<std::vector<Point4>> points;
  std::vector<int> labels;  // gadget: source class; attpc: track count
};

LabeledEvents load_labeled(const fs::path& path) {
  LabeledEvents le;
  le.detector = peek_detector(path);
  if (le.detector == Detector::Gadget) {
    for (auto& e : read_gadget_events(path)) {
      le.labels.push_back(static_cast<int>(e.cls));
      le.points.push_back(std::move(e.points));
    }
  } else {
    for (auto& e : read_attpc_events(path)) {
      le.labels.push_back(e.n_tracks);
      le.points.push_back(std::move(e.points));
    }
  }
  return le;
}

template <class T>
Matrix<double> embed_events(const fs::path& ckpt, const LabeledEvents& le) {
  const auto model = load_checkpoint<T>(ckpt);
  std::vector<EventSites<T>> sites;
  sites.reserve(le.points.size());
  for (const auto& p : le.points) sites.push_back(event_sites<T>(p, model.config.input));
  return embed<T>(model, sites);
}

Matrix<double> embed_with(const fs::path& ckpt, const LabeledEvents& le) {
  if (read_checkpoint_info(ckpt).precision == Precision::Float64) return embed_events<double>(ckpt, le);
  return embed_events<float>(ckpt, le);
}

std::string embeddings_csv(const Matrix<double>& X, std::span<const int> labels) {
  std::string s = "event_id";
  for (std::size_t c = 0; c < X.cols; ++c) s += ",e" + std::to_string(c);
  s += ",label\n";
  char buf[32];
  for (std::size_t r = 0; r < X.rows; ++r) {
    s += std::to_string(r);
    for (std::size_t c = 0; c < X.cols; ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", X(r, c));
      s += buf;
    }
    s += ',' + std::to_string(labels[r]) + '\n';
  }
  return s;
}

// Reads the embed output back; labels are the raw per-event labels.
std::pair<Matrix<double>, std::vector<int>> read_embeddings_csv(const fs::path& path) {
  require_input(path);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("event_id", 0) != 0)
    throw FormatError(path.string() + ": missing embeddings header");
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  if (cols < 2) throw FormatError(path.string() + ": no embedding columns");
  const std::size_t d = cols - 1;
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != cols + 1)
      throw FormatError(path.string() + ": line " + std::to_string(lineno) + " has " +
                        std::to_string(cells.size()) + " fields, expected " + std::to_string(cols + 1));
    try {
      for (std::size_t c = 1; c <= d; ++c) values.push_back(std::stod(cells[c]));
      labels.push_back(std::stoi(cells[cols]));
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": unparsable value on line " + std::to_string(lineno));
    }
  }
  Matrix<double> X(labels.size(), d);
  X.data = std::move(values);
  return {std::move(X), std::move(labels)};
}

// "TAG=PATH" or "PATH".
std::pair<std::string, std::string> split_tagged(const std::string& s) {
  const auto eq = s.find('=');
  if (eq == std::string::npos) return {"", s};
  return {s.substr(0, eq), s.substr(eq + 1)};
}

// ---------------------------------------------------------------------------
// embed

struct EmbedArgs {
  Common common;
  std::string checkpoint, data, out;
};

int cmd_embed(const EmbedArgs& a, std::ostream& out) {
  ConfigStore store;
  resolve(store, a.common, {});
  const fs::path ckpt(a.checkpoint), data = in_data_dir(store, a.data), dst(a.out);
  require_input(ckpt);
  require_input(data);
  require_output_dir(dst);
  print_config(store, out);
  const auto info = read_checkpoint_info(ckpt);
  const auto le = load_labeled(data);
  const auto X = embed_with(ckpt, le);
  atomic_write(dst, embeddings_csv(X, le.labels));
  write_snapshot(store, sidecar(dst, ".config.ini"));
  out << "wrote " << dst.string() << ": " << X.rows << " events x " << X.cols << " dims (checkpoint tag '"
      << info.tag << "')\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  Common common;
  std::string task, data, out;
  std::vector<std::string> embeddings, checkpoints;
};

int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  ConfigStore store;
  resolve(store, a.common, {});
  if (a.embeddings.empty() == a.checkpoints.empty())
    throw UsageError("probe: give either --embeddings or --checkpoint (with --data)");
  if (!a.checkpoints.empty() && a.data.empty()) throw UsageError("probe: --checkpoint needs --data");
  const fs::path dir(a.out);
  if (!fs::is_directory(dir)) throw IoError("output directory " + dir.string() + " does not exist");
  const bool tracks = a.task == "attpc-tracks";
  const Detector want = tracks ? Detector::Attpc : Detector::Gadget;

  auto task_labels = [&](std::vector<int> raw) {
    for (auto& l : raw) {
      if (tracks) {
        if (l < 0 || l > 5) throw TaskError("probe: track count " + std::to_string(l) + " outside 0..5");
        l = track_group(l);
      } else if (l < 0 || l > 2) {
        throw TaskError("probe: class label " + std::to_string(l) + " outside 0..2");
      }
    }
    return raw;
  };

  std::vector<EmbeddingSet> sets;
  std::set<std::string> tags;
  auto push = [&](std::string tag, Matrix<double> X, std::vector<int> labels) {
    if (!tags.insert(tag).second) throw UsageError("probe: duplicate predictor tag '" + tag + "'");
    if (tag == "naive") throw UsageError("probe: 'naive' is reserved for the baseline");
    EmbeddingSet s;
    s.X = std::move(X);
    s.labels = task_labels(std::move(labels));
    s.num_classes = 3;
    s.task = a.task;
    s.tag = std::move(tag);
    sets.push_back(std::move(s));
  };

  if (!a.checkpoints.empty()) {
    const fs::path data = in_data_dir(store, a.data);
    require_input(data);
    for (const auto& c : a.checkpoints) require_input(split_tagged(c).second);
    print_config(store, out);
    if (peek_detector(data) != want)
      throw TaskError("probe: task " + a.task + " does not match the detector of " + data.string());
    const auto le = load_labeled(data);
    for (const auto& c : a.checkpoints) {
      auto [tag, path] = split_tagged(c);
      if (tag.empty()) tag = read_checkpoint_info(path).tag;
      if (tag.empty()) tag = fs::path(path).stem().string();
      push(tag, embed_with(path, le), le.labels);
    }
  } else {
    for (const auto& e : a.embeddings) require_input(split_tagged(e).second);
    print_config(store, out);
    for (const auto& e : a.embeddings) {
      auto [tag, path] = split_tagged(e);
      if (tag.empty()) tag = fs::path(path).stem().string();
      auto [X, labels] = read_embeddings_csv(path);
      push(tag, std::move(X), std::move(labels));
    }
  }

  const auto report = run_probe_suite(sets, store.config().probe);
  atomic_write(dir / "report.json", report_json(report));
  atomic_write(dir / "report.csv", report_csv(report));
  for (const auto& cell : report.cells) {
    atomic_write(dir / ("pca_" + cell.tag + ".csv"), pca_csv(cell));
    atomic_write(dir / ("pca_" + cell.tag + ".svg"), pca_svg(cell));
  }
  write_snapshot(store, dir / "config.ini");
  out << report_csv(report) << "wrote " << (dir / "report.json").string() << " and "
      << (dir / "report.csv").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// selftest

struct SelftestArgs {
  Common common;
  std::uint64_t seed = 2024;
  bool fault = false;
};

int cmd_selftest(const SelftestArgs& a, std::ostream& out) {
  ConfigStore store;
  resolve(store, a.common, {});
  testing::set_backward_fault(a.fault);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CheckResult> results;
  try {
    results = run_selftest(a.seed);
  } catch (...) {
    testing::set_backward_fault(false);
    throw;
  }
  testing::set_backward_fault(false);
  std::vector<std::string> failed;
  for (const auto& r : results) {
    out << (r.pass ? "PASS " : "FAIL ") << r.name << "  error " << fmt("%.3e", r.error) << "  tol "
        << fmt("%.0e", r.tolerance);
    if (!r.detail.empty()) out << "  " << r.detail;
    out << "\n";
    if (!r.pass) failed.push_back(r.name);
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << results.size() - failed.size() << "/" << results.size() << " checks passed in " << fmt("%.1f", s)
      << "s\n";
  if (failed.empty()) return kExitOk;
  out << "failed:";
  for (const auto& f : failed) out << ' ' << f;
  out << "\n";
  return kExitCheckFailed;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e) ||
      dynamic_cast<const TaskError*>(&e) || dynamic_cast<const LabelError*>(&e))
    return kExitUsage;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e)) return kExitIo;
  if (dynamic_cast<const NumericsError*>(&e) || dynamic_cast<const DegenerateData*>(&e)) return kExitNumerics;
  if (dynamic_cast<const CheckpointError*>(&e)) return kExitCheckpoint;
  if (dynamic_cast<const Error*>(&e)) return kExitUsage;
  return kExitCheckFailed;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse 3D convolutional encoders for TPC point clouds", "stpc"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate synthetic events");
  g->add_option("detector", gen.detector, "gadget | attpc")->required()->check(CLI::IsMember({"gadget", "attpc"}));
  g->add_option("-n", gen.n, "Number of events")->required();
  g->add_option("-o,--out", gen.out, "Event file (default: <data_dir>/<detector>.tpce)");
  g->add_option("--seed", gen.seed, "Generator seed (gen.seed)");
  g->add_flag("--csv", gen.csv, "Also write <out>.csv and <out>.csv.labels.csv");
  add_common(g, gen.common, false);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the encoder on gated binary labels");
  t->add_option("--data", tr.data, "Compact-TPC event file")->required();
  t->add_option("-o,--out", tr.out, "Checkpoint path")->required();
  t->add_option("--history", tr.history, "History CSV (default: <out>.history.csv)");
  t->add_option("--epochs", tr.epochs, "Epochs (optim.epochs)")->check(CLI::NonNegativeNumber);
  t->add_option("--init", tr.init, "Initialization")->check(CLI::IsMember({"rand"}));
  t->add_option("--profile", tr.profile, "Stage widths")->check(CLI::IsMember({"small", "full"}));
  t->add_option("--seed", tr.seed, "Init and optimizer seed (arch.seed, optim.seed)");
  add_common(t, tr.common, true);

  EmbedArgs em;
  auto* e = app.add_subcommand("embed", "Write penultimate-layer embeddings");
  e->add_option("--checkpoint", em.checkpoint, "Checkpoint")->required();
  e->add_option("--data", em.data, "Event file")->required();
  e->add_option("-o,--out", em.out, "Embeddings CSV")->required();
  add_common(e, em.common, false);

  ProbeArgs pr;
  auto* p = app.add_subcommand("probe", "Linear probes, naive baseline and PCA");
  p->add_option("--task", pr.task, "Probing task")
      ->required()
      ->check(CLI::IsMember({"gadget-3class", "attpc-tracks"}));
  p->add_option("--embeddings", pr.embeddings, "[TAG=]embeddings CSV (repeatable)");
  p->add_option("--checkpoint", pr.checkpoints, "[TAG=]checkpoint (repeatable, needs --data)");
  p->add_option("--data", pr.data, "Event file for --checkpoint");
  p->add_option("-o,--out", pr.out, "Report directory")->required();
  add_common(p, pr.common, false);

  SelftestArgs st;
  auto* s = app.add_subcommand("selftest", "Gradient, dense-oracle and kernel-map checks");
  s->add_option("--seed", st.seed, "Check seed");
  s->add_flag("--inject-backward-fault", st.fault, "Corrupt one backward pass (negative control)");
  add_common(s, st.common, false);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out);
    if (t->parsed()) return cmd_train(tr, out);
    if (e->parsed()) return cmd_embed(em, out);
    if (p->parsed()) return cmd_probe(pr, out);
    if (s->parsed()) return cmd_selftest(st, out);
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return exit_code_for(ex);
  }
  return kExitUsage;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace stpc
