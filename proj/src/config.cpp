#include "stpc/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "stpc/errors.hpp"

namespace stpc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <class V>
V parse_number(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  V v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("config: bad value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(ConfigSource s) {
  switch (s) {
    case ConfigSource::Default: return "default";
    case ConfigSource::File: return "file";
    case ConfigSource::Cli: return "cli";
  }
  return "?";
}

void RunConfig::validate() const {
  gen.validate();
  arch.validate();
  optim.validate();
  probe.validate();
  if (threads < 0) throw ConfigError("run: threads must be >= 0");
}

std::filesystem::path default_data_dir() {
  if (const char* d = std::getenv("STPC_DATA_DIR"); d && *d) return d;
  return ".";
}

void ConfigStore::add(const std::string& key, Entry e) {
  entries_.emplace(key, std::move(e));
  source_.emplace(key, ConfigSource::Default);
  order_.push_back(key);
}

ConfigStore::ConfigStore() {
  config_.data_dir = default_data_dir();
  auto& c = config_;

  auto dbl = [&](const std::string& key, double& ref) {
    add(key, {[&ref] { return fmt_double(ref); },
              [&ref, key](const std::string& s) { ref = parse_number<double>(key, s); }});
  };
  auto integer = [&](const std::string& key, int& ref) {
    add(key, {[&ref] { return std::to_string(ref); },
              [&ref, key](const std::string& s) { ref = parse_number<int>(key, s); }});
  };
  auto u64 = [&](const std::string& key, std::uint64_t& ref) {
    add(key, {[&ref] { return std::to_string(ref); },
              [&ref, key](const std::string& s) { ref = parse_number<std::uint64_t>(key, s); }});
  };
  auto boolean = [&](const std::string& key, bool& ref) {
    add(key, {[&ref] { return std::string(ref ? "true" : "false"); },
              [&ref, key](const std::string& s) { ref = parse_bool(key, s); }});
  };
  auto band = [&](const std::string& prefix, Band& b) {
    dbl(prefix + "_slope", b.slope);
    dbl(prefix + "_intercept", b.intercept);
    dbl(prefix + "_half_width", b.half_width);
  };

  // [run]
  add("run.precision", {[&c] { return std::string(c.precision == Precision::Float32 ? "float32" : "float64"); },
                        [&c](const std::string& s) {
                          const auto v = trim(s);
                          if (v == "float32") c.precision = Precision::Float32;
                          else if (v == "float64") c.precision = Precision::Float64;
                          else throw ConfigError("config: run.precision must be float32 or float64");
                        }});
  integer("run.threads", c.threads);
  integer("run.verbosity", c.verbosity);
  add("run.data_dir", {[&c] { return c.data_dir.string(); },
                       [&c](const std::string& s) { c.data_dir = trim(s); }});

  // [gen]
  u64("gen.seed", c.gen.seed);
  dbl("gen.gadget_radius", c.gen.gadget_radius);
  dbl("gen.gadget_half_length", c.gen.gadget_half_length);
  static const char* kClassNames[] = {"p800", "p1600", "alpha2000"};
  for (int k = 0; k < 3; ++k) {
    const std::string p = std::string("gen.") + kClassNames[k];
    dbl(p + "_energy_kev", c.gen.classes[k].energy_kev);
    dbl(p + "_energy_sigma", c.gen.classes[k].energy_sigma);
    dbl(p + "_range_sigma", c.gen.classes[k].range_sigma);
    dbl(p + "_fraction", c.gen.classes[k].fraction);
  }
  band("gen.proton_band", c.gen.proton_band);
  band("gen.alpha_band", c.gen.alpha_band);
  dbl("gen.truncation_sigmas", c.gen.truncation_sigmas);
  dbl("gen.sample_spacing", c.gen.sample_spacing);
  dbl("gen.dedx_per_hit", c.gen.dedx_per_hit);
  dbl("gen.hit_exponent", c.gen.hit_exponent);
  dbl("gen.bragg_amplitude", c.gen.bragg_amplitude);
  dbl("gen.bragg_power", c.gen.bragg_power);
  dbl("gen.charge_per_kev", c.gen.charge_per_kev);
  dbl("gen.charge_noise", c.gen.charge_noise);
  dbl("gen.gain_spread", c.gen.gain_spread);
  dbl("gen.jitter_sigma", c.gen.jitter_sigma);
  dbl("gen.noise_rate", c.gen.noise_rate);
  dbl("gen.noise_charge", c.gen.noise_charge);
  dbl("gen.attpc_radius", c.gen.attpc_radius);
  dbl("gen.attpc_half_length", c.gen.attpc_half_length);
  dbl("gen.attpc_vertex_half_length", c.gen.attpc_vertex_half_length);
  integer("gen.attpc_max_tracks", c.gen.attpc_max_tracks);
  dbl("gen.attpc_track_min", c.gen.attpc_track_min);
  dbl("gen.attpc_track_max", c.gen.attpc_track_max);
  dbl("gen.attpc_curvature_min", c.gen.attpc_curvature_min);
  dbl("gen.attpc_curvature_max", c.gen.attpc_curvature_max);
  dbl("gen.attpc_points_per_unit", c.gen.attpc_points_per_unit);
  dbl("gen.attpc_charge", c.gen.attpc_charge);
  dbl("gen.attpc_charge_noise", c.gen.attpc_charge_noise);
  dbl("gen.attpc_noise_rate", c.gen.attpc_noise_rate);
  integer("gen.attpc_min_noise_hits", c.gen.attpc_min_noise_hits);

  // [arch]
  integer("arch.in_channels", c.arch.in_channels);
  add("arch.stage_widths", {[&c] {
                              std::string s;
                              for (int w : c.arch.stage_widths) s += (s.empty() ? "" : ",") + std::to_string(w);
                              return s;
                            },
                            [&c](const std::string& s) {
                              std::array<int, 4> w{};
                              std::stringstream ss(s);
                              std::string item;
                              std::size_t n = 0;
                              while (std::getline(ss, item, ',')) {
                                if (n == 4) throw ConfigError("config: arch.stage_widths needs 4 values");
                                w[n++] = parse_number<int>("arch.stage_widths", item);
                              }
                              if (n != 4) throw ConfigError("config: arch.stage_widths needs 4 values");
                              c.arch.stage_widths = w;
                            }});
  integer("arch.blocks_per_stage", c.arch.blocks_per_stage);
  integer("arch.head_classes", c.arch.head_classes);
  dbl("arch.dropout_p", c.arch.dropout_p);
  u64("arch.seed", c.arch.seed);
  dbl("arch.voxel_size", c.arch.input.voxel_size);
  dbl("arch.charge_scale", c.arch.input.charge_scale);
  dbl("arch.coord_scale", c.arch.input.coord_scale);
  boolean("arch.center_coords", c.arch.input.center_coords);
  boolean("arch.anchor_sites", c.arch.input.anchor_sites);
  integer("arch.anchor", c.arch.input.anchor);

  // [optim]
  dbl("optim.lr0", c.optim.lr0);
  dbl("optim.weight_decay", c.optim.weight_decay);
  dbl("optim.beta1", c.optim.beta1);
  dbl("optim.beta2", c.optim.beta2);
  dbl("optim.adam_eps", c.optim.adam_eps);
  integer("optim.t_max", c.optim.t_max);
  dbl("optim.eta_min", c.optim.eta_min);
  dbl("optim.clip_max_norm", c.optim.clip_max_norm);
  integer("optim.batch_size", c.optim.batch_size);
  integer("optim.epochs", c.optim.epochs);
  u64("optim.seed", c.optim.seed);
  dbl("optim.val_fraction", c.optim.val_fraction);

  // [probe]
  dbl("probe.C", c.probe.C);
  dbl("probe.tolerance", c.probe.tolerance);
  integer("probe.max_iter", c.probe.max_iter);
  u64("probe.seed", c.probe.seed);
  dbl("probe.test_fraction", c.probe.test_fraction);
}

void ConfigStore::set(const std::string& key, const std::string& value, ConfigSource source) {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second.set(value);
  source_[key] = source;
}

std::string ConfigStore::get(const std::string& key) const {
  const auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError("config: unknown key '" + key + "'");
  return it->second.get();
}

std::vector<std::string> ConfigStore::keys() const { return order_; }

void ConfigStore::load_file(const std::filesystem::path& path) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::ini_parser::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    if (!std::filesystem::exists(path)) throw IoError("config: cannot open " + path.string());
    throw ConfigError("config: " + std::string(e.what()));
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError("config: key '" + section + "' outside of a section in " + path.string());
    for (const auto& [key, value] : body) set(section + "." + key, value.data(), ConfigSource::File);
  }
}

void ConfigStore::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: expected section.key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1), ConfigSource::Cli);
}

std::string ConfigStore::snapshot() const {
  std::string out, section;
  for (const auto& key : order_) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      out += (out.empty() ? "[" : "\n[") + s + "]\n";
      section = s;
    }
    out += key.substr(dot + 1) + " = " + get(key) + "\n";
  }
  return out;
}

std::string ConfigStore::describe() const {
  std::string out;
  std::size_t n_default = 0;
  for (const auto& key : order_) {
    const auto src = source_.at(key);
    if (src == ConfigSource::Default) {
      ++n_default;
      continue;
    }
    out += "  " + key + " = " + get(key) + "  (" + to_string(src) + ")\n";
  }
  out += "  " + std::to_string(n_default) + " other keys at defaults\n";
  return out;
}

}  // namespace stpc
