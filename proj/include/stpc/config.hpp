#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stpc/analysis.hpp"
#include "stpc/events.hpp"
#include "stpc/model.hpp"
#include "stpc/train.hpp"

namespace stpc {

enum class ConfigSource { Default, File, Cli };
std::string to_string(ConfigSource s);

/// Every tunable of a run, grouped into the sections of the config file
/// ([run], [gen], [arch], [optim], [probe]).
struct RunConfig {
  GenConfig gen;
  ArchConfig arch = ArchConfig::small();
  OptimConfig optim;
  ProbeConfig probe;
  Precision precision = Precision::Float32;
  int threads = 0;  // 0 = all available cores
  int verbosity = 1;
  std::filesystem::path data_dir = ".";

  void validate() const;
};

/// Keyed access ("section.key") to a RunConfig with per-key provenance.
class ConfigStore {
 public:
  ConfigStore();
  ConfigStore(const ConfigStore&) = delete;
  ConfigStore& operator=(const ConfigStore&) = delete;

  RunConfig& config() { return config_; }
  const RunConfig& config() const { return config_; }

  /// Throws ConfigError on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value, ConfigSource source);
  std::string get(const std::string& key) const;
  ConfigSource source(const std::string& key) const { return source_.at(key); }
  bool has(const std::string& key) const { return entries_.count(key) != 0; }
  std::vector<std::string> keys() const;

  /// INI-style file. Throws IoError when unreadable, ConfigError otherwise.
  void load_file(const std::filesystem::path& path);
  /// `section.key=value`
  void apply_override(const std::string& assignment);

  /// Complete snapshot in the config-file format; replaying it reproduces
  /// the run.
  std::string snapshot() const;
  /// One `key = value  (source)` line per non-default key, plus a count.
  std::string describe() const;

 private:
  struct Entry {
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };
  void add(const std::string& key, Entry e);

  RunConfig config_;
  std::map<std::string, Entry> entries_;
  std::map<std::string, ConfigSource> source_;
  std::vector<std::string> order_;
};

/// STPC_DATA_DIR when set, else ".".
std::filesystem::path default_data_dir();

}  // namespace stpc
