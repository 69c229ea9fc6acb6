#include <json.hpp>
#include <numeric>
#include <string>

#include "stpc/io_util.hpp"
#include "stpc/model.hpp"

namespace stpc {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'S', 'T', 'P', 'C'};

/// Bounds-checked cursor over checkpoint bytes.
class Cursor {
 public:
  explicit Cursor(const std::vector<char>& bytes) : bytes_(bytes) {}

  template <class V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  template <class V>
  void get_array(V* out, std::size_t n, const char* what) {
    need(n * sizeof(V), what);
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(V));
    pos_ += n * sizeof(V);
  }
  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what +
                            " at byte " + std::to_string(pos_));
  }
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

json arch_json(const ArchConfig& c) {
  return json{{"in_channels", c.in_channels},
              {"stage_widths", c.stage_widths},
              {"blocks_per_stage", c.blocks_per_stage},
              {"head_classes", c.head_classes},
              {"dropout_p", c.dropout_p},
              {"seed", c.seed},
              {"input",
               {{"voxel_size", c.input.voxel_size},
                {"charge_scale", c.input.charge_scale},
                {"coord_scale", c.input.coord_scale},
                {"center_coords", c.input.center_coords},
                {"anchor_sites", c.input.anchor_sites},
                {"anchor", c.input.anchor}}}};
}

ArchConfig arch_from(const json& j) {
  ArchConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.stage_widths = j.at("stage_widths").get<std::array<int, 4>>();
  c.blocks_per_stage = j.at("blocks_per_stage").get<int>();
  c.head_classes = j.at("head_classes").get<int>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& in = j.at("input");
  c.input.voxel_size = in.at("voxel_size").get<double>();
  c.input.charge_scale = in.at("charge_scale").get<double>();
  c.input.coord_scale = in.at("coord_scale").get<double>();
  c.input.center_coords = in.at("center_coords").get<bool>();
  c.input.anchor_sites = in.at("anchor_sites").get<bool>();
  c.input.anchor = in.at("anchor").get<int>();
  return c;
}

struct Header {
  CheckpointInfo info;
  std::size_t body_offset = 0;
};

Header parse_header(Cursor& cur) {
  Header h;
  const std::string magic = cur.get_string(4, "magic");
  if (magic != std::string(kMagic, 4))
    throw CheckpointError("not a checkpoint: expected magic \"STPC\"");
  h.info.version = cur.get<std::uint16_t>("version");
  if (h.info.version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(h.info.version) +
                          " is not supported (expected version " +
                          std::to_string(kCheckpointVersion) + ")");
  const auto width = cur.get<std::uint8_t>("precision");
  if (width != 4 && width != 8)
    throw CheckpointError("checkpoint declares invalid scalar width " + std::to_string(width));
  h.info.precision = width == 4 ? Precision::Float32 : Precision::Float64;
  const auto meta_len = cur.get<std::uint32_t>("metadata length");
  const std::string meta = cur.get_string(meta_len, "metadata");
  try {
    const json j = json::parse(meta);
    h.info.config = arch_from(j.at("arch"));
    h.info.tag = j.value("tag", "");
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is malformed: ") + e.what());
  }
  try {
    h.info.config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  h.body_offset = cur.pos();
  return h;
}

}  // namespace

std::string arch_to_json(const ArchConfig& config) { return arch_json(config).dump(); }

ArchConfig arch_from_json(const std::string& text) {
  try {
    return arch_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed architecture JSON: ") + e.what());
  }
}

template <class T>
void save_checkpoint(const ModelState<T>& model, const std::filesystem::path& path,
                     const std::string& tag) {
  auto& m = const_cast<ModelState<T>&>(model);  // enumerators are non-const; nothing is written
  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint8_t>(sizeof(T));
  const std::string meta = json{{"arch", arch_json(model.config)}, {"tag", tag}}.dump();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(meta.size()));
  w.put_bytes(meta);

  auto tensors = parameters(m);
  auto bufs = buffers(m);
  tensors.insert(tensors.end(), bufs.begin(), bufs.end());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put<std::uint32_t>(d);
    w.put_array(t.values->data(), t.values->size());
  }
  atomic_write(path, w.bytes());
}

template <class T>
ModelState<T> load_checkpoint(const std::filesystem::path& path) {
  std::vector<char> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  Cursor cur(bytes);
  const Header h = parse_header(cur);
  if (h.info.precision != precision_of<T>())
    throw CheckpointError(std::string("checkpoint holds ") +
                          (h.info.precision == Precision::Float32 ? "float32" : "float64") +
                          " parameters, requested " + (sizeof(T) == 4 ? "float32" : "float64"));

  ModelState<T> m = init_model<T>(h.info.config, InitMode::Zero);
  auto tensors = parameters(m);
  auto bufs = buffers(m);
  tensors.insert(tensors.end(), bufs.begin(), bufs.end());
  const auto count = cur.get<std::uint32_t>("tensor count");
  if (count != tensors.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(tensors.size()));
  for (auto& t : tensors) {
    const auto name_len = cur.get<std::uint16_t>("tensor name length");
    const std::string name = cur.get_string(name_len, "tensor name");
    if (name != t.name)
      throw CheckpointError("checkpoint tensor '" + name + "' where '" + t.name + "' was expected");
    const auto ndim = cur.get<std::uint8_t>("tensor rank");
    std::vector<std::uint32_t> shape(ndim);
    for (auto& d : shape) d = cur.get<std::uint32_t>("tensor shape");
    if (shape != t.shape) throw CheckpointError("checkpoint tensor '" + name + "' has wrong shape");
    cur.get_array(t.values->data(), t.values->size(), "tensor data");
  }
  if (!cur.at_end()) throw CheckpointError("trailing bytes after checkpoint body");
  return m;
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::vector<char> bytes;
  try {
    bytes = read_file(path);
  } catch (const IoError& e) {
    throw CheckpointError(e.what());
  }
  Cursor cur(bytes);
  return parse_header(cur).info;
}

template void save_checkpoint(const ModelState<float>&, const std::filesystem::path&,
                              const std::string&);
template void save_checkpoint(const ModelState<double>&, const std::filesystem::path&,
                              const std::string&);
template ModelState<float> load_checkpoint<float>(const std::filesystem::path&);
template ModelState<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace stpc
