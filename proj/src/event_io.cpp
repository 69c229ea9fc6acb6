#include <charconv>
#include <cstdio>
#include <map>
#include <sstream>

#include "stpc/events.hpp"
#include "stpc/io_util.hpp"

namespace stpc {

namespace {

constexpr char kMagic[4] = {'T', 'P', 'C', 'E'};

void put_header(ByteWriter& w, Detector det, std::size_t count) {
  w.put_bytes(std::string_view(kMagic, 4));
  w.put<std::uint16_t>(kEventFileVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(det));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(count));
}

void put_points(ByteWriter& w, const std::vector<Point4>& pts) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pts.size()));
  for (const auto& p : pts) {
    w.put<float>(static_cast<float>(p.x));
    w.put<float>(static_cast<float>(p.y));
    w.put<float>(static_cast<float>(p.z));
    w.put<float>(static_cast<float>(p.q));
  }
}

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", digits, v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(line);
  while (std::getline(is, cur, ',')) out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& ctx) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(ctx + ": cannot parse number '" + s + "'");
  }
}

long parse_int(const std::string& s, const std::string& ctx) {
  long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw FormatError(ctx + ": cannot parse integer '" + s + "'");
  return v;
}

/// Points grouped by event id from `event_id,x,y,z,q` lines.
std::map<long, std::vector<Point4>> read_point_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "event_id,x,y,z,q") throw FormatError(path.string() + ": unexpected CSV header");
  std::map<long, std::vector<Point4>> out;
  for (std::size_t ln = 2; std::getline(in, line); ++ln) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    const std::string ctx = path.string() + ":" + std::to_string(ln);
    if (f.size() != 5) throw FormatError(ctx + ": expected 5 fields");
    out[parse_int(f[0], ctx)].push_back({parse_double(f[1], ctx), parse_double(f[2], ctx),
                                         parse_double(f[3], ctx), parse_double(f[4], ctx)});
  }
  return out;
}

std::vector<std::vector<std::string>> read_label_csv(const std::filesystem::path& path,
                                                     const std::string& header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != header) throw FormatError(path.string() + ": unexpected label header");
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_csv(line));
  return rows;
}

std::filesystem::path labels_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".labels.csv";
  return p;
}

constexpr const char* kGadgetLabelHeader = "event_id,class,particle,energy_kev,range,gate";
constexpr const char* kAttpcLabelHeader = "event_id,n_tracks";

}  // namespace

void write_events(const std::filesystem::path& path, std::span<const GadgetEvent> events) {
  ByteWriter w;
  put_header(w, Detector::Gadget, events.size());
  for (const auto& ev : events) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ev.cls));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ev.particle));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ev.gate));
    w.put<double>(ev.energy_kev);
    w.put<double>(ev.range);
    put_points(w, ev.points);
  }
  atomic_write(path, w.bytes());
}

void write_events(const std::filesystem::path& path, std::span<const AttpcEvent> events) {
  ByteWriter w;
  put_header(w, Detector::Attpc, events.size());
  for (const auto& ev : events) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(ev.n_tracks));
    put_points(w, ev.points);
  }
  atomic_write(path, w.bytes());
}

EventReader::EventReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open " + path.string());
  char magic[4];
  read_raw(magic, 4, "magic");
  if (std::string_view(magic, 4) != std::string_view(kMagic, 4))
    throw FormatError("bad magic at byte 0: expected \"TPCE\"");
  std::uint16_t version = 0;
  read_raw(&version, 2, "version");
  if (version != kEventFileVersion)
    throw FormatError("unsupported event file version " + std::to_string(version) + " (expected " +
                      std::to_string(kEventFileVersion) + ")");
  std::uint8_t det = 0;
  read_raw(&det, 1, "detector kind");
  if (det != static_cast<std::uint8_t>(Detector::Gadget) && det != static_cast<std::uint8_t>(Detector::Attpc))
    throw FormatError("unknown detector kind " + std::to_string(det) + " at byte 6");
  detector_ = static_cast<Detector>(det);
  read_raw(&count_, 4, "event count");
}

void EventReader::read_raw(void* dst, std::size_t n, const char* what) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  const auto got = static_cast<std::size_t>(in_.gcount());
  if (got != n)
    throw FormatError(std::string("truncated ") + what + " at byte " + std::to_string(offset_ + got) +
                      " (record " + std::to_string(read_) + ")");
  offset_ += n;
}

bool EventReader::at_record_start() {
  if (read_ >= count_) return false;
  if (in_.peek() == std::char_traits<char>::eof())
    throw FormatError("file ends at byte " + std::to_string(offset_) + " after " + std::to_string(read_) +
                      " of " + std::to_string(count_) + " records");
  return true;
}

std::vector<Point4> EventReader::read_points() {
  std::uint32_t n = 0;
  read_raw(&n, 4, "point count");
  std::vector<float> raw(static_cast<std::size_t>(n) * 4);
  read_raw(raw.data(), raw.size() * sizeof(float), "point payload");
  std::vector<Point4> pts(n);
  for (std::size_t i = 0; i < n; ++i)
    pts[i] = {raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]};
  return pts;
}

std::optional<GadgetEvent> EventReader::next_gadget() {
  if (detector_ != Detector::Gadget) throw FormatError("event file holds AT-TPC events, not GADGET");
  if (!at_record_start()) return std::nullopt;
  GadgetEvent ev;
  std::uint8_t cls = 0, particle = 0, gate = 0;
  const std::uint64_t start = offset_;
  read_raw(&cls, 1, "class");
  read_raw(&particle, 1, "particle");
  read_raw(&gate, 1, "gate label");
  if (cls > 2 || particle > 1 || gate > 2)
    throw FormatError("invalid label block at byte " + std::to_string(start));
  ev.cls = static_cast<GadgetClass>(cls);
  ev.particle = static_cast<Particle>(particle);
  ev.gate = static_cast<GateLabel>(gate);
  read_raw(&ev.energy_kev, 8, "energy");
  read_raw(&ev.range, 8, "range");
  ev.points = read_points();
  ++read_;
  return ev;
}

std::optional<AttpcEvent> EventReader::next_attpc() {
  if (detector_ != Detector::Attpc) throw FormatError("event file holds GADGET events, not AT-TPC");
  if (!at_record_start()) return std::nullopt;
  AttpcEvent ev;
  std::uint8_t n = 0;
  const std::uint64_t start = offset_;
  read_raw(&n, 1, "track count");
  if (n > 5) throw FormatError("invalid track count at byte " + std::to_string(start));
  ev.n_tracks = n;
  ev.points = read_points();
  ++read_;
  return ev;
}

std::vector<GadgetEvent> read_gadget_events(const std::filesystem::path& path) {
  EventReader r(path);
  std::vector<GadgetEvent> out;
  while (auto ev = r.next_gadget()) out.push_back(std::move(*ev));
  return out;
}

std::vector<AttpcEvent> read_attpc_events(const std::filesystem::path& path) {
  EventReader r(path);
  std::vector<AttpcEvent> out;
  while (auto ev = r.next_attpc()) out.push_back(std::move(*ev));
  return out;
}

Detector peek_detector(const std::filesystem::path& path) { return EventReader(path).detector(); }

// ---------------------------------------------------------------------------

namespace {

template <class E>
std::string points_csv(std::span<const E> events) {
  std::string s = "event_id,x,y,z,q\n";
  for (std::size_t e = 0; e < events.size(); ++e)
    for (const auto& p : events[e].points)
      s += std::to_string(e) + ',' + fmt(p.x, 9) + ',' + fmt(p.y, 9) + ',' + fmt(p.z, 9) + ',' +
           fmt(p.q, 9) + '\n';
  return s;
}

}  // namespace

void write_events_csv(const std::filesystem::path& path, std::span<const GadgetEvent> events) {
  std::string labels = std::string(kGadgetLabelHeader) + "\n";
  for (std::size_t e = 0; e < events.size(); ++e) {
    const auto& ev = events[e];
    labels += std::to_string(e) + ',' + std::to_string(static_cast<int>(ev.cls)) + ',' +
              std::to_string(static_cast<int>(ev.particle)) + ',' + fmt(ev.energy_kev, 17) + ',' +
              fmt(ev.range, 17) + ',' + std::to_string(static_cast<int>(ev.gate)) + '\n';
  }
  atomic_write(labels_path(path), labels);
  atomic_write(path, points_csv(events));
}

void write_events_csv(const std::filesystem::path& path, std::span<const AttpcEvent> events) {
  std::string labels = std::string(kAttpcLabelHeader) + "\n";
  for (std::size_t e = 0; e < events.size(); ++e)
    labels += std::to_string(e) + ',' + std::to_string(events[e].n_tracks) + '\n';
  atomic_write(labels_path(path), labels);
  atomic_write(path, points_csv(events));
}

std::vector<GadgetEvent> read_gadget_csv(const std::filesystem::path& path) {
  auto points = read_point_csv(path);
  const auto rows = read_label_csv(labels_path(path), kGadgetLabelHeader);
  std::vector<GadgetEvent> out;
  for (const auto& f : rows) {
    const std::string ctx = labels_path(path).string();
    if (f.size() != 6) throw FormatError(ctx + ": expected 6 fields");
    GadgetEvent ev;
    const long id = parse_int(f[0], ctx);
    ev.cls = static_cast<GadgetClass>(parse_int(f[1], ctx));
    ev.particle = static_cast<Particle>(parse_int(f[2], ctx));
    ev.energy_kev = parse_double(f[3], ctx);
    ev.range = parse_double(f[4], ctx);
    ev.gate = static_cast<GateLabel>(parse_int(f[5], ctx));
    ev.points = std::move(points[id]);
    out.push_back(std::move(ev));
  }
  return out;
}

std::vector<AttpcEvent> read_attpc_csv(const std::filesystem::path& path) {
  auto points = read_point_csv(path);
  const auto rows = read_label_csv(labels_path(path), kAttpcLabelHeader);
  std::vector<AttpcEvent> out;
  for (const auto& f : rows) {
    const std::string ctx = labels_path(path).string();
    if (f.size() != 2) throw FormatError(ctx + ": expected 2 fields");
    AttpcEvent ev;
    const long id = parse_int(f[0], ctx);
    ev.n_tracks = static_cast<int>(parse_int(f[1], ctx));
    ev.points = std::move(points[id]);
    out.push_back(std::move(ev));
  }
  return out;
}

}  // namespace stpc
