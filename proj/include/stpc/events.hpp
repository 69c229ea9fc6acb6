#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stpc/model.hpp"
#include "stpc/sparse.hpp"

namespace stpc {

enum class Detector : std::uint8_t { Gadget = 1, Attpc = 2 };

/// Source populations of the compact-TPC sample.
enum class GadgetClass : std::uint8_t { Proton800 = 0, Proton1600 = 1, Alpha2000 = 2 };
enum class Particle : std::uint8_t { Proton = 0, Alpha = 1 };
enum class GateLabel : std::uint8_t { Proton = 0, Alpha = 1, Excluded = 2 };

Particle particle_of(GadgetClass c);
std::string to_string(GadgetClass c);
std::string to_string(GateLabel g);

struct GadgetEvent {
  std::vector<Point4> points;
  GadgetClass cls = GadgetClass::Proton800;
  Particle particle = Particle::Proton;
  double energy_kev = 0;
  double range = 0;  // generated track length, detector units
  GateLabel gate = GateLabel::Excluded;

  bool operator==(const GadgetEvent&) const = default;
};

/// {0,1,2} tracks -> 0, {3} -> 1, {4,5} -> 2.
int track_group(int n_tracks);

struct AttpcEvent {
  std::vector<Point4> points;
  int n_tracks = 0;

  int group_label() const { return track_group(n_tracks); }
  bool operator==(const AttpcEvent&) const = default;
};

/// Straight band in the (energy, range) plane: centre range = slope * E +
/// intercept; an event is inside when |range - centre| <= half_width.
struct Band {
  double slope = 0;
  double intercept = 0;
  double half_width = 0;

  double center(double energy_kev) const { return slope * energy_kev + intercept; }
  bool contains(double energy_kev, double range) const;
  bool operator==(const Band&) const = default;
};

struct ClassSpec {
  double energy_kev = 0;
  double energy_sigma = 0;
  double range_sigma = 0;  // spread around the band centre, truncated
  double fraction = 0;
  bool operator==(const ClassSpec&) const = default;
};

struct GenConfig {
  std::uint64_t seed = 1;

  // compact TPC
  double gadget_radius = 2.0;
  double gadget_half_length = 2.0;
  std::array<ClassSpec, 3> classes{{{800, 20, 0.27, 1.0 / 3},
                                    {1600, 20, 0.27, 1.0 / 3},
                                    {2000, 20, 0.13, 1.0 / 3}}};
  Band proton_band{0.0035, -1.2, 1.1};
  Band alpha_band{0.0007, 0.0, 0.8};
  double truncation_sigmas = 3.0;
  double sample_spacing = 0.01;     // track sampling step, detector units
  double dedx_per_hit = 400.0;      // keV/unit at which one hit per sample is emitted
  double hit_exponent = 2.0;        // hits per sample = (dE/dx / dedx_per_hit)^exponent
  double bragg_amplitude = 3.0;     // deposition weight 1 + a * (s/R)^p
  double bragg_power = 4.0;
  double charge_per_kev = 1.0;
  double charge_noise = 0.3;        // relative per-hit charge fluctuation
  double gain_spread = 0.0;         // relative per-event gain fluctuation
  double jitter_sigma = 0.015;
  double noise_rate = 10.0;         // mean spurious hits per event
  double noise_charge = 2.0;        // spurious hit charge ~ U(0, noise_charge)

  // active-target TPC
  double attpc_radius = 4.0;
  double attpc_half_length = 7.0;
  double attpc_vertex_half_length = 3.5;
  int attpc_max_tracks = 5;
  double attpc_track_min = 1.0;
  double attpc_track_max = 3.5;
  double attpc_curvature_min = 1.5;  // helix radius interval; 0 disables bending
  double attpc_curvature_max = 10.0;
  double attpc_points_per_unit = 120.0;
  double attpc_charge = 5.0;
  double attpc_charge_noise = 0.3;
  double attpc_noise_rate = 30.0;
  int attpc_min_noise_hits = 5;

  /// Throws ConfigError on invalid combinations (e.g. negative ranges).
  void validate() const;
  bool operator==(const GenConfig&) const = default;
};

/// Expected deposition weight along a track, s in [0, range].
double deposition_weight(const GenConfig& config, double s, double range);

/// Compact-TPC events. Event i is generated from its own RNG seeded by
/// (config.seed, i), so any subset can be regenerated independently.
std::vector<GadgetEvent> gen_gadget(const GenConfig& config, std::size_t n);
GadgetEvent gen_gadget_event(const GenConfig& config, std::size_t index);

/// Noise-free straight track of known class, direction and length; used for
/// construction checks.
GadgetEvent ideal_gadget_track(const GenConfig& config, GadgetClass cls, double energy_kev,
                               double range, const std::array<double, 3>& vertex,
                               const std::array<double, 3>& direction);

std::vector<AttpcEvent> gen_attpc(const GenConfig& config, std::size_t n);
AttpcEvent gen_attpc_event(const GenConfig& config, std::size_t index);
/// Same as gen_attpc_event with a fixed track count.
AttpcEvent gen_attpc_event(const GenConfig& config, std::size_t index, int n_tracks);

/// Proton/alpha when (range, energy) lies in exactly one band, else excluded.
GateLabel gate_label(const Band& proton, const Band& alpha, double energy_kev, double range);
void gate_labels(std::span<GadgetEvent> events, const Band& proton, const Band& alpha);

// ---------------------------------------------------------------------------
// Binary event file: "TPCE", u16 version, u8 detector, u32 count, records.
// ---------------------------------------------------------------------------

constexpr std::uint16_t kEventFileVersion = 1;

void write_events(const std::filesystem::path& path, std::span<const GadgetEvent> events);
void write_events(const std::filesystem::path& path, std::span<const AttpcEvent> events);

/// Streaming reader. Errors are FormatError naming the byte offset; events
/// before a corrupt record remain readable.
class EventReader {
 public:
  explicit EventReader(const std::filesystem::path& path);

  Detector detector() const { return detector_; }
  std::uint32_t declared_count() const { return count_; }

  std::optional<GadgetEvent> next_gadget();
  std::optional<AttpcEvent> next_attpc();

 private:
  void read_raw(void* dst, std::size_t n, const char* what);
  std::vector<Point4> read_points();
  bool at_record_start();

  std::ifstream in_;
  std::uint64_t offset_ = 0;
  Detector detector_ = Detector::Gadget;
  std::uint32_t count_ = 0;
  std::uint32_t read_ = 0;
};

std::vector<GadgetEvent> read_gadget_events(const std::filesystem::path& path);
std::vector<AttpcEvent> read_attpc_events(const std::filesystem::path& path);
Detector peek_detector(const std::filesystem::path& path);

/// Debug CSV: `event_id,x,y,z,q` per point plus `<path>.labels.csv`.
void write_events_csv(const std::filesystem::path& path, std::span<const GadgetEvent> events);
void write_events_csv(const std::filesystem::path& path, std::span<const AttpcEvent> events);
std::vector<GadgetEvent> read_gadget_csv(const std::filesystem::path& path);
std::vector<AttpcEvent> read_attpc_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Voxelizes one event: features (q, x, y, z) per site, scaled per `input`.
template <class T>
EventSites<T> event_sites(std::span<const Point4> points, const InputConfig& input);

template <class T>
struct SparseBatch {
  SparseTensor<T> tensor;
  std::vector<int> labels;
};

/// Quantize + batch; labels are carried through unchanged.
template <class T>
SparseBatch<T> to_sparse(std::span<const GadgetEvent> events, const InputConfig& input);
template <class T>
SparseBatch<T> to_sparse(std::span<const AttpcEvent> events, const InputConfig& input);

}  // namespace stpc
