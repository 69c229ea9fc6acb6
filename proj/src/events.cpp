#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "stpc/events.hpp"

namespace stpc {

namespace {

constexpr std::uint64_t kGadgetStream = 0x6761646765740001ULL;
constexpr std::uint64_t kAttpcStream = 0x6174747063000002ULL;

using Rng = std::mt19937_64;

Rng event_rng(std::uint64_t seed, std::size_t index, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double gaussian(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

/// Standard normal truncated to [-k, k] by rejection.
double truncated_gaussian(Rng& rng, double k) {
  for (;;) {
    const double z = gaussian(rng);
    if (std::abs(z) <= k) return z;
  }
}

double lognormal_factor(Rng& rng, double sigma) {
  if (sigma <= 0) return 1.0;
  return std::exp(sigma * gaussian(rng) - 0.5 * sigma * sigma);
}

double f32(double v) { return static_cast<double>(static_cast<float>(v)); }

Point4 make_point(double x, double y, double z, double q) { return {f32(x), f32(y), f32(z), f32(q)}; }

std::array<double, 3> isotropic(Rng& rng) {
  const double cos_t = uniform(rng, -1.0, 1.0);
  const double sin_t = std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t));
  const double phi = uniform(rng, 0.0, 2 * std::numbers::pi);
  return {sin_t * std::cos(phi), sin_t * std::sin(phi), cos_t};
}

std::array<double, 3> in_cylinder(Rng& rng, double radius, double half_length) {
  const double r = radius * std::sqrt(uniform(rng, 0.0, 1.0));
  const double phi = uniform(rng, 0.0, 2 * std::numbers::pi);
  return {r * std::cos(phi), r * std::sin(phi), uniform(rng, -half_length, half_length)};
}

void add_noise_hits(Rng& rng, std::vector<Point4>& pts, std::size_t count, double radius,
                    double half_length, double max_charge) {
  for (std::size_t i = 0; i < count; ++i) {
    const auto p = in_cylinder(rng, radius, half_length);
    pts.push_back(make_point(p[0], p[1], p[2], uniform(rng, 0.0, max_charge)));
  }
}

std::size_t poisson(Rng& rng, double mean) {
  if (mean <= 0) return 0;
  return std::poisson_distribution<std::size_t>(mean)(rng);
}

/// Samples a straight track; `rng` null means noise-free construction with
/// rounded (deterministic) hit multiplicity.
std::vector<Point4> straight_track(const GenConfig& cfg, Rng* rng, double energy, double range,
                                   const std::array<double, 3>& v, const std::array<double, 3>& d,
                                   double gain) {
  const std::size_t n = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(range / cfg.sample_spacing)) + 1);
  std::vector<double> s(n), w(n);
  double w_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = range * static_cast<double>(i) / static_cast<double>(n - 1);
    w[i] = deposition_weight(cfg, s[i], range);
    w_sum += w[i];
  }
  const double mean_w = 1.0 + cfg.bragg_amplitude / (cfg.bragg_power + 1.0);
  const double total_q = energy * cfg.charge_per_kev * gain;
  std::vector<Point4> pts;
  for (std::size_t i = 0; i < n; ++i) {
    const double dedx = energy / range * w[i] / mean_w;
    const double expected = std::pow(dedx / cfg.dedx_per_hit, cfg.hit_exponent);
    std::size_t m;
    if (rng) {
      const double fl = std::floor(expected);
      m = static_cast<std::size_t>(fl) + (uniform(*rng, 0.0, 1.0) < expected - fl ? 1 : 0);
    } else {
      m = static_cast<std::size_t>(std::llround(expected));
    }
    m = std::max<std::size_t>(m, 1);
    const double q_sample = total_q * w[i] / w_sum;
    for (std::size_t h = 0; h < m; ++h) {
      double x = v[0] + s[i] * d[0], y = v[1] + s[i] * d[1], z = v[2] + s[i] * d[2];
      double q = q_sample / static_cast<double>(m);
      if (rng) {
        x += cfg.jitter_sigma * gaussian(*rng);
        y += cfg.jitter_sigma * gaussian(*rng);
        z += cfg.jitter_sigma * gaussian(*rng);
        q *= lognormal_factor(*rng, cfg.charge_noise);
      }
      pts.push_back(make_point(x, y, z, q));
    }
  }
  return pts;
}

const Band& band_for(const GenConfig& cfg, Particle p) {
  return p == Particle::Proton ? cfg.proton_band : cfg.alpha_band;
}

}  // namespace

Particle particle_of(GadgetClass c) {
  return c == GadgetClass::Alpha2000 ? Particle::Alpha : Particle::Proton;
}

std::string to_string(GadgetClass c) {
  switch (c) {
    case GadgetClass::Proton800: return "p800";
    case GadgetClass::Proton1600: return "p1600";
    case GadgetClass::Alpha2000: return "a2000";
  }
  return "?";
}

std::string to_string(GateLabel g) {
  switch (g) {
    case GateLabel::Proton: return "proton";
    case GateLabel::Alpha: return "alpha";
    case GateLabel::Excluded: return "excluded";
  }
  return "?";
}

int track_group(int n_tracks) {
  if (n_tracks < 0 || n_tracks > 5) throw LabelError("track count " + std::to_string(n_tracks) + " outside [0, 5]");
  if (n_tracks <= 2) return 0;
  if (n_tracks == 3) return 1;
  return 2;
}

bool Band::contains(double energy_kev, double range) const {
  return std::abs(range - center(energy_kev)) <= half_width;
}

void GenConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0) || !std::isfinite(v)) throw ConfigError(std::string("gen: ") + name + " must be positive");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError(std::string("gen: ") + name + " must be non-negative");
  };
  positive(gadget_radius, "gadget_radius");
  positive(gadget_half_length, "gadget_half_length");
  positive(truncation_sigmas, "truncation_sigmas");
  positive(sample_spacing, "sample_spacing");
  positive(dedx_per_hit, "dedx_per_hit");
  non_negative(hit_exponent, "hit_exponent");
  non_negative(bragg_amplitude, "bragg_amplitude");
  positive(bragg_power, "bragg_power");
  positive(charge_per_kev, "charge_per_kev");
  non_negative(charge_noise, "charge_noise");
  non_negative(gain_spread, "gain_spread");
  non_negative(jitter_sigma, "jitter_sigma");
  non_negative(noise_rate, "noise_rate");
  non_negative(noise_charge, "noise_charge");
  non_negative(proton_band.half_width, "proton_band.half_width");
  non_negative(alpha_band.half_width, "alpha_band.half_width");
  double total = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const auto& cls_spec = classes[c];
    positive(cls_spec.energy_kev, "class energy");
    non_negative(cls_spec.energy_sigma, "class energy_sigma");
    non_negative(cls_spec.range_sigma, "class range_sigma");
    non_negative(cls_spec.fraction, "class fraction");
    total += cls_spec.fraction;
    const Band& band = band_for(*this, particle_of(static_cast<GadgetClass>(c)));
    const double e_lo = cls_spec.energy_kev - truncation_sigmas * cls_spec.energy_sigma;
    const double e_hi = cls_spec.energy_kev + truncation_sigmas * cls_spec.energy_sigma;
    if (e_lo <= 0) throw ConfigError("gen: class energy spread reaches non-positive energies");
    const double r_min = std::min(band.center(e_lo), band.center(e_hi)) - truncation_sigmas * cls_spec.range_sigma;
    if (r_min <= 0)
      throw ConfigError("gen: band for class " + to_string(static_cast<GadgetClass>(c)) +
                        " yields non-positive ranges (minimum " + std::to_string(r_min) + ")");
  }
  if (!(total > 0)) throw ConfigError("gen: class fractions sum to zero");

  positive(attpc_radius, "attpc_radius");
  positive(attpc_half_length, "attpc_half_length");
  non_negative(attpc_vertex_half_length, "attpc_vertex_half_length");
  if (attpc_max_tracks < 0 || attpc_max_tracks > 5) throw ConfigError("gen: attpc_max_tracks must lie in [0, 5]");
  positive(attpc_track_min, "attpc_track_min");
  if (attpc_track_max < attpc_track_min) throw ConfigError("gen: attpc_track_max < attpc_track_min");
  non_negative(attpc_curvature_min, "attpc_curvature_min");
  if (attpc_curvature_max < attpc_curvature_min) throw ConfigError("gen: attpc_curvature_max < attpc_curvature_min");
  if (attpc_curvature_max > 0 && attpc_curvature_min <= 0)
    throw ConfigError("gen: attpc_curvature_min must be positive when bending is enabled");
  positive(attpc_points_per_unit, "attpc_points_per_unit");
  positive(attpc_charge, "attpc_charge");
  non_negative(attpc_charge_noise, "attpc_charge_noise");
  non_negative(attpc_noise_rate, "attpc_noise_rate");
  if (attpc_min_noise_hits < 1) throw ConfigError("gen: attpc_min_noise_hits must be >= 1");
}

double deposition_weight(const GenConfig& cfg, double s, double range) {
  const double u = range > 0 ? std::clamp(s / range, 0.0, 1.0) : 0.0;
  return 1.0 + cfg.bragg_amplitude * std::pow(u, cfg.bragg_power);
}

GadgetEvent gen_gadget_event(const GenConfig& cfg, std::size_t index) {
  Rng rng = event_rng(cfg.seed, index, kGadgetStream);
  double total = 0;
  for (const auto& c : cfg.classes) total += c.fraction;
  const double u = uniform(rng, 0.0, total);
  std::size_t ci = 0;
  for (double acc = cfg.classes[0].fraction; ci + 1 < cfg.classes.size() && u >= acc;)
    acc += cfg.classes[++ci].fraction;

  GadgetEvent ev;
  ev.cls = static_cast<GadgetClass>(ci);
  ev.particle = particle_of(ev.cls);
  const auto& cls_spec = cfg.classes[ci];
  const double k = cfg.truncation_sigmas;
  ev.energy_kev = f32(cls_spec.energy_kev + cls_spec.energy_sigma * truncated_gaussian(rng, k));
  const Band& band = band_for(cfg, ev.particle);
  ev.range = f32(band.center(ev.energy_kev) + cls_spec.range_sigma * truncated_gaussian(rng, k));
  if (!(ev.range > 0)) throw ConfigError("gen: drawn non-positive track range");

  const auto vertex = in_cylinder(rng, cfg.gadget_radius, cfg.gadget_half_length);
  const auto dir = isotropic(rng);
  const double gain = lognormal_factor(rng, cfg.gain_spread);
  ev.points = straight_track(cfg, &rng, ev.energy_kev, ev.range, vertex, dir, gain);
  add_noise_hits(rng, ev.points, poisson(rng, cfg.noise_rate), cfg.gadget_radius,
                 cfg.gadget_half_length, cfg.noise_charge);
  ev.gate = gate_label(cfg.proton_band, cfg.alpha_band, ev.energy_kev, ev.range);
  return ev;
}

std::vector<GadgetEvent> gen_gadget(const GenConfig& cfg, std::size_t n) {
  cfg.validate();
  std::vector<GadgetEvent> out(n);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < n; ++i) out[i] = gen_gadget_event(cfg, i);
  return out;
}

GadgetEvent ideal_gadget_track(const GenConfig& cfg, GadgetClass cls, double energy_kev,
                               double range, const std::array<double, 3>& vertex,
                               const std::array<double, 3>& direction) {
  if (!(range > 0)) throw ConfigError("ideal track: range must be positive");
  const double norm = std::hypot(direction[0], direction[1], direction[2]);
  if (!(norm > 0)) throw ConfigError("ideal track: zero direction");
  const std::array<double, 3> d{direction[0] / norm, direction[1] / norm, direction[2] / norm};
  GadgetEvent ev;
  ev.cls = cls;
  ev.particle = particle_of(cls);
  ev.energy_kev = energy_kev;
  ev.range = range;
  ev.points = straight_track(cfg, nullptr, energy_kev, range, vertex, d, 1.0);
  ev.gate = gate_label(cfg.proton_band, cfg.alpha_band, energy_kev, range);
  return ev;
}

AttpcEvent gen_attpc_event(const GenConfig& cfg, std::size_t index, int n_tracks) {
  if (n_tracks < 0 || n_tracks > 5) throw ConfigError("gen: track count outside [0, 5]");
  Rng rng = event_rng(cfg.seed, index, kAttpcStream);
  AttpcEvent ev;
  ev.n_tracks = n_tracks;
  const std::array<double, 3> vertex{0.0, 0.0, uniform(rng, -cfg.attpc_vertex_half_length, cfg.attpc_vertex_half_length)};
  const double r2 = cfg.attpc_radius * cfg.attpc_radius;
  for (int t = 0; t < n_tracks; ++t) {
    const auto d = isotropic(rng);
    const double length = uniform(rng, cfg.attpc_track_min, cfg.attpc_track_max);
    double kappa = 0;  // signed transverse curvature
    if (cfg.attpc_curvature_max > 0) {
      const double radius = uniform(rng, cfg.attpc_curvature_min, cfg.attpc_curvature_max);
      kappa = (uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0) / radius;
    }
    const double sin_t = std::hypot(d[0], d[1]);
    const double phi = std::atan2(d[1], d[0]);
    const std::size_t n = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(length * cfg.attpc_points_per_unit)));
    for (std::size_t i = 0; i < n; ++i) {
      const double s = length * static_cast<double>(i) / static_cast<double>(n - 1);
      const double st = s * sin_t;  // transverse path length
      double x, y;
      if (kappa == 0) {
        x = st * std::cos(phi);
        y = st * std::sin(phi);
      } else {
        x = (std::sin(phi + kappa * st) - std::sin(phi)) / kappa;
        y = -(std::cos(phi + kappa * st) - std::cos(phi)) / kappa;
      }
      const double px = vertex[0] + x + cfg.jitter_sigma * gaussian(rng);
      const double py = vertex[1] + y + cfg.jitter_sigma * gaussian(rng);
      const double pz = vertex[2] + s * d[2] + cfg.jitter_sigma * gaussian(rng);
      const double q = cfg.attpc_charge * lognormal_factor(rng, cfg.attpc_charge_noise);
      if (px * px + py * py > r2 || std::abs(pz) > cfg.attpc_half_length) continue;
      ev.points.push_back(make_point(px, py, pz, q));
    }
  }
  std::size_t noise = poisson(rng, cfg.attpc_noise_rate);
  if (n_tracks == 0 || ev.points.empty())
    noise = std::max<std::size_t>(noise, static_cast<std::size_t>(cfg.attpc_min_noise_hits));
  add_noise_hits(rng, ev.points, noise, cfg.attpc_radius, cfg.attpc_half_length, cfg.noise_charge);
  return ev;
}

AttpcEvent gen_attpc_event(const GenConfig& cfg, std::size_t index) {
  Rng rng = event_rng(cfg.seed, index, kAttpcStream ^ 0xffULL);
  const int n_tracks = std::uniform_int_distribution<int>(0, cfg.attpc_max_tracks)(rng);
  return gen_attpc_event(cfg, index, n_tracks);
}

std::vector<AttpcEvent> gen_attpc(const GenConfig& cfg, std::size_t n) {
  cfg.validate();
  std::vector<AttpcEvent> out(n);
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < n; ++i) out[i] = gen_attpc_event(cfg, i);
  return out;
}

GateLabel gate_label(const Band& proton, const Band& alpha, double energy_kev, double range) {
  const bool in_p = proton.contains(energy_kev, range);
  const bool in_a = alpha.contains(energy_kev, range);
  if (in_p && !in_a) return GateLabel::Proton;
  if (in_a && !in_p) return GateLabel::Alpha;
  return GateLabel::Excluded;
}

void gate_labels(std::span<GadgetEvent> events, const Band& proton, const Band& alpha) {
  for (auto& ev : events) ev.gate = gate_label(proton, alpha, ev.energy_kev, ev.range);
}

// ---------------------------------------------------------------------------

template <class T>
EventSites<T> event_sites(std::span<const Point4> points, const InputConfig& input) {
  const auto qe = quantize(points, input.voxel_size);
  const std::size_t n = qe.sites.size();
  std::array<double, 3> origin{0, 0, 0};
  if (input.center_coords) {
    for (const auto& c : qe.centroid)
      for (int a = 0; a < 3; ++a) origin[a] += c[a];
    for (auto& o : origin) o /= static_cast<double>(n);
  }
  EventSites<T> ev;
  ev.sites = qe.sites;
  if (input.anchor_sites) {
    std::array<double, 3> m{0, 0, 0};
    double w = 0;
    for (std::size_t r = 0; r < n; ++r) {
      const double q = std::abs(qe.charge[r]);
      for (int a = 0; a < 3; ++a) m[a] += q * qe.sites[r][a];
      w += q;
    }
    for (int a = 0; a < 3; ++a) {
      const double c = w > 0 ? m[a] / w : qe.sites[0][a];
      const auto shift = static_cast<std::int32_t>(input.anchor - std::llround(c));
      for (auto& s : ev.sites) s[a] += shift;
    }
  }
  ev.features = Matrix<T>(n, 4);
  for (std::size_t r = 0; r < n; ++r) {
    ev.features(r, 0) = static_cast<T>(qe.charge[r] / input.charge_scale);
    for (std::size_t a = 0; a < 3; ++a)
      ev.features(r, a + 1) = static_cast<T>((qe.centroid[r][a] - origin[a]) / input.coord_scale);
  }
  return ev;
}

template <class T>
SparseBatch<T> to_sparse(std::span<const GadgetEvent> events, const InputConfig& input) {
  if (events.empty()) throw EmptyEvent("to_sparse: no events");
  std::vector<EventSites<T>> sites;
  SparseBatch<T> out;
  for (const auto& ev : events) {
    sites.push_back(event_sites<T>(ev.points, input));
    out.labels.push_back(static_cast<int>(ev.gate));
  }
  out.tensor = batch(std::span<const EventSites<T>>(sites));
  return out;
}

template <class T>
SparseBatch<T> to_sparse(std::span<const AttpcEvent> events, const InputConfig& input) {
  if (events.empty()) throw EmptyEvent("to_sparse: no events");
  std::vector<EventSites<T>> sites;
  SparseBatch<T> out;
  for (const auto& ev : events) {
    sites.push_back(event_sites<T>(ev.points, input));
    out.labels.push_back(ev.group_label());
  }
  out.tensor = batch(std::span<const EventSites<T>>(sites));
  return out;
}

template EventSites<float> event_sites(std::span<const Point4>, const InputConfig&);
template EventSites<double> event_sites(std::span<const Point4>, const InputConfig&);
template SparseBatch<float> to_sparse(std::span<const GadgetEvent>, const InputConfig&);
template SparseBatch<double> to_sparse(std::span<const GadgetEvent>, const InputConfig&);
template SparseBatch<float> to_sparse(std::span<const AttpcEvent>, const InputConfig&);
template SparseBatch<double> to_sparse(std::span<const AttpcEvent>, const InputConfig&);

}  // namespace stpc
