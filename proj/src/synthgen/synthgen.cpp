#include "synthgen/synthgen.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "common/error.hpp"
#include "numcore/rng.hpp"

namespace tel2veh::synth {

namespace {

double bump(double m, double center, double width) {
  const double z = (m - center) / width;
  return std::exp(-0.5 * z * z);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string clock(int minute) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d:%02d", minute / 60, minute % 60);
  return buf;
}

// Stationary unit-variance AR(1) path.
std::vector<double> ar_path(num::Rng& rng, std::size_t length, double phi) {
  std::vector<double> out(length);
  const double innovation = std::sqrt(1.0 - phi * phi);
  double x = rng.normal();
  for (std::size_t t = 0; t < length; ++t) {
    if (t > 0) x = phi * x + innovation * rng.normal();
    out[t] = x;
  }
  return out;
}

}  // namespace

Profile parse_profile(const std::string& name) {
  if (name == "commute" || name == "commute-peaked") return Profile::commute;
  if (name == "midday" || name == "midday-peaked") return Profile::midday;
  if (name == "flat") return Profile::flat;
  fail(ErrorKind::config, "unknown base_profile '" + name + "' (commute, midday, flat)");
}

std::string profile_name(Profile p) {
  switch (p) {
    case Profile::commute: return "commute";
    case Profile::midday: return "midday";
    case Profile::flat: return "flat";
  }
  return "commute";
}

double profile_value(Profile p, double m) {
  switch (p) {
    case Profile::commute:
      return 0.3 + 0.7 * std::min(1.0, bump(m, 8 * 60, 55) + 0.9 * bump(m, 17 * 60 + 30, 65));
    case Profile::midday:
      return 0.3 + 0.7 * bump(m, 12 * 60 + 30, 110);
    case Profile::flat:
      return 1.0;
  }
  return 1.0;
}

void SynthConfig::validate() const {
  if (m_cameras < 2 || n_nodes <= m_cameras) {
    fail(ErrorKind::config, "synth: need N > M >= 2, got N=" + std::to_string(n_nodes) +
                                ", M=" + std::to_string(m_cameras));
  }
  if (days == 0) fail(ErrorKind::config, "synth: days must be >= 1");
  if (interval_minutes <= 0) fail(ErrorKind::config, "synth: interval_minutes must be positive");
  const int span = day_end_minute - day_start_minute;
  if (span <= 0 || span % interval_minutes != 0) {
    fail(ErrorKind::config, "synth: interval must divide a non-empty day window");
  }
  if (pedestrian_noise_std < 0 || observation_noise_std < 0) fail(ErrorKind::config, "synth: stds must be >= 0");
  if (vehicle_scale_min <= 0 || vehicle_scale_max < vehicle_scale_min) {
    fail(ErrorKind::config, "synth: vehicle_scale range must be positive and ordered");
  }
  if (vehicle_level_min <= 0 || vehicle_level_max < vehicle_level_min) {
    fail(ErrorKind::config, "synth: vehicle_level range must be positive and ordered");
  }
  if (spatial_correlation < 0 || spatial_correlation > 1) fail(ErrorKind::config, "synth: spatial_correlation in [0, 1]");
  if (noise_ar < 0 || noise_ar >= 1) fail(ErrorKind::config, "synth: noise_ar in [0, 1)");
  if (!(segment_spacing_m > 0)) fail(ErrorKind::config, "synth: segment_spacing_m must be positive");
  if (!flow::parse_timestamp(start_date + " 00:00")) fail(ErrorKind::config, "synth: bad start_date '" + start_date + "'");
}

SynthConfig SynthConfig::from_config(const KeyValueConfig& kv) {
  SynthConfig c;
  c.n_nodes = kv.get_size("n_nodes", c.n_nodes);
  c.m_cameras = kv.get_size("m_cameras", c.m_cameras);
  c.days = kv.get_size("days", c.days);
  c.interval_minutes = static_cast<int>(kv.get_int("interval_minutes", c.interval_minutes));
  c.base_profile = parse_profile(kv.get_string("base_profile", profile_name(c.base_profile)));
  if (kv.has("vehicle_scale")) {
    c.vehicle_scale_min = c.vehicle_scale_max = kv.get_double("vehicle_scale", 1.0);
  }
  c.vehicle_scale_min = kv.get_double("vehicle_scale_min", c.vehicle_scale_min);
  c.vehicle_scale_max = kv.get_double("vehicle_scale_max", c.vehicle_scale_max);
  c.vehicle_level_min = kv.get_double("vehicle_level_min", c.vehicle_level_min);
  c.vehicle_level_max = kv.get_double("vehicle_level_max", c.vehicle_level_max);
  c.pedestrian_noise_std = kv.get_double("pedestrian_noise_std", c.pedestrian_noise_std);
  c.observation_noise_std = kv.get_double("observation_noise_std", c.observation_noise_std);
  c.spatial_correlation = kv.get_double("spatial_correlation", c.spatial_correlation);
  c.noise_ar = kv.get_double("noise_ar", c.noise_ar);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  c.start_date = kv.get_string("start_date", c.start_date);
  auto clock_key = [&](const char* key, int fallback) {
    if (!kv.has(key)) return fallback;
    const auto m = flow::parse_clock(kv.get_string(key, ""));
    if (!m) fail(ErrorKind::config, std::string("synth: bad ") + key);
    return *m;
  };
  c.day_start_minute = clock_key("day_start", c.day_start_minute);
  c.day_end_minute = clock_key("day_end", c.day_end_minute);
  c.segment_spacing_m = kv.get_double("segment_spacing_m", c.segment_spacing_m);
  c.origin_lat = kv.get_double("origin_lat", c.origin_lat);
  c.origin_lon = kv.get_double("origin_lon", c.origin_lon);
  c.validate();
  return c;
}

std::string SynthConfig::serialize() const {
  KeyValueConfig kv;
  kv.set("n_nodes", std::to_string(n_nodes));
  kv.set("m_cameras", std::to_string(m_cameras));
  kv.set("days", std::to_string(days));
  kv.set("interval_minutes", std::to_string(interval_minutes));
  kv.set("base_profile", profile_name(base_profile));
  kv.set("vehicle_scale_min", fmt(vehicle_scale_min));
  kv.set("vehicle_scale_max", fmt(vehicle_scale_max));
  kv.set("vehicle_level_min", fmt(vehicle_level_min));
  kv.set("vehicle_level_max", fmt(vehicle_level_max));
  kv.set("pedestrian_noise_std", fmt(pedestrian_noise_std));
  kv.set("observation_noise_std", fmt(observation_noise_std));
  kv.set("spatial_correlation", fmt(spatial_correlation));
  kv.set("noise_ar", fmt(noise_ar));
  kv.set("seed", std::to_string(seed));
  kv.set("start_date", start_date);
  kv.set("day_start", clock(day_start_minute));
  kv.set("day_end", clock(day_end_minute));
  kv.set("segment_spacing_m", fmt(segment_spacing_m));
  kv.set("origin_lat", fmt(origin_lat));
  kv.set("origin_lon", fmt(origin_lon));
  return kv.serialize();
}

SynthData generate(const SynthConfig& config) {
  config.validate();
  const std::size_t N = config.n_nodes, M = config.m_cameras;
  num::Rng root(config.seed);
  num::Rng node_rng = root.split(0xA11);

  SynthData out;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(N))));
  const double deg = 3.14159265358979323846 / 180.0;
  const double m_per_deg_lat = 6371008.8 * deg;
  const double m_per_deg_lon = m_per_deg_lat * std::cos(config.origin_lat * deg);
  for (std::size_t s = 0; s < N; ++s) {
    flow::RoadSegment seg;
    seg.segment_id = static_cast<std::int64_t>(s + 1);
    seg.center_lat = config.origin_lat + static_cast<double>(s / cols) * config.segment_spacing_m / m_per_deg_lat;
    seg.center_lon = config.origin_lon + static_cast<double>(s % cols) * config.segment_spacing_m / m_per_deg_lon;
    out.segments.push_back(seg);
    out.vehicle_scale.push_back(node_rng.uniform(config.vehicle_scale_min, config.vehicle_scale_max));
    out.vehicle_level.push_back(node_rng.uniform(config.vehicle_level_min, config.vehicle_level_max));
    out.pedestrian_weight.push_back(node_rng.uniform(0.5, 1.5));
  }

  const int span = config.day_end_minute - config.day_start_minute;
  const std::size_t per_day = static_cast<std::size_t>(span / config.interval_minutes);
  const std::size_t rows = per_day * config.days;
  const flow::Timestamp day0 = *flow::parse_timestamp(config.start_date + " 00:00");
  std::vector<flow::Timestamp> times(rows);
  std::vector<double> gct(rows * N), veh(rows * M);
  const double rho = config.spatial_correlation;
  const double local = std::sqrt(1.0 - rho * rho);
  for (std::size_t d = 0; d < config.days; ++d) {
    num::Rng day_rng = root.split(1000 + d);
    const auto shared = ar_path(day_rng, per_day, config.noise_ar);
    std::vector<std::vector<double>> own(N), ped(N);
    for (std::size_t s = 0; s < N; ++s) {
      own[s] = ar_path(day_rng, per_day, config.noise_ar);
      ped[s] = ar_path(day_rng, per_day, config.noise_ar);
    }
    for (std::size_t k = 0; k < per_day; ++k) {
      const std::size_t r = d * per_day + k;
      const int minute = config.day_start_minute + static_cast<int>(k) * config.interval_minutes;
      times[r] = day0 + static_cast<flow::Timestamp>(d) * flow::kSecondsPerDay + minute * 60;
      const double base = profile_value(config.base_profile, minute);
      const double midday = profile_value(Profile::midday, minute);
      for (std::size_t s = 0; s < N; ++s) {
        const double fluct = config.observation_noise_std * (rho * shared[k] + local * own[s][k]);
        const double v = std::max(0.0, std::round(out.vehicle_level[s] * base + fluct));
        const double p = config.pedestrian_noise_std * out.pedestrian_weight[s] * (midday + 0.5 * ped[s][k]);
        const double sampling = config.observation_noise_std > 0
                                    ? 0.2 * config.observation_noise_std * out.vehicle_scale[s] * day_rng.normal()
                                    : 0.0;
        gct[r * N + s] = std::max(0.0, std::round(out.vehicle_scale[s] * v + p + sampling));
        if (s < M) veh[r * M + s] = v;
      }
    }
  }
  std::vector<std::string> seg_ids, cam_ids;
  for (std::size_t s = 0; s < N; ++s) seg_ids.push_back(std::to_string(s + 1));
  for (std::size_t m = 0; m < M; ++m) {
    cam_ids.push_back("Cam" + std::to_string(m + 1));
    out.mapping.entries.emplace_back(cam_ids.back(), seg_ids[m]);
  }
  out.gct = flow::FlowMatrix(flow::FlowKind::gct, config.interval_minutes, times, seg_ids, std::move(gct));
  out.vehicle = flow::FlowMatrix(flow::FlowKind::vehicle, config.interval_minutes, times, cam_ids, std::move(veh));
  return out;
}

void write_dataset(const SynthData& data, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create output directory '" + dir + "': " + ec.message());
  const std::filesystem::path root(dir);
  flow::save_flow_matrix(data.gct, (root / "gct_flows.csv").string());
  flow::save_flow_matrix(data.vehicle, (root / "vehicle_flows.csv").string());
  flow::save_camera_mapping(data.mapping, (root / "camera_map.csv").string());
  flow::save_segments(data.segments, (root / "segments.csv").string());
}

}  // namespace tel2veh::synth
