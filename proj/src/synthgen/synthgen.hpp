#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "common/config.hpp"
#include "flowdata/flowdata.hpp"

namespace tel2veh::synth {

enum class Profile { commute, midday, flat };

Profile parse_profile(const std::string& name);
std::string profile_name(Profile p);
// Shape in [0, 1] at a minute of the day.
double profile_value(Profile p, double minute_of_day);

struct SynthConfig {
  std::size_t n_nodes = 12;
  std::size_t m_cameras = 4;
  std::size_t days = 14;
  int interval_minutes = 5;
  Profile base_profile = Profile::commute;
  // a_s, drawn per node from [min, max]; equal bounds give one value.
  double vehicle_scale_min = 0.15;
  double vehicle_scale_max = 0.45;
  // Vehicle level per node (peak count), drawn from [min, max].
  double vehicle_level_min = 400.0;
  double vehicle_level_max = 500.0;
  double pedestrian_noise_std = 25.0;
  double observation_noise_std = 30.0;
  // Share of the vehicle fluctuation common to all nodes, and its AR(1)
  // coefficient per interval.
  double spatial_correlation = 0.8;
  double noise_ar = 0.9;
  std::uint64_t seed = 0;
  std::string start_date = "2022-08-28";
  int day_start_minute = 6 * 60;
  int day_end_minute = 19 * 60;
  double segment_spacing_m = 600.0;
  double origin_lat = 24.7800;
  double origin_lon = 120.9900;

  void validate() const;
  static SynthConfig from_config(const KeyValueConfig& kv);
  std::string serialize() const;
};

struct SynthData {
  flow::FlowMatrix gct;
  flow::FlowMatrix vehicle;
  flow::CameraMapping mapping;
  std::vector<flow::RoadSegment> segments;
  std::vector<double> vehicle_scale;  // a_s per node
  std::vector<double> vehicle_level;  // per node
  std::vector<double> pedestrian_weight;  // per node
};

// Vehicle counts v = round(level_s * profile(t) + fluctuation), GCT counts
// g = round(a_s * v + pedestrian_s(t) + sampling noise), both clamped at 0.
// Cameras sit on the first M nodes. Each day draws from its own stream.
SynthData generate(const SynthConfig& config);

// gct_flows.csv, vehicle_flows.csv, camera_map.csv, segments.csv.
void write_dataset(const SynthData& data, const std::string& dir);

}  // namespace tel2veh::synth
