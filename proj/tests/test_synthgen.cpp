#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "common/error.hpp"
#include "graphspec/graphspec.hpp"
#include "synthgen/synthgen.hpp"

using namespace tel2veh;
using namespace tel2veh::synth;

namespace {

SynthConfig noiseless() {
  SynthConfig c;
  c.days = 3;
  c.vehicle_scale_min = c.vehicle_scale_max = 3.0;
  c.vehicle_level_min = c.vehicle_level_max = 450.0;
  c.pedestrian_noise_std = 0.0;
  c.observation_noise_std = 0.0;
  return c;
}

std::size_t row_at(const flow::FlowMatrix& m, int hour, int minute) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (flow::seconds_of_day(m.times()[r]) == hour * 3600 + minute * 60) return r;
  }
  FAIL("no such row");
  return 0;
}

}  // namespace

TEST_CASE("noiseless data: GCT is exactly a_s times vehicle flow") {
  const auto d = generate(noiseless());
  for (std::size_t r = 0; r < d.gct.rows(); ++r) {
    for (std::size_t m = 0; m < d.vehicle.nodes(); ++m) CHECK(d.gct.at(r, m) == 3.0 * d.vehicle.at(r, m));
  }
  const auto corr = flow::daily_pearson(d.gct, d.vehicle, d.mapping);
  for (const auto& r : corr.r) {
    REQUIRE(r);
    CHECK(*r == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("noiseless data follows the profile in closed form") {
  auto c = noiseless();
  const auto commute = generate(c);
  // Morning peak reaches the level exactly.
  CHECK(commute.vehicle.at(row_at(commute.vehicle, 8, 0), 0) == 450.0);
  // 06:00: floor plus the tail of the morning bump.
  CHECK(profile_value(Profile::commute, 360) == doctest::Approx(0.3647746968108954).epsilon(1e-14));
  CHECK(commute.vehicle.at(0, 1) == 164.0);
  c.base_profile = Profile::midday;
  const auto midday = generate(c);
  CHECK(midday.vehicle.at(row_at(midday.vehicle, 12, 30), 2) == 450.0);
  c.base_profile = Profile::flat;
  const auto flat = generate(c);
  for (double v : flat.vehicle.values()) CHECK(v == 450.0);
  for (double g : flat.gct.values()) CHECK(g == 1350.0);
  for (double m = 360; m < 1140; m += 5) {
    for (auto p : {Profile::commute, Profile::midday}) {
      CHECK(profile_value(p, m) >= 0.3);
      CHECK(profile_value(p, m) <= 1.0);
    }
  }
}

TEST_CASE("generation is deterministic and days are independent streams") {
  SynthConfig c;
  c.days = 3;
  c.seed = 12;
  const auto a = generate(c), b = generate(c);
  CHECK(std::equal(a.gct.values().begin(), a.gct.values().end(), b.gct.values().begin()));
  CHECK(a.vehicle_scale == b.vehicle_scale);
  c.days = 5;
  const auto longer = generate(c);
  const std::size_t cells = a.gct.values().size();
  CHECK(std::equal(a.gct.values().begin(), a.gct.values().end(), longer.gct.values().begin()));
  CHECK(longer.gct.values().size() == cells * 5 / 3);
  c.seed = 13;
  const auto other = generate(c);
  CHECK_FALSE(std::equal(a.gct.values().begin(), a.gct.values().end(), other.gct.values().begin()));
}

TEST_CASE("default noise keeps daily correlation high in most cells") {
  SynthConfig c;
  std::size_t high = 0, total = 0;
  for (std::uint64_t seed : {0, 1, 2}) {
    c.seed = seed;
    const auto d = generate(c);
    const auto corr = flow::daily_pearson(d.gct, d.vehicle, d.mapping);
    for (const auto& r : corr.r) {
      ++total;
      if (r && *r >= 0.6) ++high;
    }
    for (std::size_t s = 0; s < c.n_nodes; ++s) {
      CHECK(d.vehicle_scale[s] >= 0.15);
      CHECK(d.vehicle_scale[s] <= 0.45);
    }
  }
  CHECK(total == 3 * 14 * 4);
  MESSAGE(high << " of " << total << " daily cells have r >= 0.6");
  CHECK(static_cast<double>(high) >= 0.9 * static_cast<double>(total));
}

TEST_CASE("written datasets load back and satisfy the data contract") {
  SynthConfig c;
  c.n_nodes = 7;
  c.m_cameras = 3;
  c.days = 2;
  c.seed = 5;
  const auto d = generate(c);
  const auto dir = std::filesystem::temp_directory_path() / "t2v_synth_out";
  std::filesystem::remove_all(dir);
  write_dataset(d, dir.string());
  const auto gct = flow::load_flow_matrix((dir / "gct_flows.csv").string(), flow::FlowKind::gct);
  const auto veh = flow::load_flow_matrix((dir / "vehicle_flows.csv").string(), flow::FlowKind::vehicle);
  const auto map = flow::load_camera_mapping((dir / "camera_map.csv").string());
  const auto segs = flow::load_segments((dir / "segments.csv").string());
  CHECK(gct.rows() == 2 * 156);
  CHECK(gct.nodes() == 7);
  CHECK(veh.node_ids() == std::vector<std::string>{"Cam1", "Cam2", "Cam3"});
  CHECK(flow::format_timestamp(gct.times().front()) == "2022-08-28 06:00");
  CHECK(flow::format_timestamp(gct.times()[155]) == "2022-08-28 18:55");
  CHECK_NOTHROW(map.validate(gct, veh));
  CHECK(map.segment_of("Cam2") == "2");
  for (const auto* m : {&gct, &veh}) {
    for (double v : m->values()) {
      CHECK(v >= 0.0);
      CHECK(v == std::round(v));
    }
  }
  REQUIRE(segs.size() == 7);
  // 3-column grid with 600 m spacing.
  CHECK(graph::haversine_m(segs[0].center_lat, segs[0].center_lon, segs[1].center_lat, segs[1].center_lon) ==
        doctest::Approx(600.0).epsilon(1e-3));
  CHECK(graph::haversine_m(segs[0].center_lat, segs[0].center_lon, segs[3].center_lat, segs[3].center_lon) ==
        doctest::Approx(600.0).epsilon(1e-3));
}

TEST_CASE("configuration keys and validation") {
  const auto c = SynthConfig::from_config(KeyValueConfig::parse(
      "n_nodes = 6\nm_cameras = 2\nvehicle_scale = 3\nbase_profile = midday-peaked\nday_start = 07:00\n"
      "day_end = 18:00\nseed = 9\n"));
  CHECK(c.vehicle_scale_min == 3.0);
  CHECK(c.vehicle_scale_max == 3.0);
  CHECK(c.base_profile == Profile::midday);
  CHECK(c.day_start_minute == 420);
  CHECK(SynthConfig::from_config(KeyValueConfig::parse(c.serialize())).serialize() == c.serialize());
  CHECK(generate(c).gct.rows() == 14 * 132);

  auto bad = c;
  bad.m_cameras = 6;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.interval_minutes = 7;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.noise_ar = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.start_date = "2022-13-01";
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(parse_profile("weekend"), Error);
}
