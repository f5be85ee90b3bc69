#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tel2veh/tel2veh.h"

namespace fs = std::filesystem;

namespace {

const char* kTiny =
    "channels=2\nlayers=2\ndilations=1,2\nembedding_dim=2\nhead_hidden=8\nattention_dim=3\n"
    "stage1_epochs=1\nstage2_epochs=1\nworkers=1\n";

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("t2v_capi_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string synth_dir() {
  static const std::string dir = [] {
    const auto p = scratch("data");
    REQUIRE(t2v_synth(nullptr, "n_nodes=5\nm_cameras=2\ndays=3\nseed=2", p.string().c_str()) == T2V_OK);
    return p.string();
  }();
  return dir;
}

std::size_t count_lines(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("version and status names") {
  CHECK(std::strlen(t2v_version()) > 0);
  CHECK(std::string(t2v_status_name(T2V_OK)) == "ok");
  CHECK(std::string(t2v_status_name(T2V_ERR_CONFIG)) == "config error");
  CHECK(std::strlen(t2v_status_name(static_cast<t2v_status>(99))) > 0);
}

TEST_CASE("errors set the thread's last message and successes clear it") {
  double ir = 0.0;
  CHECK(t2v_improvement_ratio(1.0, 0.0, &ir) == T2V_ERR_INVALID_ARGUMENT);
  CHECK(std::strlen(t2v_last_error()) > 0);
  CHECK(t2v_improvement_ratio(8.88, 10.0, &ir) == T2V_OK);
  CHECK(ir == doctest::Approx(11.2).epsilon(1e-12));
  CHECK(std::string(t2v_last_error()).empty());
  CHECK(t2v_improvement_ratio(1.0, 2.0, nullptr) == T2V_ERR_INVALID_ARGUMENT);

  t2v_flow* f = nullptr;
  CHECK(t2v_flow_load("/nonexistent/gct.csv", 0, &f) == T2V_ERR_IO);
  CHECK(f == nullptr);
  CHECK(t2v_flow_load(nullptr, 0, &f) == T2V_ERR_INVALID_ARGUMENT);
  CHECK(t2v_flow_load("x", 7, &f) == T2V_ERR_INVALID_ARGUMENT);
  t2v_flow_free(nullptr);
}

TEST_CASE("schedule counts") {
  size_t fusion = 0, baseline = 0;
  REQUIRE(t2v_loo_schedule(9, 10, &fusion, &baseline) == T2V_OK);
  CHECK(fusion == 90);
  CHECK(baseline == 90);
}

TEST_CASE("synth writes a dataset readable through flow handles") {
  const fs::path dir = synth_dir();
  for (const char* f : {"gct_flows.csv", "vehicle_flows.csv", "camera_map.csv", "segments.csv"}) {
    CHECK(fs::exists(dir / f));
  }
  t2v_flow* g = nullptr;
  REQUIRE(t2v_flow_load((dir / "gct_flows.csv").string().c_str(), 0, &g) == T2V_OK);
  CHECK(t2v_flow_rows(g) == 3 * 156);
  CHECK(t2v_flow_nodes(g) == 5);
  CHECK(std::string(t2v_flow_node_id(g, 4)) == "5");
  CHECK(t2v_flow_node_id(g, 5) == nullptr);
  double v = -1.0;
  CHECK(t2v_flow_value(g, 0, 0, &v) == T2V_OK);
  CHECK(v >= 0.0);
  CHECK(t2v_flow_value(g, 10000, 0, &v) == T2V_ERR_INVALID_ARGUMENT);
  int64_t t0 = 0, t1 = 0;
  CHECK(t2v_flow_time(g, 0, &t0) == T2V_OK);
  CHECK(t2v_flow_time(g, 1, &t1) == T2V_OK);
  CHECK(t1 - t0 == 300);
  t2v_stats st{};
  CHECK(t2v_flow_stats(g, &st) == T2V_OK);
  CHECK(st.samples == 468);
  CHECK(st.gap_cells == 0);
  CHECK(st.mean > 0.0);
  CHECK(st.max_node_mean >= st.min_node_mean);
  t2v_flow_free(g);

  size_t defined = 0, total = 0;
  const auto out = (dir / "corr.csv").string();
  CHECK(t2v_correlate((dir / "gct_flows.csv").string().c_str(), (dir / "vehicle_flows.csv").string().c_str(),
                      (dir / "camera_map.csv").string().c_str(), out.c_str(), &defined, &total) == T2V_OK);
  CHECK(total == 6);
  CHECK(defined == 6);
  CHECK(count_lines(out) == 4);

  CHECK(t2v_synth(nullptr, "n_nodes=5\nbogus_key=1", scratch("bad").string().c_str()) == T2V_ERR_CONFIG);
  CHECK(std::string(t2v_last_error()).find("bogus_key") != std::string::npos);
  CHECK(t2v_synth(nullptr, "n_nodes=2\nm_cameras=2", scratch("bad2").string().c_str()) == T2V_ERR_CONFIG);
  CHECK(t2v_synth("/nonexistent.cfg", nullptr, scratch("bad3").string().c_str()) == T2V_ERR_IO);
}

namespace {
struct Collected {
  std::vector<std::string> lines;
};
void collect(const char* msg, void* user) { static_cast<Collected*>(user)->lines.emplace_back(msg); }
}  // namespace

TEST_CASE("ingest counts and reports bad lines") {
  const auto dir = scratch("ingest");
  std::ofstream(dir / "segments.csv") << "segment_id,lat,lon\n1,24.78,120.99\n2,24.79,121.00\n";
  std::ofstream(dir / "records.csv") << "time,device,lat,lon\n"
                                        "2022-08-28 06:01,h1,24.78,120.99\n"
                                        "2022-08-28 06:02,h2,24.79,121.00\n"
                                        "2022-08-28 06:07,h3,24.78,120.99\n"
                                        "2022-08-28 05:00,h4,24.78,120.99\n"
                                        "2022-08-28 06:08,h5,25.50,120.99\n"
                                        "broken line\n";
  t2v_ingest_options opt{};
  Collected warnings;
  opt.on_warning = collect;
  opt.user = &warnings;
  opt.shards = 2;
  t2v_ingest_summary sum{};
  const auto out = (dir / "gct.csv").string();
  REQUIRE(t2v_ingest((dir / "records.csv").string().c_str(), (dir / "segments.csv").string().c_str(), &opt,
                     out.c_str(), &sum) == T2V_OK);
  CHECK(sum.records == 5);
  CHECK(sum.bad_lines == 1);
  CHECK(sum.outside_window == 1);
  CHECK(sum.outside_segments == 1);
  CHECK(sum.rows == 156);
  CHECK(sum.nodes == 2);
  REQUIRE(warnings.lines.size() == 1);
  CHECK(warnings.lines[0].rfind("line 7:", 0) == 0);

  t2v_flow* g = nullptr;
  REQUIRE(t2v_flow_load(out.c_str(), 0, &g) == T2V_OK);
  double v = 0.0;
  t2v_flow_value(g, 0, 0, &v);
  CHECK(v == 1.0);
  t2v_flow_value(g, 0, 1, &v);
  CHECK(v == 1.0);
  t2v_flow_value(g, 1, 0, &v);
  CHECK(v == 1.0);
  t2v_flow_free(g);

  opt.day_start = "6am";
  CHECK(t2v_ingest((dir / "records.csv").string().c_str(), (dir / "segments.csv").string().c_str(), &opt,
                   out.c_str(), &sum) == T2V_ERR_INVALID_ARGUMENT);
}

TEST_CASE("two-stage training through the API") {
  const std::string data = synth_dir();
  const auto dir = scratch("train");
  const auto gck = (dir / "gct.ckpt").string(), vck = (dir / "veh.ckpt").string();
  t2v_train_summary s1{};
  REQUIRE(t2v_train_stage1(data.c_str(), nullptr, kTiny, "gct", 1, nullptr, gck.c_str(), &s1) == T2V_OK);
  CHECK(s1.epochs == 1);
  CHECK(s1.steps > 0);
  CHECK(s1.reference_val > 0.0);
  CHECK(std::string(s1.fingerprint).rfind("0x", 0) == 0);
  CHECK(std::strlen(s1.fingerprint) == 18);
  REQUIRE(t2v_train_stage1(data.c_str(), nullptr, kTiny, "vehicle", 1, "Cam2", vck.c_str(), nullptr) == T2V_OK);
  CHECK(t2v_train_stage1(data.c_str(), nullptr, kTiny, "radar", 1, nullptr, gck.c_str(), nullptr) ==
        T2V_ERR_INVALID_ARGUMENT);

  t2v_train_summary s2{};
  const auto out = (dir / "stage2.ckpt").string(), log = (dir / "loss.csv").string();
  REQUIRE(t2v_train_stage2(data.c_str(), gck.c_str(), vck.c_str(), nullptr, kTiny, 3, "Cam2", out.c_str(),
                           log.c_str(), &s2) == T2V_OK);
  CHECK(s2.n_horizons == 3);
  CHECK(s2.horizons[2] == 12);
  CHECK(s2.test_mae[0] > 0.0);
  CHECK(s2.test_rmse[0] >= s2.test_mae[0]);
  CHECK(s2.lambda > 0.0);
  CHECK(fs::exists(out));
  CHECK(count_lines(log) == s2.steps + 1);

  // The vehicle extractor saw Cam1 only; asking for a fold without an
  // excluded camera is a mismatch.
  CHECK(t2v_train_stage2(data.c_str(), gck.c_str(), vck.c_str(), nullptr, kTiny, 3, nullptr, out.c_str(), nullptr,
                         nullptr) == T2V_ERR_CONFIG);
  CHECK(t2v_train_stage2(data.c_str(), gck.c_str(), vck.c_str(), nullptr, kTiny, 3, "Cam9", out.c_str(), nullptr,
                         nullptr) != T2V_OK);
}

TEST_CASE("leave-one-out through the API writes all three report files") {
  const std::string data = synth_dir();
  const auto dir = scratch("loo");
  const uint64_t seeds[] = {0};
  t2v_loo_options opt{};
  opt.data_dir = data.c_str();
  opt.overrides = kTiny;
  opt.seeds = seeds;
  opt.n_seeds = 1;
  opt.horizons = "3,6";
  const std::string out_dir = dir.string();
  opt.out_dir = out_dir.c_str();
  Collected progress;
  opt.progress = collect;
  opt.user = &progress;
  t2v_loo_summary sum{};
  REQUIRE(t2v_evaluate_loo(&opt, &sum) == T2V_OK);
  CHECK(sum.folds == 2);
  CHECK(sum.completed == 2);
  CHECK(sum.scheduled_trainings == 4);
  CHECK(sum.n_horizons == 2);
  CHECK(sum.horizons[1] == 6);
  CHECK(std::isfinite(sum.ir_mae[0]));
  CHECK(!progress.lines.empty());
  CHECK(fs::exists(dir / "report.txt"));
  CHECK(count_lines(dir / "report_rows.csv") == 1 + 2 * 2 * 2 * 3);
  bool plot = false;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename().string().rfind("plot_", 0) == 0) {
      plot = true;
      CHECK(count_lines(e.path()) == 157);
    }
  }
  CHECK(plot);
  opt.n_seeds = 0;
  CHECK(t2v_evaluate_loo(&opt, &sum) == T2V_ERR_INVALID_ARGUMENT);
  CHECK(t2v_evaluate_loo(nullptr, &sum) == T2V_ERR_INVALID_ARGUMENT);
}
