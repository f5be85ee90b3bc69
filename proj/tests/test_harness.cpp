#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "common/error.hpp"
#include "harness/harness.hpp"
#include "numcore/rng.hpp"
#include "synthgen/synthgen.hpp"

using namespace tel2veh;
using namespace tel2veh::harness;

namespace {

// Straightforward loops, kept apart from the library code on purpose.
MetricsTriple oracle_metrics(const std::vector<double>& p, const std::vector<double>& t) {
  long double a = 0, s = 0, pct = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const long double e = static_cast<long double>(p[i]) - t[i];
    a += std::fabs(e);
    s += e * e;
    pct += std::fabs(e) / std::max<long double>(std::fabs(t[i]), 1.0L);
  }
  const long double n = static_cast<long double>(p.size());
  return {static_cast<double>(a / n), static_cast<double>(std::sqrt(s / n)), static_cast<double>(100.0L * pct / n)};
}

ExperimentConfig tiny_config() {
  return ExperimentConfig::from_config(KeyValueConfig::parse(
      "channels = 2\nlayers = 2\ndilations = 1,2\nembedding_dim = 2\nhead_hidden = 8\n"
      "attention_dim = 3\nstage1_epochs = 1\nstage2_epochs = 1\nbatch_size = 64\nworkers = 1\n"));
}

Dataset tiny_dataset(const ExperimentConfig& cfg, std::size_t cameras = 2) {
  synth::SynthConfig sc;
  sc.n_nodes = 5;
  sc.m_cameras = cameras;
  sc.days = 3;
  sc.seed = 4;
  auto d = synth::generate(sc);
  return make_dataset(d.gct, d.vehicle, d.mapping, d.segments, std::nullopt, cfg);
}

}  // namespace

TEST_CASE("metrics on a worked example") {
  const std::vector<double> pred = {1, 2, 3}, truth = {2, 2, 0};
  const auto m = metrics(pred, truth);
  CHECK(m.mae == doctest::Approx(4.0 / 3.0).epsilon(1e-15));
  CHECK(m.rmse == doctest::Approx(std::sqrt(10.0 / 3.0)).epsilon(1e-15));
  // |1|/2 + 0 + 3/max(0, 1)
  CHECK(m.mape == doctest::Approx(350.0 / 3.0).epsilon(1e-15));
  const auto perfect = metrics(truth, truth);
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);
  CHECK(perfect.mape == 0.0);
  CHECK_THROWS_AS(metrics(pred, std::vector<double>{1.0}), Error);
}

TEST_CASE("metrics agree with the oracle on random vectors") {
  num::Rng rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform(0.0, 300.0));
    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = std::round(rng.uniform(0.0, 400.0)) * (rng.uniform() < 0.1 ? 0.0 : 1.0);
      p[i] = t[i] + rng.normal() * 20.0;
    }
    const auto got = metrics(p, t), want = oracle_metrics(p, t);
    CHECK(std::fabs(got.mae - want.mae) <= 1e-12 * std::max(1.0, want.mae));
    CHECK(std::fabs(got.rmse - want.rmse) <= 1e-12 * std::max(1.0, want.rmse));
    CHECK(std::fabs(got.mape - want.mape) <= 1e-12 * std::max(1.0, want.mape));
    CHECK(got.rmse >= got.mae);
  }
}

TEST_CASE("improvement ratio") {
  CHECK(improvement_ratio(8.88, 10.0).value() == doctest::Approx(11.2).epsilon(1e-12));
  CHECK(improvement_ratio(18.0, 22.0).value() == doctest::Approx(400.0 / 22.0).epsilon(1e-12));
  CHECK(improvement_ratio(5.0, 5.0).value() == 0.0);
  CHECK(improvement_ratio(6.0, 5.0).value() < 0.0);
  CHECK(improvement_ratio(1.0, 0.0) == std::nullopt);
  double prev = 1e300;
  for (double with = 0.0; with <= 20.0; with += 0.5) {
    const double ir = improvement_ratio(with, 10.0).value();
    CHECK(ir < prev);
    prev = ir;
  }
}

TEST_CASE("schedule covers every camera, seed and arm once") {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(s);
  const auto jobs = loo_schedule(9, seeds);
  std::size_t with = 0, without = 0;
  std::map<std::tuple<int, std::size_t, std::uint64_t>, int> seen;
  for (const auto& j : jobs) {
    (j.arm == Arm::with_framework ? with : without)++;
    ++seen[{static_cast<int>(j.arm), j.camera, j.seed}];
    CHECK(j.fold_seed == fold_seed(j.seed, j.camera));
  }
  CHECK(with == 90);
  CHECK(without == 90);
  CHECK(seen.size() == 180);
  CHECK(jobs[0].arm == Arm::with_framework);
  CHECK(jobs[1].arm == Arm::without_framework);
  CHECK(jobs[2].camera == 1);
  CHECK(fold_seed(3, 0) != fold_seed(3, 1));
  CHECK(fold_seed(3, 1) != fold_seed(4, 1));
}

TEST_CASE("config keys, validation and fingerprint") {
  const auto a = tiny_config();
  CHECK(a.model.channels == 2);
  CHECK(a.stage1.batch_size == 64);
  CHECK(a.fingerprint() == tiny_config().fingerprint());
  auto b = a;
  b.lambda_init = 0.5;
  CHECK(b.fingerprint() != a.fingerprint());
  auto back = ExperimentConfig::from_config(KeyValueConfig::parse(a.serialize()));
  CHECK(back.serialize() == a.serialize());
  b = a;
  b.split_test = 0.3;
  CHECK_THROWS_AS(b.validate(), Error);
  b = a;
  b.horizons = {13};
  CHECK_THROWS_AS(b.validate(), Error);
}

TEST_CASE("fold preparation withholds the camera from training and validation") {
  const auto cfg = tiny_config();
  const auto data = tiny_dataset(cfg, 2);
  const auto fold = prepare_fold(data, cfg, 1);
  CHECK(fold.excluded_camera == data.vehicle.node_ids()[1]);
  CHECK(fold.retained == std::vector<std::size_t>{0});
  CHECK(fold.camera_nodes == std::vector<std::size_t>{data.camera_nodes[0]});
  CHECK(fold.retained_vehicle.nodes() == 1);
  CHECK_NOTHROW(check_fold_hygiene(fold));
  CHECK(fold.train.vehicle.lineage().count(vehicle_lineage_tag(fold.excluded_camera)) == 0);
  CHECK(fold.test_truth.size() == fold.test.gct.size() * cfg.model.out_steps);
  // Truth is the raw flow of the withheld camera.
  const auto s = fold.test.gct.starts()[0];
  CHECK(fold.test_truth[0] == data.vehicle.at(s + cfg.model.in_steps, 1));
  const auto split = flow::chronological_split(data.gct.rows(), cfg.split_train, cfg.split_val, cfg.split_test);
  for (auto st : fold.train.gct.starts()) CHECK(st + 24 <= split.train.end);
  for (auto st : fold.val.gct.starts()) CHECK((st >= split.val.begin && st + 24 <= split.val.end));

  auto tainted = fold;
  tainted.train.vehicle = stgnn::WindowSet(data.vehicle, flow::fit_normalizer(data.vehicle, {0, 100}),
                                           fold.train.gct.starts(), cfg.model.in_steps, cfg.model.out_steps,
                                           {vehicle_lineage_tag(fold.excluded_camera)});
  try {
    check_fold_hygiene(tainted);
    FAIL("expected a hygiene failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::state);
  }
  auto supervised = fold;
  supervised.camera_nodes.push_back(fold.excluded_node);
  CHECK_THROWS_AS(check_fold_hygiene(supervised), Error);
}

TEST_CASE("report formats") {
  CHECK(parse_report_format("text-table") == ReportFormat::text_table);
  CHECK(parse_report_format("rows") == ReportFormat::rows);
  CHECK(parse_report_format("plot") == ReportFormat::plot);
  try {
    parse_report_format("html");
    FAIL("expected failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
  }
}

TEST_CASE("two-camera toy run: folds, aggregation and byte-stable reports") {
  const auto cfg = tiny_config();
  const auto data = tiny_dataset(cfg, 2);
  LooOptions opt;
  opt.seeds = {0, 1};
  const auto a = leave_one_out(data, cfg, opt);
  REQUIRE(a.folds.size() == 4);
  CHECK(a.scheduled_trainings == 8);
  CHECK(a.completed == 4);
  CHECK(a.folds[0].camera == a.cameras[0]);
  CHECK(a.folds[1].camera == a.cameras[1]);
  CHECK(a.folds[2].seed == 1);
  for (const auto& f : a.folds) {
    CHECK(f.ok());
    CHECK(f.with.horizons.size() == 3);
    CHECK(f.step1_truth.size() == f.with.step1_pred.size());
    CHECK(f.step1_time.size() == f.step1_truth.size());
  }

  // Means in the summary equal means recomputed from the rows CSV.
  const std::string rows = render_rows(a);
  std::istringstream in(rows);
  std::string line;
  std::getline(in, line);
  CHECK(line == "camera,seed,arm,horizon,metric,value");
  std::map<std::string, std::vector<double>> by_key;
  std::size_t n_rows = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    REQUIRE(f.size() == 6);
    by_key[f[2] + "/" + f[3] + "/" + f[4]].push_back(std::stod(f[5]));
    ++n_rows;
  }
  CHECK(n_rows == 4 * 2 * 3 * 3);
  auto mean = [&](const std::string& k) {
    double s = 0.0;
    for (double v : by_key.at(k)) s += v;
    return s / static_cast<double>(by_key.at(k).size());
  };
  for (const auto& h : a.summary) {
    const std::string hz = std::to_string(h.horizon);
    CHECK(h.with.mae == mean("with/" + hz + "/mae"));
    CHECK(h.without.rmse == mean("without/" + hz + "/rmse"));
    CHECK(h.with.mape == mean("with/" + hz + "/mape"));
    CHECK(h.ir_mae == improvement_ratio(h.with.mae, h.without.mae));
  }

  const auto b = leave_one_out(data, cfg, opt);
  CHECK(render_text(a) == render_text(b));
  CHECK(render_rows(a) == rows);

  const std::string text = render_text(a);
  CHECK(text.find("Average IR") != std::string::npos);
  CHECK(text.find("15 mins.") != std::string::npos);

  const auto dir = std::filesystem::temp_directory_path() / "t2v_harness_report";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto plot = emit_report(a, data, ReportFormat::plot, dir.string());
  std::ifstream pf(plot);
  std::size_t lines = 0;
  std::string first;
  std::getline(pf, first);
  CHECK(first == "time,truth,pred_with,pred_without");
  while (std::getline(pf, line)) ++lines;
  CHECK(lines == 156);
  CHECK(std::filesystem::path(plot).filename().string().rfind("plot_", 0) == 0);
  CHECK_THROWS_AS(render_plot(a, data, "Cam99", ""), Error);

  // A failed fold is listed and left out of the means.
  auto c = a;
  c.folds[3].with.ok = false;
  c.folds[3].with.error = "diverged";
  aggregate(c);
  CHECK(c.completed == 3);
  CHECK(render_text(c).find("diverged") != std::string::npos);
}
