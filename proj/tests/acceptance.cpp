// Acceptance run: one PASS / FAIL / SKIPPED line per criterion, exit 1 on
// any FAIL. Long: the synthetic leave-one-out study takes about 25 minutes
// on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "common/error.hpp"
#include "harness/harness.hpp"
#include "numcore/rng.hpp"
#include "support/gradcheck.hpp"
#include "synthgen/synthgen.hpp"

using namespace tel2veh;
using harness::ExperimentConfig;

namespace {

enum class Verdict { pass, fail, skipped };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

ExperimentConfig config_from(const std::string& text) {
  return ExperimentConfig::from_config(KeyValueConfig::parse(text));
}

const char* kTiny =
    "channels = 2\nlayers = 2\ndilations = 1,2\nembedding_dim = 2\nhead_hidden = 8\nattention_dim = 3\n"
    "stage1_epochs = 1\nstage2_epochs = 2\nworkers = 1\n";

// Settings used for the synthetic studies.
const char* kStudy =
    "channels = 8\nlayers = 4\nstage1_epochs = 15\nstage2_epochs = 15\nstage1_patience = 5\n"
    "stage2_patience = 5\nworkers = 1\n";

const char* kNoiselessStudy =
    "channels = 8\nlayers = 4\nstage1_epochs = 30\nstage2_epochs = 60\nstage1_patience = 10\n"
    "stage2_patience = 15\nworkers = 1\n";

harness::Dataset synth_dataset(const synth::SynthConfig& sc, const ExperimentConfig& cfg) {
  auto d = synth::generate(sc);
  return harness::make_dataset(d.gct, d.vehicle, d.mapping, d.segments, std::nullopt, cfg);
}

// ---------------------------------------------------------------------------

bool near(double got, double want, double tol) { return std::fabs(got - want) <= tol; }

Outcome real_data_statistics() {
  const char* dir = std::getenv("TEL2VEH_DATA_DIR");
  if (!dir || !*dir) return {Verdict::skipped, "set TEL2VEH_DATA_DIR to the released flow files"};
  const auto t0 = Clock::now();
  const std::filesystem::path d(dir);
  const auto gct = flow::load_flow_matrix((d / "gct_flows.csv").string(), flow::FlowKind::gct);
  const auto veh = flow::load_flow_matrix((d / "vehicle_flows.csv").string(), flow::FlowKind::vehicle);
  const auto g = flow::descriptive_stats(gct), v = flow::descriptive_stats(veh);
  const double secs = seconds_since(t0);
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "gct %zux%zu mean %.2f std %.2f max %s min %s | vehicle %zux%zu mean %.2f std %.2f max %s min %s | "
                "%.2fs",
                g.samples, g.nodes, g.mean, g.std, g.max_node.c_str(), g.min_node.c_str(), v.samples, v.nodes, v.mean,
                v.std, v.max_node.c_str(), v.min_node.c_str(), secs);
  const bool ok = g.samples == 4240 && v.samples == 4240 && g.nodes == 49 && v.nodes == 9 &&
                  near(g.mean, 83.6, 0.1) && near(g.std, 76.1, 0.2) && g.max_node == "46" && g.min_node == "11" &&
                  near(v.mean, 251.9, 0.1) && near(v.std, 125.1, 0.2) && v.max_node == "Cam5" &&
                  v.min_node == "Cam9" && secs < 10.0;
  return {ok ? Verdict::pass : Verdict::fail, buf};
}

Outcome finite_differences() {
  const auto t0 = Clock::now();
  double worst_prim = 0.0;
  std::string where;
  for (const auto& c : t2v_test::primitive_cases()) {
    const auto r = t2v_test::check_gradients(c.inputs, c.loss);
    if (r.max_rel_error > worst_prim) {
      worst_prim = r.max_rel_error;
      where = c.name + ":" + r.worst;
    }
  }
  auto s2 = t2v_test::stage2_case();
  const std::vector<num::NamedTensor> params = s2.model.params().items();
  const auto r2 = t2v_test::check_gradients(params, [&s2] { return s2.loss(); });
  const double secs = seconds_since(t0);
  char buf[256];
  std::snprintf(buf, sizeof buf, "primitives max %.2e (%s), stage 2 max %.2e over %zu elements (%s), %.1fs", worst_prim,
                where.c_str(), r2.max_rel_error, r2.checked, r2.worst.c_str(), secs);
  const bool ok = worst_prim < 1e-4 && r2.max_rel_error < 1e-3 && r2.checked > 0 && secs < 120.0;
  return {ok ? Verdict::pass : Verdict::fail, buf};
}

Outcome loss_identity() {
  const auto cfg = config_from(kTiny);
  synth::SynthConfig sc;
  sc.n_nodes = 6;
  sc.m_cameras = 3;
  sc.days = 4;
  const auto data = synth_dataset(sc, cfg);
  const auto base = harness::prepare_fold(data, cfg, std::nullopt);
  const auto fold = harness::prepare_fold(data, cfg, 1);
  const auto g = harness::run_stage1(base, cfg, false, 1);
  const auto v = harness::run_stage1(fold, cfg, true, 2);
  const auto s2 = harness::run_stage2(fold, cfg, g.model, v.model, 3);

  auto mc = cfg.model;
  mc.n_nodes = data.gct.nodes();
  mc.in_channels = 1;
  const auto bl = fusion::train_baseline(fold.train.gct, fold.train.vehicle, fold.val.gct, fold.val.vehicle,
                                         fold.graph, fold.camera_nodes, mc, cfg.lambda_init, cfg.stage2,
                                         fold.vehicle_mean, fold.vehicle_std, 4);

  std::size_t checked = 0, broken = 0, negative = 0;
  for (const auto* steps : {&s2.result.steps, &bl.steps}) {
    for (const auto& e : *steps) {
      ++checked;
      if (e.total != e.loss_with + e.lambda * e.loss_without) ++broken;
      if (!(e.lambda >= 0.0)) ++negative;
    }
  }
  const fusion::Stage2Model fresh(mc, cfg.mgat, fold.graph, fold.camera_nodes, cfg.lambda_init, 9);
  const double lambda0 = fresh.lambda();
  const double first = s2.result.steps.empty() ? -1.0 : s2.result.steps.front().lambda;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu logged steps, %zu identity mismatches, %zu negative lambda, lambda0 %.12g (first step %.12g)",
                checked, broken, negative, lambda0, first);
  const bool ok = checked > 0 && broken == 0 && negative == 0 && near(lambda0, 1e-4, 1e-9) && near(first, 1e-4, 1e-9);
  return {ok ? Verdict::pass : Verdict::fail, buf};
}

Outcome synthetic_study() {
  const auto cfg = config_from(kStudy);
  const auto t0 = Clock::now();
  std::size_t wins = 0;
  double ir_sum = 0.0;
  std::string per_seed;
  const std::size_t seeds = 10;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    synth::SynthConfig sc;  // N = 12, M = 4, 14 days
    sc.seed = s;
    const auto data = synth_dataset(sc, cfg);
    harness::LooOptions opt;
    opt.seeds = {s};
    const auto rep = harness::leave_one_out(data, cfg, opt);
    bool all = rep.completed == data.cameras();
    for (const auto& h : rep.summary) all = all && h.with.mae < h.without.mae;
    wins += all ? 1 : 0;
    const double ir = rep.summary.empty() || !rep.summary[0].ir_mae ? 0.0 : *rep.summary[0].ir_mae;
    ir_sum += ir;
    per_seed += (s ? " " : "") + fmt("%.1f", ir) + (all ? "" : "*");
    std::fprintf(stderr, "  seed %d: IR at 3 steps %.2f%%, wins all horizons: %s\n", static_cast<int>(s), ir,
                 all ? "yes" : "no");
  }
  const double mean_ir = ir_sum / seeds;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu/%zu seeds better at every horizon, mean IR@3 %.2f%% [%s] (%.0fs)", wins, seeds,
                mean_ir, per_seed.c_str(), seconds_since(t0));
  return {wins >= 8 && mean_ir >= 10.0 ? Verdict::pass : Verdict::fail, buf};
}

Outcome noiseless_recovery() {
  const auto cfg = config_from(kNoiselessStudy);
  synth::SynthConfig sc;
  sc.vehicle_scale_min = sc.vehicle_scale_max = 3.0;
  sc.vehicle_level_min = sc.vehicle_level_max = 450.0;
  sc.pedestrian_noise_std = 0.0;
  sc.observation_noise_std = 0.0;
  const auto data = synth_dataset(sc, cfg);
  const auto base = harness::prepare_fold(data, cfg, std::nullopt);
  const auto fold = harness::prepare_fold(data, cfg, 0);
  const auto g = harness::run_stage1(base, cfg, false, 1);
  const auto v = harness::run_stage1(fold, cfg, true, 2);
  const auto r = harness::run_stage2(fold, cfg, g.model, v.model, 3);
  const fusion::FusionData test(g.model, v.model, fold.test.gct, fold.test.vehicle);
  const double cam = fusion::stage2_camera_mae(r.result.model, test);
  double excluded = 0.0;
  for (const auto& m : r.test) excluded = std::max(excluded, m.mae);
  const double mean = flow::descriptive_stats(data.vehicle).mean;
  char buf[256];
  std::snprintf(buf, sizeof buf, "camera nodes %.3f (%.2f%%), withheld %s worst horizon %.3f (%.2f%%), mean flow %.1f",
                cam, 100.0 * cam / mean, fold.excluded_camera.c_str(), excluded, 100.0 * excluded / mean, mean);
  const bool ok = !r.test.empty() && cam < 0.01 * mean && excluded < 0.05 * mean;
  return {ok ? Verdict::pass : Verdict::fail, buf};
}

Outcome schedule_and_hygiene() {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(s);
  const auto jobs = harness::loo_schedule(9, seeds);
  std::size_t with = 0, without = 0;
  for (const auto& j : jobs) (j.arm == harness::Arm::with_framework ? with : without)++;

  const auto cfg = config_from(kTiny);
  synth::SynthConfig sc;
  sc.n_nodes = 12;
  sc.m_cameras = 9;
  sc.days = 3;
  const auto data = synth_dataset(sc, cfg);
  std::size_t clean = 0;
  for (std::size_t c = 0; c < data.cameras(); ++c) {
    const auto fold = harness::prepare_fold(data, cfg, c);
    const auto tag = harness::vehicle_lineage_tag(fold.excluded_camera);
    const auto& ids = fold.retained_vehicle.node_ids();
    bool ok = std::find(ids.begin(), ids.end(), fold.excluded_camera) == ids.end();
    for (const auto* w : {&fold.train.gct, &fold.train.vehicle, &fold.val.gct, &fold.val.vehicle}) {
      ok = ok && w->lineage().count(tag) == 0;
    }
    ok = ok && std::find(fold.camera_nodes.begin(), fold.camera_nodes.end(), fold.excluded_node) ==
                   fold.camera_nodes.end();
    try {
      harness::check_fold_hygiene(fold);
    } catch (const Error&) {
      ok = false;
    }
    // The check must also trip on a leaked window set.
    auto leaked = fold;
    leaked.train.vehicle = stgnn::WindowSet(data.vehicle, flow::fit_normalizer(data.vehicle, {0, 100}),
                                            fold.train.gct.starts(), cfg.model.in_steps, cfg.model.out_steps, {tag});
    try {
      harness::check_fold_hygiene(leaked);
      ok = false;
    } catch (const Error& e) {
      ok = ok && e.kind() == ErrorKind::state;
    }
    clean += ok ? 1 : 0;
  }
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu with + %zu without trainings scheduled, %zu/%zu folds clean", with, without,
                clean, data.cameras());
  return {with == 90 && without == 90 && jobs.size() == 180 && clean == 9 ? Verdict::pass : Verdict::fail, buf};
}

Outcome metrics_oracle() {
  num::Rng rng(4096);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform(0.0, 500.0));
    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = rng.uniform() < 0.1 ? 0.0 : std::round(rng.uniform(0.0, 600.0));
      p[i] = t[i] + rng.normal() * 25.0;
    }
    long double a = 0, s = 0, pct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const long double e = static_cast<long double>(p[i]) - t[i];
      a += std::fabs(e);
      s += e * e;
      pct += std::fabs(e) / std::max<long double>(std::fabs(t[i]), 1.0L);
    }
    const auto got = harness::metrics(p, t);
    const double want[3] = {static_cast<double>(a / n), static_cast<double>(std::sqrt(s / n)),
                            static_cast<double>(100.0L * pct / n)};
    const double have[3] = {got.mae, got.rmse, got.mape};
    for (int k = 0; k < 3; ++k) worst = std::max(worst, std::fabs(have[k] - want[k]) / std::max(1.0, want[k]));
  }
  const double ir1 = harness::improvement_ratio(103.6, 116.7).value_or(NAN);
  const double ir2 = harness::improvement_ratio(73.37, 89.67).value_or(NAN);
  const std::string r1 = fmt("%.1f", ir1), r2 = fmt("%.1f", ir2);
  char buf[160];
  std::snprintf(buf, sizeof buf, "max relative deviation %.2e over 1000 vectors; IR %s%% and %s%%", worst, r1.c_str(),
                r2.c_str());
  return {worst <= 1e-12 && r1 == "11.2" && r2 == "18.2" ? Verdict::pass : Verdict::fail, buf};
}

Outcome determinism() {
  const auto cfg = config_from(kTiny);
  synth::SynthConfig sc;
  sc.n_nodes = 5;
  sc.m_cameras = 2;
  sc.days = 3;
  sc.seed = 3;
  const auto data = synth_dataset(sc, cfg);
  auto run_once = [&](std::size_t workers) {
    std::vector<std::string> out;
    const auto base = harness::prepare_fold(data, cfg, std::nullopt);
    const auto fold = harness::prepare_fold(data, cfg, 0);
    const auto g = harness::run_stage1(base, cfg, false, 11);
    const auto v = harness::run_stage1(fold, cfg, true, 12);
    const auto s2 = harness::run_stage2(fold, cfg, g.model, v.model, 13);
    out.push_back(g.model.to_checkpoint().serialize());
    out.push_back(v.model.to_checkpoint().serialize());
    out.push_back(s2.result.model.to_checkpoint().serialize());
    harness::LooOptions opt;
    opt.seeds = {0, 1};
    opt.workers = workers;
    const auto rep = harness::leave_one_out(data, cfg, opt);
    out.push_back(harness::render_text(rep));
    out.push_back(harness::render_rows(rep));
    const auto last_day = flow::format_timestamp(data.gct.times().back()).substr(0, 10);
    out.push_back(harness::render_plot(rep, data, rep.cameras.front(), last_day));
    return out;
  };
  const auto a = run_once(1), b = run_once(1), c = run_once(3);
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += (a[i] == b[i] && a[i] == c[i]) ? 1 : 0;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu/%zu artifacts byte-identical across three runs (1, 1 and 3 workers)", same,
                a.size());
  return {same == a.size() ? Verdict::pass : Verdict::fail, buf};
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"real-data descriptive statistics", real_data_statistics},
      {"gradients match finite differences", finite_differences},
      {"dynamic loss identity and lambda", loss_identity},
      {"synthetic study: framework beats GCT-only", synthetic_study},
      {"noiseless recovery", noiseless_recovery},
      {"fold schedule and hygiene", schedule_and_hygiene},
      {"metrics oracle and improvement ratio", metrics_oracle},
      {"bit-identical reruns", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o = {Verdict::fail, std::string("threw: ") + e.what()};
    }
    const char* tag = o.verdict == Verdict::pass ? "PASS" : o.verdict == Verdict::fail ? "FAIL" : "SKIPPED";
    if (o.verdict == Verdict::fail) ++failures;
    std::printf("[%s] %zu %s: %s\n", tag, i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
