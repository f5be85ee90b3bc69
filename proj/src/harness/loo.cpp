#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

#include "common/error.hpp"
#include "harness/harness.hpp"
#include "numcore/ops.hpp"
#include "numcore/rng.hpp"

namespace tel2veh::harness {

using num::Tensor;

std::string arm_name(Arm arm) { return arm == Arm::with_framework ? "with" : "without"; }

std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold_index) {
  return num::splitmix64(seed) ^ static_cast<std::uint64_t>(fold_index);
}

std::vector<FoldJob> loo_schedule(std::size_t cameras, const std::vector<std::uint64_t>& seeds) {
  if (cameras < 2) fail(ErrorKind::data, "leave-one-out needs at least 2 cameras");
  std::vector<FoldJob> jobs;
  for (std::size_t r = 0; r < seeds.size(); ++r) {
    for (std::size_t c = 0; c < cameras; ++c) {
      for (Arm arm : {Arm::with_framework, Arm::without_framework}) {
        jobs.push_back({arm, c, r, seeds[r], fold_seed(seeds[r], c)});
      }
    }
  }
  return jobs;
}

void run_pool(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------

namespace {

stgnn::StgnnConfig sized(const ExperimentConfig& config, std::size_t nodes) {
  auto c = config.model;
  c.n_nodes = nodes;
  c.in_channels = 1;
  return c;
}

// [windows x T_out] forecasts at one node.
std::vector<double> collect_node(const std::function<Tensor(const std::vector<std::size_t>&)>& predict,
                                 std::size_t windows, std::size_t node) {
  num::NoTapeScope off;
  std::vector<double> out;
  for (std::size_t b = 0; b < windows; b += 256) {
    const auto idx = stgnn::iota_indices(b, std::min(windows, b + 256));
    const Tensor p = predict(idx);
    const std::size_t N = p.dim(1), T = p.dim(2);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto* row = p.values().data() + (i * N + node) * T;
      out.insert(out.end(), row, row + T);
    }
  }
  return out;
}

std::vector<MetricsTriple> horizon_metrics(const std::vector<double>& pred, const std::vector<double>& truth,
                                           std::size_t out_steps, const std::vector<std::size_t>& horizons) {
  const std::size_t W = truth.size() / out_steps;
  std::vector<MetricsTriple> out;
  for (auto h : horizons) {
    std::vector<double> p(W), t(W);
    for (std::size_t w = 0; w < W; ++w) {
      p[w] = pred[w * out_steps + h - 1];
      t[w] = truth[w * out_steps + h - 1];
    }
    out.push_back(metrics(p, t));
  }
  return out;
}

std::vector<double> first_step(const std::vector<double>& pred, std::size_t out_steps) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pred.size(); i += out_steps) out.push_back(pred[i]);
  return out;
}

}  // namespace

Stage1Run run_stage1(const FoldData& fold, const ExperimentConfig& config, bool vehicle, std::uint64_t seed) {
  const auto& train = vehicle ? fold.train.vehicle : fold.train.gct;
  const auto& val = vehicle ? fold.val.vehicle : fold.val.gct;
  const auto& g = vehicle ? fold.vehicle_graph : fold.graph;
  Stage1Run run;
  auto r = stgnn::train_stage1(train, val, g, sized(config, g.size()), config.stage1, seed);
  run.model = std::move(r.model);
  run.log = std::move(r.log);
  run.val_mae = stgnn::evaluate_mae(run.model, val);
  run.persistence_val_mae = stgnn::persistence_mae(val);
  return run;
}

Stage2Run run_stage2(const FoldData& fold, const ExperimentConfig& config, const stgnn::StgnnModel& gct_extractor,
                     const stgnn::StgnnModel& vehicle_extractor, std::uint64_t seed) {
  check_fold_hygiene(fold);
  const fusion::FusionData train(gct_extractor, vehicle_extractor, fold.train.gct, fold.train.vehicle);
  const fusion::FusionData val(gct_extractor, vehicle_extractor, fold.val.gct, fold.val.vehicle);
  for (const auto* d : {&train, &val}) {
    if (fold.excluded && d->lineage().count(vehicle_lineage_tag(fold.excluded_camera))) {
      fail(ErrorKind::state, "withheld camera reached stage-2 training data");
    }
  }
  fusion::Stage2Options options;
  options.mgat = config.mgat;
  options.lambda_init = config.lambda_init;
  options.train = config.stage2;
  Stage2Run run;
  run.result = fusion::train_stage2(gct_extractor, vehicle_extractor, fold.graph, fold.camera_nodes, train, val,
                                    sized(config, fold.graph.size()), options, fold.vehicle_mean, fold.vehicle_std,
                                    seed);
  run.val_camera_mae = fusion::stage2_camera_mae(run.result.model, val);
  if (fold.excluded) {
    const fusion::FusionData test(gct_extractor, vehicle_extractor, fold.test.gct, fold.test.vehicle);
    const auto& model = run.result.model;
    run.test_pred = collect_node(
        [&](const std::vector<std::size_t>& idx) { return model.forward(test.gct_features(idx), test.vehicle_features(idx)); },
        test.size(), fold.excluded_node);
    run.test = horizon_metrics(run.test_pred, fold.test_truth, config.model.out_steps, config.horizons);
  }
  return run;
}

// ---------------------------------------------------------------------------

void aggregate(ExperimentReport& report) {
  const std::size_t H = report.horizons.size();
  auto summarize = [&](const std::vector<const FoldEntry*>& folds) {
    std::vector<HorizonSummary> out(H);
    for (std::size_t h = 0; h < H; ++h) {
      auto& s = out[h];
      s.horizon = report.horizons[h];
      if (folds.empty()) continue;
      for (const auto* f : folds) {
        s.with.mae += f->with.horizons[h].mae;
        s.with.rmse += f->with.horizons[h].rmse;
        s.with.mape += f->with.horizons[h].mape;
        s.without.mae += f->without.horizons[h].mae;
        s.without.rmse += f->without.horizons[h].rmse;
        s.without.mape += f->without.horizons[h].mape;
      }
      const double n = static_cast<double>(folds.size());
      for (auto* m : {&s.with, &s.without}) {
        m->mae /= n;
        m->rmse /= n;
        m->mape /= n;
      }
      s.ir_mae = improvement_ratio(s.with.mae, s.without.mae);
      s.ir_rmse = improvement_ratio(s.with.rmse, s.without.rmse);
      s.ir_mape = improvement_ratio(s.with.mape, s.without.mape);
    }
    return out;
  };
  std::vector<const FoldEntry*> done;
  for (const auto& f : report.folds) {
    if (f.ok()) done.push_back(&f);
  }
  report.completed = done.size();
  report.summary = summarize(done);
  report.per_camera.clear();
  for (const auto& cam : report.cameras) {
    CameraSummary cs;
    cs.camera = cam;
    std::vector<const FoldEntry*> mine;
    for (const auto* f : done) {
      if (f->camera == cam) mine.push_back(f);
    }
    for (const auto& f : report.folds) {
      if (f.camera == cam) {
        cs.node = f.node;
        break;
      }
    }
    cs.completed = mine.size();
    cs.horizons = summarize(mine);
    report.per_camera.push_back(std::move(cs));
  }
}

ExperimentReport leave_one_out(const Dataset& data, const ExperimentConfig& config, const LooOptions& options) {
  config.validate();
  if (options.seeds.empty()) fail(ErrorKind::invalid_argument, "leave_one_out: no seeds");
  std::vector<std::size_t> cameras = options.cameras;
  if (cameras.empty()) {
    for (std::size_t m = 0; m < data.cameras(); ++m) cameras.push_back(m);
  }
  for (auto c : cameras) {
    if (c >= data.cameras()) fail(ErrorKind::invalid_argument, "camera index out of range");
  }
  const std::size_t workers = options.workers ? options.workers : config.workers;
  std::mutex log_mutex;
  auto progress = [&](const std::string& msg) {
    if (!options.progress) return;
    std::lock_guard lock(log_mutex);
    options.progress(msg);
  };

  const FoldData base = prepare_fold(data, config, std::nullopt);
  std::vector<FoldData> folds;
  for (auto c : cameras) {
    folds.push_back(prepare_fold(data, config, c));
    check_fold_hygiene(folds.back());
  }

  const std::size_t S = options.seeds.size();
  std::vector<std::optional<stgnn::StgnnModel>> gct_models(S);
  std::vector<std::string> gct_errors(S);
  run_pool(S, workers, [&](std::size_t r) {
    try {
      const auto seed = num::Rng(options.seeds[r]).split(0x6C7).next_u64();
      gct_models[r] = run_stage1(base, config, false, seed).model;
      progress("seed " + std::to_string(options.seeds[r]) + ": GCT extractor trained");
    } catch (const std::exception& e) {
      gct_errors[r] = e.what();
    }
  });

  const auto jobs = loo_schedule(cameras.size(), options.seeds);
  std::vector<ArmResult> results(jobs.size());
  std::vector<std::vector<double>> step1(jobs.size());
  run_pool(jobs.size(), workers, [&](std::size_t j) {
    const auto& job = jobs[j];
    const auto& fold = folds[job.camera];
    auto& out = results[j];
    try {
      if (!gct_models[job.repetition]) fail(ErrorKind::state, "GCT extractor failed: " + gct_errors[job.repetition]);
      num::Rng rng(fold_seed(job.seed, cameras[job.camera]));
      std::vector<double> pred;
      if (job.arm == Arm::with_framework) {
        const auto veh = run_stage1(fold, config, true, rng.split(1).next_u64());
        auto run = run_stage2(fold, config, *gct_models[job.repetition], veh.model, rng.split(2).next_u64());
        out.horizons = run.test;
        out.val_camera_mae = run.val_camera_mae;
        out.train_steps = run.result.log.steps;
        pred = std::move(run.test_pred);
      } else {
        check_fold_hygiene(fold);
        const auto res = fusion::train_baseline(fold.train.gct, fold.train.vehicle, fold.val.gct, fold.val.vehicle,
                                                fold.graph, fold.camera_nodes, sized(config, fold.graph.size()),
                                                config.lambda_init, config.stage2, fold.vehicle_mean, fold.vehicle_std,
                                                rng.split(3).next_u64());
        out.val_camera_mae = fusion::baseline_camera_mae(res.model, fold.val.gct, fold.val.vehicle);
        out.train_steps = res.log.steps;
        pred = collect_node([&](const std::vector<std::size_t>& idx) { return res.model.stgnn.predict(fold.test.gct.inputs(idx)); },
                            fold.test.gct.size(), fold.excluded_node);
        out.horizons = horizon_metrics(pred, fold.test_truth, config.model.out_steps, config.horizons);
      }
      out.step1_pred = first_step(pred, config.model.out_steps);
      out.ok = true;
      progress("seed " + std::to_string(job.seed) + " camera " + fold.excluded_camera + " " + arm_name(job.arm) +
               ": h" + std::to_string(config.horizons.front()) + " MAE " + std::to_string(out.horizons.front().mae));
    } catch (const std::exception& e) {
      out.ok = false;
      out.error = e.what();
      progress("seed " + std::to_string(job.seed) + " camera " + fold.excluded_camera + " " + arm_name(job.arm) +
               " failed: " + out.error);
    }
  });

  ExperimentReport report;
  report.fingerprint = config.fingerprint();
  report.interval_minutes = config.interval_minutes;
  report.horizons = config.horizons;
  report.seeds = options.seeds;
  report.scheduled_trainings = jobs.size();
  for (auto c : cameras) report.cameras.push_back(data.vehicle.node_ids()[c]);
  for (std::size_t j = 0; j < jobs.size(); j += 2) {
    const auto& job = jobs[j];
    const auto& fold = folds[job.camera];
    FoldEntry e;
    e.camera = fold.excluded_camera;
    e.camera_index = cameras[job.camera];
    e.node = data.gct.node_ids()[fold.excluded_node];
    e.seed = job.seed;
    e.with = std::move(results[j]);
    e.without = std::move(results[j + 1]);
    e.step1_time = fold.test_first_time;
    e.step1_truth = first_step(fold.test_truth, config.model.out_steps);
    report.folds.push_back(std::move(e));
  }
  aggregate(report);
  return report;
}

}  // namespace tel2veh::harness
