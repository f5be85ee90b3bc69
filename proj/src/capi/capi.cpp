#include <cmath>
#include <cstdio>
#include <fstream>
#include <new>
#include <optional>

#include "common/config.hpp"
#include "common/error.hpp"
#include "flowdata/flowdata.hpp"
#include "harness/harness.hpp"
#include "synthgen/synthgen.hpp"
#include "tel2veh/tel2veh.h"

struct t2v_flow {
  tel2veh::flow::FlowMatrix matrix;
};

namespace {

using namespace tel2veh;

thread_local std::string g_last_error;

t2v_status status_of(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return T2V_ERR_INVALID_ARGUMENT;
    case ErrorKind::io: return T2V_ERR_IO;
    case ErrorKind::parse: return T2V_ERR_PARSE;
    case ErrorKind::data: return T2V_ERR_DATA;
    case ErrorKind::config: return T2V_ERR_CONFIG;
    case ErrorKind::numeric: return T2V_ERR_NUMERIC;
    case ErrorKind::state: return T2V_ERR_STATE;
  }
  return T2V_ERR_INTERNAL;
}

template <class F>
t2v_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return T2V_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return T2V_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return T2V_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown failure";
    return T2V_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) fail(ErrorKind::invalid_argument, std::string(what) + " must not be NULL");
}

void copy_text(char* dst, std::size_t cap, const std::string& src) {
  std::snprintf(dst, cap, "%s", src.c_str());
}

KeyValueConfig load_config(const char* path, const char* overrides) {
  KeyValueConfig kv = path && *path ? KeyValueConfig::load(path) : KeyValueConfig();
  if (overrides && *overrides) {
    const auto extra = KeyValueConfig::parse(overrides);
    for (const auto& [k, v] : extra.entries()) kv.set(k, v);
  }
  return kv;
}

void reject_unused(const KeyValueConfig& kv) {
  const auto unused = kv.unused_keys();
  if (unused.empty()) return;
  std::string list;
  for (const auto& k : unused) list += (list.empty() ? "" : ", ") + k;
  fail(ErrorKind::config, "unknown config key(s): " + list);
}

harness::ExperimentConfig experiment_config(const char* path, const char* overrides) {
  const auto kv = load_config(path, overrides);
  auto config = harness::ExperimentConfig::from_config(kv);
  reject_unused(kv);
  return config;
}

std::optional<std::size_t> camera_index(const harness::Dataset& data, const char* raw) {
  if (!raw || !*raw || std::string(raw) == "none") return std::nullopt;
  const std::string id = flow::canonical_camera_id(raw);
  const auto idx = data.vehicle.node_index(id);
  if (!idx) fail(ErrorKind::invalid_argument, "unknown camera '" + std::string(raw) + "'");
  return idx;
}

std::string metadata(const harness::ExperimentConfig& config, std::uint64_t seed, const std::string& kind,
                     const std::optional<std::string>& excluded) {
  KeyValueConfig kv;
  kv.set("stage", kind);
  kv.set("config_fingerprint", config.fingerprint());
  kv.set("seed", std::to_string(seed));
  kv.set("excluded_camera", excluded ? *excluded : "none");
  return kv.serialize();
}

void fill_log(t2v_train_summary* s, const num::TrainResult& log, const std::string& fingerprint) {
  s->epochs = log.history.size();
  s->best_epoch = log.best_epoch;
  s->steps = log.steps;
  s->best_val = log.best_val;
  copy_text(s->fingerprint, sizeof s->fingerprint, fingerprint);
}

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

extern "C" {

const char* t2v_version(void) { return "0.1.0"; }

const char* t2v_status_name(t2v_status status) {
  switch (status) {
    case T2V_OK: return "ok";
    case T2V_ERR_INVALID_ARGUMENT: return "invalid argument";
    case T2V_ERR_IO: return "i/o error";
    case T2V_ERR_PARSE: return "parse error";
    case T2V_ERR_DATA: return "data error";
    case T2V_ERR_CONFIG: return "config error";
    case T2V_ERR_NUMERIC: return "numeric error";
    case T2V_ERR_STATE: return "state error";
    case T2V_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* t2v_last_error(void) { return g_last_error.c_str(); }

t2v_status t2v_flow_load(const char* path, int kind, t2v_flow** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    if (kind != 0 && kind != 1) fail(ErrorKind::invalid_argument, "kind must be 0 (GCT) or 1 (vehicle)");
    auto flow = std::make_unique<t2v_flow>();
    flow->matrix = flow::load_flow_matrix(path, kind == 0 ? flow::FlowKind::gct : flow::FlowKind::vehicle);
    *out = flow.release();
  });
}

void t2v_flow_free(t2v_flow* flow) { delete flow; }

size_t t2v_flow_rows(const t2v_flow* flow) { return flow ? flow->matrix.rows() : 0; }
size_t t2v_flow_nodes(const t2v_flow* flow) { return flow ? flow->matrix.nodes() : 0; }

t2v_status t2v_flow_value(const t2v_flow* flow, size_t row, size_t node, double* out) {
  return guarded([&] {
    require(flow, "flow");
    require(out, "out");
    if (row >= flow->matrix.rows() || node >= flow->matrix.nodes()) fail(ErrorKind::invalid_argument, "cell out of range");
    *out = flow->matrix.at(row, node);
  });
}

t2v_status t2v_flow_time(const t2v_flow* flow, size_t row, int64_t* out) {
  return guarded([&] {
    require(flow, "flow");
    require(out, "out");
    if (row >= flow->matrix.rows()) fail(ErrorKind::invalid_argument, "row out of range");
    *out = flow->matrix.times()[row];
  });
}

const char* t2v_flow_node_id(const t2v_flow* flow, size_t node) {
  if (!flow || node >= flow->matrix.nodes()) return nullptr;
  return flow->matrix.node_ids()[node].c_str();
}

t2v_status t2v_flow_stats(const t2v_flow* flow, t2v_stats* out) {
  return guarded([&] {
    require(flow, "flow");
    require(out, "out");
    const auto s = flow::descriptive_stats(flow->matrix);
    *out = t2v_stats{};
    out->samples = s.samples;
    out->nodes = s.nodes;
    out->gap_cells = s.gap_cells;
    out->mean = s.mean;
    out->std = s.std;
    copy_text(out->max_node, sizeof out->max_node, s.max_node);
    out->max_node_mean = s.max_node_mean;
    copy_text(out->min_node, sizeof out->min_node, s.min_node);
    out->min_node_mean = s.min_node_mean;
  });
}

t2v_status t2v_ingest(const char* records_csv, const char* segments_csv, const t2v_ingest_options* options,
                      const char* out_csv, t2v_ingest_summary* summary) {
  return guarded([&] {
    require(records_csv, "records_csv");
    require(segments_csv, "segments_csv");
    require(out_csv, "out_csv");
    t2v_ingest_options opt{};
    if (options) opt = *options;
    const int interval = opt.interval_minutes > 0 ? opt.interval_minutes : 5;
    flow::DayWindow window;
    auto clock = [](const char* text, int fallback) {
      if (!text) return fallback;
      const auto m = flow::parse_clock(text);
      if (!m) fail(ErrorKind::invalid_argument, std::string("bad clock time '") + text + "'");
      return *m;
    };
    window.start_minute = clock(opt.day_start, window.start_minute);
    window.end_minute = clock(opt.day_end, window.end_minute);
    const auto parsed = flow::parse_gct_file(records_csv);
    auto warn = [&](const std::string& msg) {
      if (opt.on_warning) opt.on_warning(msg.c_str(), opt.user);
    };
    for (const auto& e : parsed.errors) warn(e.message);
    const auto segments = flow::load_segments(segments_csv);
    auto result = flow::aggregate_gct_flow(parsed.records, segments, interval, window, opt.shards ? opt.shards : 1);
    for (const auto& w : result.warnings) warn(w);
    flow::save_flow_matrix(result.flows, out_csv);
    if (summary) {
      summary->records = parsed.records.size();
      summary->bad_lines = parsed.errors.size();
      summary->outside_window = result.outside_window;
      summary->outside_segments = result.outside_segments;
      summary->rows = result.flows.rows();
      summary->nodes = result.flows.nodes();
    }
  });
}

t2v_status t2v_correlate(const char* gct_csv, const char* vehicle_csv, const char* map_csv, const char* out_csv,
                         size_t* defined_cells, size_t* total_cells) {
  return guarded([&] {
    require(gct_csv, "gct_csv");
    require(vehicle_csv, "vehicle_csv");
    require(map_csv, "map_csv");
    require(out_csv, "out_csv");
    const auto gct = flow::load_flow_matrix(gct_csv, flow::FlowKind::gct);
    const auto veh = flow::load_flow_matrix(vehicle_csv, flow::FlowKind::vehicle);
    const auto mapping = flow::load_camera_mapping(map_csv);
    mapping.validate(gct, veh);
    const auto corr = flow::daily_pearson(gct, veh, mapping);
    std::ofstream out(out_csv, std::ios::binary);
    if (!out) fail(ErrorKind::io, std::string("cannot write '") + out_csv + "'");
    flow::write_daily_correlation(corr, out);
    if (!out) fail(ErrorKind::io, std::string("write failed for '") + out_csv + "'");
    std::size_t defined = 0;
    for (const auto& r : corr.r) defined += r.has_value();
    if (defined_cells) *defined_cells = defined;
    if (total_cells) *total_cells = corr.r.size();
  });
}

t2v_status t2v_synth(const char* config_path, const char* overrides, const char* out_dir) {
  return guarded([&] {
    require(out_dir, "out_dir");
    const auto kv = load_config(config_path, overrides);
    const auto config = synth::SynthConfig::from_config(kv);
    reject_unused(kv);
    synth::write_dataset(synth::generate(config), out_dir);
  });
}

t2v_status t2v_train_stage1(const char* data_dir, const char* config_path, const char* overrides, const char* source,
                            uint64_t seed, const char* exclude_camera, const char* out_checkpoint,
                            t2v_train_summary* summary) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(source, "source");
    require(out_checkpoint, "out_checkpoint");
    const std::string src = source;
    if (src != "gct" && src != "vehicle") fail(ErrorKind::invalid_argument, "source must be gct or vehicle");
    const auto config = experiment_config(config_path, overrides);
    const auto data = harness::load_dataset(data_dir, config);
    const bool vehicle = src == "vehicle";
    const auto excluded = vehicle ? camera_index(data, exclude_camera) : std::nullopt;
    const auto fold = harness::prepare_fold(data, config, excluded);
    harness::check_fold_hygiene(fold);
    const auto run = harness::run_stage1(fold, config, vehicle, seed);
    std::optional<std::string> ex;
    if (excluded) ex = fold.excluded_camera;
    auto meta = KeyValueConfig::parse(metadata(config, seed, "stage1", ex));
    meta.set("source", src);
    run.model.to_checkpoint(meta.serialize()).save(out_checkpoint);
    if (summary) {
      *summary = t2v_train_summary{};
      fill_log(summary, run.log, config.fingerprint());
      summary->best_val = run.val_mae;
      summary->reference_val = run.persistence_val_mae;
    }
  });
}

t2v_status t2v_train_stage2(const char* data_dir, const char* gct_checkpoint, const char* vehicle_checkpoint,
                            const char* config_path, const char* overrides, uint64_t seed, const char* exclude_camera,
                            const char* out_checkpoint, const char* loss_log_csv, t2v_train_summary* summary) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(gct_checkpoint, "gct_checkpoint");
    require(vehicle_checkpoint, "vehicle_checkpoint");
    require(out_checkpoint, "out_checkpoint");
    const auto config = experiment_config(config_path, overrides);
    const auto data = harness::load_dataset(data_dir, config);
    const auto excluded = camera_index(data, exclude_camera);
    const auto fold = harness::prepare_fold(data, config, excluded);
    const auto gct = stgnn::StgnnModel::from_checkpoint(num::Checkpoint::load(gct_checkpoint));
    const auto veh = stgnn::StgnnModel::from_checkpoint(num::Checkpoint::load(vehicle_checkpoint));
    if (gct.node_ids() != data.gct.node_ids()) {
      fail(ErrorKind::config, "GCT checkpoint was trained on a different node set");
    }
    if (veh.node_ids() != fold.vehicle_graph.node_ids()) {
      fail(ErrorKind::config, "vehicle checkpoint nodes do not match the retained cameras; train it with the same "
                              "--exclude-camera");
    }
    for (const auto* m : {&gct, &veh}) {
      if (m->config().in_steps != config.model.in_steps || m->config().out_steps != config.model.out_steps ||
          m->config().feature_width() != config.model.feature_width()) {
        fail(ErrorKind::config, "checkpoint window or feature width differs from the config");
      }
    }
    const auto run = harness::run_stage2(fold, config, gct, veh, seed);
    std::optional<std::string> ex;
    if (excluded) ex = fold.excluded_camera;
    run.result.model.to_checkpoint(metadata(config, seed, "stage2", ex)).save(out_checkpoint);
    if (loss_log_csv) {
      std::ofstream out(loss_log_csv, std::ios::binary);
      if (!out) fail(ErrorKind::io, std::string("cannot write '") + loss_log_csv + "'");
      out << "step,loss_with,loss_without,lambda,total\n";
      for (const auto& e : run.result.steps) {
        out << e.step << "," << exact(e.loss_with) << "," << exact(e.loss_without) << "," << exact(e.lambda) << ","
            << exact(e.total) << "\n";
      }
    }
    if (summary) {
      *summary = t2v_train_summary{};
      fill_log(summary, run.result.log, config.fingerprint());
      summary->best_val = run.val_camera_mae;
      summary->lambda = run.result.model.lambda();
      summary->n_horizons = std::min<std::size_t>(run.test.size(), 16);
      for (std::size_t h = 0; h < summary->n_horizons; ++h) {
        summary->horizons[h] = config.horizons[h];
        summary->test_mae[h] = run.test[h].mae;
        summary->test_rmse[h] = run.test[h].rmse;
        summary->test_mape[h] = run.test[h].mape;
      }
    }
  });
}

t2v_status t2v_evaluate_loo(const t2v_loo_options* options, t2v_loo_summary* summary) {
  return guarded([&] {
    require(options, "options");
    require(options->data_dir, "data_dir");
    require(options->out_dir, "out_dir");
    if (options->n_seeds == 0 || !options->seeds) fail(ErrorKind::invalid_argument, "no seeds");
    std::string overrides = options->overrides ? options->overrides : "";
    if (options->horizons) overrides += std::string("\nhorizons=") + options->horizons;
    const auto config = experiment_config(options->config_path, overrides.c_str());
    const auto data = harness::load_dataset(options->data_dir, config);
    harness::LooOptions loo;
    loo.seeds.assign(options->seeds, options->seeds + options->n_seeds);
    loo.workers = options->workers;
    if (options->progress) {
      loo.progress = [options](const std::string& msg) { options->progress(msg.c_str(), options->user); };
    }
    const auto report = harness::leave_one_out(data, config, loo);
    using harness::ReportFormat;
    harness::emit_report(report, data, ReportFormat::text_table, options->out_dir);
    harness::emit_report(report, data, ReportFormat::rows, options->out_dir);
    if (report.completed > 0) {
      harness::emit_report(report, data, ReportFormat::plot, options->out_dir,
                           options->plot_camera ? options->plot_camera : "", options->plot_day ? options->plot_day : "");
    }
    if (summary) {
      *summary = t2v_loo_summary{};
      summary->folds = report.folds.size();
      summary->completed = report.completed;
      summary->scheduled_trainings = report.scheduled_trainings;
      summary->n_horizons = std::min<std::size_t>(report.summary.size(), 16);
      for (std::size_t h = 0; h < summary->n_horizons; ++h) {
        const auto& s = report.summary[h];
        summary->horizons[h] = s.horizon;
        summary->mae_with[h] = s.with.mae;
        summary->mae_without[h] = s.without.mae;
        summary->ir_mae[h] = s.ir_mae ? *s.ir_mae : std::nan("");
      }
      copy_text(summary->fingerprint, sizeof summary->fingerprint, report.fingerprint);
    }
  });
}

t2v_status t2v_loo_schedule(size_t cameras, size_t seeds, size_t* fusion_trainings, size_t* baseline_trainings) {
  return guarded([&] {
    require(fusion_trainings, "fusion_trainings");
    require(baseline_trainings, "baseline_trainings");
    std::vector<std::uint64_t> s(seeds);
    for (std::size_t i = 0; i < seeds; ++i) s[i] = i;
    std::size_t fusion = 0, baseline = 0;
    for (const auto& job : harness::loo_schedule(cameras, s)) {
      (job.arm == harness::Arm::with_framework ? fusion : baseline)++;
    }
    *fusion_trainings = fusion;
    *baseline_trainings = baseline;
  });
}

t2v_status t2v_improvement_ratio(double score_with, double score_without, double* out) {
  return guarded([&] {
    require(out, "out");
    const auto ir = harness::improvement_ratio(score_with, score_without);
    if (!ir) fail(ErrorKind::invalid_argument, "improvement ratio undefined for a non-positive baseline score");
    *out = *ir;
  });
}

}  // extern "C"
