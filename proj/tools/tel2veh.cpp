#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tel2veh/tel2veh.h"

namespace {

int check(t2v_status status) {
  if (status == T2V_OK) return 0;
  std::fprintf(stderr, "error: %s: %s\n", t2v_status_name(status), t2v_last_error());
  return static_cast<int>(status);
}

void print_line(const char* message, void*) { std::fprintf(stderr, "%s\n", message); }

std::string joined(const std::vector<std::string>& sets) {
  std::string out;
  for (const auto& s : sets) out += s + "\n";
  return out;
}

const char* opt_or_null(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

int print_stats(const std::string& path, int kind) {
  t2v_flow* flow = nullptr;
  if (int rc = check(t2v_flow_load(path.c_str(), kind, &flow))) return rc;
  t2v_stats s;
  const int rc = check(t2v_flow_stats(flow, &s));
  t2v_flow_free(flow);
  if (rc) return rc;
  std::printf("%s flow  %s\n", kind == 0 ? "GCT" : "Vehicle", path.c_str());
  std::printf("  samples        %zu\n", s.samples);
  std::printf("  nodes          %zu\n", s.nodes);
  std::printf("  gap cells      %zu\n", s.gap_cells);
  std::printf("  average        %.2f\n", s.mean);
  std::printf("  std            %.2f\n", s.std);
  std::printf("  max-avg node   %s (%.2f)\n", s.max_node, s.max_node_mean);
  std::printf("  min-avg node   %s (%.2f)\n", s.min_node, s.min_node_mean);
  return 0;
}

void print_train(const t2v_train_summary& s, const char* score) {
  std::printf("epochs %zu, best epoch %zu, steps %zu\n", s.epochs, s.best_epoch, s.steps);
  std::printf("%s %.4f\n", score, s.best_val);
  std::printf("config fingerprint %s\n", s.fingerprint);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Camera-free vehicle flow estimation from geolocated cellular traffic"};
  app.require_subcommand(1);
  app.set_version_flag("--version", t2v_version());

  int interval = 5;
  std::string day_start = "06:00", day_end = "19:00";

  auto* ingest = app.add_subcommand("ingest", "Aggregate raw GCT records into interval flows per road segment");
  std::string records, segments, ingest_out;
  std::size_t shards = 1;
  ingest->add_option("--records", records, "raw_gct.csv (time,imei_hash,lat,lon)")->required();
  ingest->add_option("--segments", segments, "segments.csv (segment_id,lat,lon)")->required();
  ingest->add_option("--out", ingest_out, "Output gct_flows.csv")->required();
  ingest->add_option("--interval-minutes", interval, "Interval length")->capture_default_str();
  ingest->add_option("--day-start", day_start, "Daily window start")->capture_default_str();
  ingest->add_option("--day-end", day_end, "Daily window end")->capture_default_str();
  ingest->add_option("--shards", shards, "Worker threads for counting")->capture_default_str();

  auto* stats = app.add_subcommand("stats", "Descriptive statistics of flow files");
  std::string stats_gct, stats_veh, stats_dir;
  stats->add_option("--gct", stats_gct, "gct_flows.csv");
  stats->add_option("--vehicle", stats_veh, "vehicle_flows.csv");
  stats->add_option("--data-dir", stats_dir, "Directory holding both files");
  stats->add_option("--interval-minutes", interval, "Expected interval (informational)");
  stats->add_option("--day-start", day_start, "Daily window start (informational)");
  stats->add_option("--day-end", day_end, "Daily window end (informational)");

  auto* correlate = app.add_subcommand("correlate", "Daily Pearson correlation between paired GCT and vehicle flows");
  std::string corr_gct, corr_veh, corr_map, corr_out, corr_dir;
  correlate->add_option("--data-dir", corr_dir, "Directory with gct_flows.csv, vehicle_flows.csv, camera_map.csv");
  correlate->add_option("--gct", corr_gct, "gct_flows.csv");
  correlate->add_option("--vehicle", corr_veh, "vehicle_flows.csv");
  correlate->add_option("--map", corr_map, "camera_map.csv");
  correlate->add_option("--out", corr_out, "Output CSV")->required();
  correlate->add_option("--interval-minutes", interval, "Expected interval (informational)");
  correlate->add_option("--day-start", day_start, "Daily window start (informational)");
  correlate->add_option("--day-end", day_end, "Daily window end (informational)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic GCT/vehicle dataset");
  std::string synth_cfg, synth_out;
  std::vector<std::string> synth_set;
  synth->add_option("--config", synth_cfg, "key=value config file");
  synth->add_option("--set", synth_set, "Override one key=value")->take_all();
  synth->add_option("--out-dir", synth_out, "Output directory")->required();

  std::string data_dir, config, exclude = "none", out;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;

  auto* stage1 = app.add_subcommand("train-stage1", "Train a feature extractor on one flow source");
  std::string source;
  stage1->add_option("--data-dir", data_dir, "Dataset directory")->required();
  stage1->add_option("--source", source, "gct or vehicle")->required()->check(CLI::IsMember({"gct", "vehicle"}));
  stage1->add_option("--config", config, "Experiment config file");
  stage1->add_option("--set", sets, "Override one key=value")->take_all();
  stage1->add_option("--seed", seed, "Seed")->capture_default_str();
  stage1->add_option("--exclude-camera", exclude, "Camera withheld from vehicle training, or none")->capture_default_str();
  stage1->add_option("--out", out, "Checkpoint path")->required();

  auto* stage2 = app.add_subcommand("train-stage2", "Train attention fusion and the prediction network");
  std::string gct_ckpt, veh_ckpt, loss_log;
  stage2->add_option("--data-dir", data_dir, "Dataset directory")->required();
  stage2->add_option("--gct-ckpt", gct_ckpt, "GCT extractor checkpoint")->required();
  stage2->add_option("--veh-ckpt", veh_ckpt, "Vehicle extractor checkpoint")->required();
  stage2->add_option("--config", config, "Experiment config file");
  stage2->add_option("--set", sets, "Override one key=value")->take_all();
  stage2->add_option("--seed", seed, "Seed")->capture_default_str();
  stage2->add_option("--exclude-camera", exclude, "Camera withheld from training, or none")->capture_default_str();
  stage2->add_option("--out", out, "Checkpoint path")->required();
  stage2->add_option("--loss-log", loss_log, "Per-step loss CSV");

  auto* loo = app.add_subcommand("evaluate-loo", "Leave-one-camera-out evaluation against the GCT-only arm");
  std::size_t n_seeds = 10, workers = 0;
  std::uint64_t first_seed = 0;
  std::string horizons = "3,6,12", out_dir, plot_camera, plot_day;
  loo->add_option("--data-dir", data_dir, "Dataset directory")->required();
  loo->add_option("--config", config, "Experiment config file");
  loo->add_option("--set", sets, "Override one key=value")->take_all();
  loo->add_option("--seeds", n_seeds, "Repetitions")->capture_default_str();
  loo->add_option("--first-seed", first_seed, "Seed of the first repetition")->capture_default_str();
  loo->add_option("--horizons", horizons, "Forecast steps to score")->capture_default_str();
  loo->add_option("--workers", workers, "Parallel folds (0: config / all cores)")->capture_default_str();
  loo->add_option("--out-dir", out_dir, "Report directory")->required();
  loo->add_option("--plot-camera", plot_camera, "Camera for the line-plot file");
  loo->add_option("--plot-day", plot_day, "Day (YYYY-MM-DD) for the line-plot file");

  CLI11_PARSE(app, argc, argv);

  if (ingest->parsed()) {
    t2v_ingest_options opt{};
    opt.interval_minutes = interval;
    opt.day_start = day_start.c_str();
    opt.day_end = day_end.c_str();
    opt.shards = shards;
    opt.on_warning = print_line;
    t2v_ingest_summary s{};
    if (int rc = check(t2v_ingest(records.c_str(), segments.c_str(), &opt, ingest_out.c_str(), &s))) return rc;
    std::printf("records %zu, bad lines %zu, outside window %zu, outside segments %zu\n", s.records, s.bad_lines,
                s.outside_window, s.outside_segments);
    std::printf("wrote %zu rows x %zu segments to %s\n", s.rows, s.nodes, ingest_out.c_str());
    return 0;
  }
  if (stats->parsed()) {
    if (!stats_dir.empty()) {
      if (stats_gct.empty()) stats_gct = stats_dir + "/gct_flows.csv";
      if (stats_veh.empty()) stats_veh = stats_dir + "/vehicle_flows.csv";
    }
    if (stats_gct.empty() && stats_veh.empty()) {
      std::fprintf(stderr, "error: give --gct, --vehicle or --data-dir\n");
      return 1;
    }
    if (!stats_gct.empty()) {
      if (int rc = print_stats(stats_gct, 0)) return rc;
    }
    if (!stats_veh.empty()) {
      if (int rc = print_stats(stats_veh, 1)) return rc;
    }
    return 0;
  }
  if (correlate->parsed()) {
    if (!corr_dir.empty()) {
      if (corr_gct.empty()) corr_gct = corr_dir + "/gct_flows.csv";
      if (corr_veh.empty()) corr_veh = corr_dir + "/vehicle_flows.csv";
      if (corr_map.empty()) corr_map = corr_dir + "/camera_map.csv";
    }
    if (corr_gct.empty() || corr_veh.empty() || corr_map.empty()) {
      std::fprintf(stderr, "error: give --data-dir or all of --gct, --vehicle, --map\n");
      return 1;
    }
    std::size_t defined = 0, total = 0;
    if (int rc = check(t2v_correlate(corr_gct.c_str(), corr_veh.c_str(), corr_map.c_str(), corr_out.c_str(), &defined,
                                     &total))) {
      return rc;
    }
    std::printf("%zu of %zu (day, camera) cells defined; wrote %s\n", defined, total, corr_out.c_str());
    return 0;
  }
  if (synth->parsed()) {
    const auto overrides = joined(synth_set);
    if (int rc = check(t2v_synth(opt_or_null(synth_cfg), overrides.c_str(), synth_out.c_str()))) return rc;
    std::printf("wrote synthetic dataset to %s\n", synth_out.c_str());
    return 0;
  }
  const auto overrides = joined(sets);
  if (stage1->parsed()) {
    t2v_train_summary s{};
    if (int rc = check(t2v_train_stage1(data_dir.c_str(), opt_or_null(config), overrides.c_str(), source.c_str(), seed,
                                        exclude.c_str(), out.c_str(), &s))) {
      return rc;
    }
    print_train(s, "validation MAE");
    std::printf("repeat-last-value validation MAE %.4f\n", s.reference_val);
    std::printf("wrote %s\n", out.c_str());
    return 0;
  }
  if (stage2->parsed()) {
    t2v_train_summary s{};
    if (int rc = check(t2v_train_stage2(data_dir.c_str(), gct_ckpt.c_str(), veh_ckpt.c_str(), opt_or_null(config),
                                        overrides.c_str(), seed, exclude.c_str(), out.c_str(), opt_or_null(loss_log),
                                        &s))) {
      return rc;
    }
    print_train(s, "validation camera-node MAE");
    std::printf("lambda %.6g\n", s.lambda);
    for (std::size_t h = 0; h < s.n_horizons; ++h) {
      std::printf("excluded camera, horizon %zu: MAE %.3f RMSE %.3f MAPE %.2f%%\n", s.horizons[h], s.test_mae[h],
                  s.test_rmse[h], s.test_mape[h]);
    }
    std::printf("wrote %s\n", out.c_str());
    return 0;
  }
  if (loo->parsed()) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(first_seed + i);
    t2v_loo_options opt{};
    opt.data_dir = data_dir.c_str();
    opt.config_path = opt_or_null(config);
    opt.overrides = overrides.c_str();
    opt.seeds = seeds.data();
    opt.n_seeds = seeds.size();
    opt.horizons = horizons.c_str();
    opt.workers = workers;
    opt.out_dir = out_dir.c_str();
    opt.plot_camera = opt_or_null(plot_camera);
    opt.plot_day = opt_or_null(plot_day);
    opt.progress = print_line;
    t2v_loo_summary s{};
    if (int rc = check(t2v_evaluate_loo(&opt, &s))) return rc;
    std::printf("folds completed %zu / %zu, trainings scheduled %zu\n", s.completed, s.folds, s.scheduled_trainings);
    for (std::size_t h = 0; h < s.n_horizons; ++h) {
      std::printf("horizon %2zu: MAE w/o %.3f  w %.3f  IR ", s.horizons[h], s.mae_without[h], s.mae_with[h]);
      if (std::isnan(s.ir_mae[h])) std::printf("n/a\n");
      else std::printf("%.1f%%\n", s.ir_mae[h]);
    }
    std::printf("reports in %s\n", out_dir.c_str());
    return 0;
  }
  return 0;
}
