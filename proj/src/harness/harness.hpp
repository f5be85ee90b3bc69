#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "common/config.hpp"
#include "flowdata/flowdata.hpp"
#include "fusion/fusion.hpp"
#include "graphspec/graphspec.hpp"
#include "stgnn/stgnn.hpp"

namespace tel2veh::harness {

// ---------------------------------------------------------------------------
// Metrics

struct MetricsTriple {
  double mae = 0.0;
  double rmse = 0.0;
  double mape = 0.0;  // percent
};

constexpr double kMapeEpsilon = 1.0;

// MAPE divides by max(|truth|, epsilon) so zero counts stay finite.
MetricsTriple metrics(std::span<const double> pred, std::span<const double> truth, double epsilon = kMapeEpsilon);

// (without - with) / without * 100: positive when the framework lowers the
// error. nullopt when the baseline score is not positive.
std::optional<double> improvement_ratio(double score_with, double score_without);

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
  int interval_minutes = 5;
  double split_train = 0.7, split_val = 0.1, split_test = 0.2;
  double graph_sigma_m = 1000.0;
  double graph_threshold = 0.1;
  stgnn::StgnnConfig model;  // n_nodes / in_channels filled per use
  fusion::MgatConfig mgat;
  double lambda_init = 1e-4;
  num::TrainOptions stage1;
  num::TrainOptions stage2;  // Stage 2 and the GCT-only arm
  std::vector<std::size_t> horizons = {3, 6, 12};
  std::size_t workers = 0;  // 0: hardware concurrency

  static ExperimentConfig from_config(const KeyValueConfig& kv);
  static ExperimentConfig load(const std::string& path);
  void validate() const;
  // Canonical key=value text; every field that changes results.
  std::string serialize() const;
  std::string fingerprint() const;  // fnv1a64 of serialize(), hex
};

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
  flow::FlowMatrix gct;
  flow::FlowMatrix vehicle;
  flow::CameraMapping mapping;
  std::vector<flow::RoadSegment> segments;  // GCT column order
  graph::GraphSpec graph;
  std::vector<std::size_t> camera_nodes;  // GCT node of each vehicle column

  std::size_t cameras() const { return vehicle.nodes(); }
};

// Checks the mapping and resolves camera_nodes; segments are reordered to
// the GCT columns.
Dataset make_dataset(flow::FlowMatrix gct, flow::FlowMatrix vehicle, flow::CameraMapping mapping,
                     std::vector<flow::RoadSegment> segments, std::optional<graph::GraphSpec> graph,
                     const ExperimentConfig& config);

// gct_flows.csv, vehicle_flows.csv, camera_map.csv, segments.csv and an
// optional adjacency.csv (otherwise built from segment distances).
Dataset load_dataset(const std::string& dir, const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Fold preparation

std::string gct_lineage_tag();
std::string vehicle_lineage_tag(const std::string& camera_id);

struct SplitWindows {
  stgnn::WindowSet gct;
  stgnn::WindowSet vehicle;  // retained cameras only
};

// Everything one leave-one-camera-out fold trains and evaluates on.
// `excluded` is a vehicle column index, or nullopt to keep every camera.
struct FoldData {
  std::optional<std::size_t> excluded;
  std::string excluded_camera;
  std::size_t excluded_node = 0;
  std::vector<std::size_t> retained;       // vehicle columns
  std::vector<std::size_t> camera_nodes;   // GCT nodes of retained cameras
  flow::FlowMatrix retained_vehicle;
  graph::GraphSpec graph;
  graph::GraphSpec vehicle_graph;          // G restricted to retained nodes
  SplitWindows train, val, test;
  // Withheld camera's raw flow for every test window: [windows x T_out].
  std::vector<double> test_truth;
  std::vector<flow::Timestamp> test_first_time;  // first forecast row
  double vehicle_mean = 0.0, vehicle_std = 1.0;  // retained, training rows
};

FoldData prepare_fold(const Dataset& data, const ExperimentConfig& config, std::optional<std::size_t> excluded);

// Throws (ErrorKind::state) if the withheld camera's flow reached any
// training or validation window set.
void check_fold_hygiene(const FoldData& fold);

// ---------------------------------------------------------------------------
// Leave-one-out protocol

enum class Arm { with_framework, without_framework };
std::string arm_name(Arm arm);

struct FoldJob {
  Arm arm = Arm::with_framework;
  std::size_t camera = 0;  // vehicle column
  std::size_t repetition = 0;
  std::uint64_t seed = 0;
  std::uint64_t fold_seed = 0;
};

// Per-fold seed: splitmix64(seed) xor fold_index.
std::uint64_t fold_seed(std::uint64_t seed, std::size_t fold_index);

// One job per (arm, camera, seed); ordered by seed, camera, arm.
std::vector<FoldJob> loo_schedule(std::size_t cameras, const std::vector<std::uint64_t>& seeds);

struct ArmResult {
  bool ok = false;
  std::string error;
  std::vector<MetricsTriple> horizons;  // aligned with report horizons
  double val_camera_mae = 0.0;
  std::size_t train_steps = 0;
  // One-step-ahead forecasts at the excluded node, by test window.
  std::vector<double> step1_pred;
};

struct FoldEntry {
  std::string camera;
  std::size_t camera_index = 0;
  std::string node;  // GCT segment id
  std::uint64_t seed = 0;
  ArmResult with;
  ArmResult without;
  std::vector<flow::Timestamp> step1_time;  // first forecast row per test window
  std::vector<double> step1_truth;

  bool ok() const { return with.ok && without.ok; }
};

struct HorizonSummary {
  std::size_t horizon = 0;
  MetricsTriple with, without;
  std::optional<double> ir_mae, ir_rmse, ir_mape;
};

struct CameraSummary {
  std::string camera;
  std::string node;
  std::size_t completed = 0;
  std::vector<HorizonSummary> horizons;
};

struct ExperimentReport {
  std::string fingerprint;
  int interval_minutes = 5;
  std::vector<std::size_t> horizons;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> cameras;
  std::vector<FoldEntry> folds;  // (seed, camera) order
  std::size_t scheduled_trainings = 0;

  // Arithmetic means over completed (camera x seed) folds.
  std::size_t completed = 0;
  std::vector<HorizonSummary> summary;
  std::vector<CameraSummary> per_camera;
};

// Recomputes every mean in the report from its fold entries.
void aggregate(ExperimentReport& report);

struct LooOptions {
  std::vector<std::uint64_t> seeds = {0};
  // Restrict to these vehicle columns; empty means all.
  std::vector<std::size_t> cameras;
  std::size_t workers = 0;  // overrides config when non-zero
  std::function<void(const std::string&)> progress;
};

ExperimentReport leave_one_out(const Dataset& data, const ExperimentConfig& config, const LooOptions& options);

// Runs a bounded pool of `workers` threads over jobs [0, count). Each job
// writes only its own slot; exceptions are left to the job.
void run_pool(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& job);

// ---------------------------------------------------------------------------
// Report output

enum class ReportFormat { text_table, rows, plot };
ReportFormat parse_report_format(const std::string& name);

std::string render_text(const ExperimentReport& report);
std::string render_rows(const ExperimentReport& report);
// Rows for every interval of `day` (YYYY-MM-DD) at the camera's node:
// time, truth, pred_with, pred_without. Forecasts are one step ahead and come
// from the first completed fold excluding that camera; cells without one are
// left empty.
std::string render_plot(const ExperimentReport& report, const Dataset& data, const std::string& camera,
                        const std::string& day);

// Writes report.txt, report_rows.csv or plot_<node>_<day>.csv into dir and
// returns the path. `camera` / `day` only matter for the plot; empty picks
// the first camera and the last day.
std::string emit_report(const ExperimentReport& report, const Dataset& data, ReportFormat format,
                        const std::string& dir, const std::string& camera = "", const std::string& day = "");

// ---------------------------------------------------------------------------
// Single-run entry points used by the CLI

struct Stage1Run {
  stgnn::StgnnModel model;
  num::TrainResult log;
  double val_mae = 0.0;
  double persistence_val_mae = 0.0;
};

// Trains the GCT extractor (vehicle = false) or the vehicle extractor on
// the retained cameras of `fold`.
Stage1Run run_stage1(const FoldData& fold, const ExperimentConfig& config, bool vehicle, std::uint64_t seed);

struct Stage2Run {
  fusion::Stage2Result result;
  double val_camera_mae = 0.0;
  std::vector<MetricsTriple> test;  // excluded camera, when there is one
  std::vector<double> test_pred;    // [test windows x T_out] at that camera
};

Stage2Run run_stage2(const FoldData& fold, const ExperimentConfig& config, const stgnn::StgnnModel& gct_extractor,
                     const stgnn::StgnnModel& vehicle_extractor, std::uint64_t seed);

}  // namespace tel2veh::harness
