#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tel2veh::flow {

// Naive local wall-clock time in seconds since 1970-01-01 00:00. The data is
// single-city, so no timezone arithmetic is done anywhere.
using Timestamp = std::int64_t;
constexpr std::int64_t kSecondsPerDay = 86400;

Timestamp make_timestamp(int year, unsigned month, unsigned day, int hour, int minute, int second = 0);
// Accepts "YYYY-MM-DD HH:MM[:SS]" or a bare "HH:MM[:SS]" (placed on day 0).
std::optional<Timestamp> parse_timestamp(std::string_view text);
// "YYYY-MM-DD HH:MM", or with ":SS" when with_seconds is set.
std::string format_timestamp(Timestamp t, bool with_seconds = false);
std::string format_date(Timestamp t);
std::int64_t day_index(Timestamp t);
std::int64_t seconds_of_day(Timestamp t);
// "HH:MM" -> minutes after midnight.
std::optional<int> parse_clock(std::string_view text);

// ---------------------------------------------------------------------------
// Raw geolocated cellular-traffic records

struct GctRecord {
  Timestamp timestamp = 0;
  std::string device_id;  // hashed IMEI
  double latitude = 0.0;
  double longitude = 0.0;

  bool operator==(const GctRecord&) const = default;
};

enum class RecordErrorKind { field_count, timestamp, number, coordinate_range, device_id };

struct RecordError {
  std::size_t line = 0;  // 1-based
  RecordErrorKind kind = RecordErrorKind::field_count;
  std::string message;
};

struct GctParseResult {
  std::vector<GctRecord> records;
  std::vector<RecordError> errors;
};

// A device id must look like an opaque hash: non-empty, no whitespace or
// '@', and not a bare 14-16 digit number (the shape of a raw IMEI).
bool is_hashed_device_id(std::string_view id);

// One record per line, "time,device_id,lat,lon". An optional header line
// starting with "time" is skipped. Bad lines are reported, never dropped
// silently; an unreadable stream throws.
GctParseResult parse_gct_records(std::istream& in);
GctParseResult parse_gct_file(const std::string& path);

// ---------------------------------------------------------------------------
// Road segments and flow matrices

struct RoadSegment {
  std::int64_t segment_id = 0;
  double center_lat = 0.0;
  double center_lon = 0.0;
  double half_width_m = 10.0;  // 20 m x 20 m box by default

  double side_m() const { return 2.0 * half_width_m; }
};

// segments.csv: "segment_id,lat,lon[,half_width_m]"
std::vector<RoadSegment> load_segments(const std::string& path);
void save_segments(const std::vector<RoadSegment>& segments, const std::string& path);

enum class FlowKind { gct, vehicle };

struct CellRef {
  std::size_t row = 0;
  std::size_t node = 0;
};

// [T x nodes] interval counts. Missing cells are NaN gaps. Rows are strictly
// increasing; within one calendar day consecutive rows are exactly
// interval_minutes apart, and a jump to a later day must land on the same
// time-of-day grid.
class FlowMatrix {
 public:
  FlowMatrix() = default;
  FlowMatrix(FlowKind kind, int interval_minutes, std::vector<Timestamp> times, std::vector<std::string> node_ids,
             std::vector<double> values);

  FlowKind kind() const { return kind_; }
  int interval_minutes() const { return interval_minutes_; }
  std::size_t rows() const { return times_.size(); }
  std::size_t nodes() const { return node_ids_.size(); }
  const std::vector<Timestamp>& times() const { return times_; }
  const std::vector<std::string>& node_ids() const { return node_ids_; }
  std::span<const double> values() const { return values_; }

  double at(std::size_t row, std::size_t node) const { return values_[row * node_ids_.size() + node]; }
  bool is_gap(std::size_t row, std::size_t node) const;
  std::vector<CellRef> gaps() const;
  std::optional<std::size_t> node_index(const std::string& id) const;
  std::vector<double> column(std::size_t node) const;

  FlowMatrix select_nodes(const std::vector<std::size_t>& nodes) const;
  FlowMatrix select_rows(std::size_t begin, std::size_t end) const;

  // True when row r+1 directly follows row r on the same day.
  bool contiguous(std::size_t row) const;

 private:
  FlowKind kind_ = FlowKind::gct;
  int interval_minutes_ = 5;
  std::vector<Timestamp> times_;
  std::vector<std::string> node_ids_;
  std::vector<double> values_;
};

// gct_flows.csv: "Time,<seg_id>,..."; vehicle_flows.csv: "Time,Cam<id>,...".
// Empty cells load as gaps. Irregular spacing or a negative count throws.
FlowMatrix load_flow_matrix(const std::string& path, FlowKind kind);
FlowMatrix parse_flow_matrix(std::istream& in, FlowKind kind, const std::string& source_name = "<stream>");
void save_flow_matrix(const FlowMatrix& flows, const std::string& path);
void write_flow_matrix(const FlowMatrix& flows, std::ostream& out);

// camera_id -> segment_id pairs; camera ids follow the vehicle header
// ("Cam3"), a bare number is read as "Cam<number>".
struct CameraMapping {
  std::vector<std::pair<std::string, std::string>> entries;

  std::size_t size() const { return entries.size(); }
  std::optional<std::string> segment_of(const std::string& camera_id) const;
  // Each camera once, every segment present among GCT nodes, every vehicle
  // column mapped, and M < N.
  void validate(const FlowMatrix& gct, const FlowMatrix& vehicle) const;
};

CameraMapping load_camera_mapping(const std::string& path);
void save_camera_mapping(const CameraMapping& mapping, const std::string& path);
std::string canonical_camera_id(const std::string& raw);

struct TaskSpec {
  std::size_t n_gct_nodes = 0;      // N
  std::size_t n_vehicle_nodes = 0;  // M
  std::size_t input_steps = 12;
  std::size_t output_steps = 12;
  int interval_minutes = 5;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Aggregation

struct DayWindow {
  int start_minute = 6 * 60;
  int end_minute = 19 * 60;
};

struct AggregationResult {
  FlowMatrix flows;
  std::size_t total_records = 0;
  std::size_t outside_window = 0;
  std::size_t outside_segments = 0;
  std::vector<std::string> warnings;

  std::size_t discarded() const { return outside_window + outside_segments; }
};

// Index of the segment whose box contains the point, lowest segment_id
// first; nullopt when none does.
std::optional<std::size_t> locate_segment(const std::vector<RoadSegment>& segments, double lat, double lon);

// Counts records per [interval start, start + interval) and segment box over
// every day from the first to the last in-window record day. `shards` > 1
// counts disjoint record slices on worker threads and sums them; the result
// is identical to the sequential path.
AggregationResult aggregate_gct_flow(const std::vector<GctRecord>& records, const std::vector<RoadSegment>& segments,
                                     int interval_minutes, DayWindow window, std::size_t shards = 1);

// ---------------------------------------------------------------------------
// Analysis

struct FlowStats {
  std::size_t samples = 0;
  std::size_t nodes = 0;
  std::size_t gap_cells = 0;
  double mean = 0.0;
  double std = 0.0;  // population, over all non-gap cells
  std::vector<double> node_means;
  std::string max_node;
  double max_node_mean = 0.0;
  std::string min_node;
  double min_node_mean = 0.0;
};

FlowStats descriptive_stats(const FlowMatrix& flows);

// Pearson r; nullopt for fewer than two pairs or zero variance on a side.
std::optional<double> pearson(std::span<const double> x, std::span<const double> y);

struct DailyCorrelation {
  std::vector<Timestamp> days;  // midnight of each calendar day
  std::vector<std::string> cameras;
  std::vector<std::optional<double>> r;  // [days x cameras]

  const std::optional<double>& at(std::size_t day, std::size_t camera) const { return r[day * cameras.size() + camera]; }
};

// Per calendar day and camera: r over that day's intervals where both the
// camera and its mapped segment have values.
DailyCorrelation daily_pearson(const FlowMatrix& gct, const FlowMatrix& vehicle, const CameraMapping& mapping);
void write_daily_correlation(const DailyCorrelation& corr, std::ostream& out);

// ---------------------------------------------------------------------------
// Training plumbing

struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const RowRange&) const = default;
};

struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;  // population; epsilon where a node is constant
  double epsilon = 1e-8;
  std::vector<std::size_t> zero_variance_nodes;

  double apply(double value, std::size_t node) const { return (value - mean[node]) / std[node]; }
  double invert(double value, std::size_t node) const { return value * std[node] + mean[node]; }
  // Row-major copy of the matrix in z-score units; gaps stay NaN.
  std::vector<double> apply(const FlowMatrix& flows) const;
};

// Fits per-node z-scores on the given rows only; gaps are skipped.
Normalizer fit_normalizer(const FlowMatrix& flows, RowRange train_rows, double epsilon = 1e-8);

struct SplitRanges {
  RowRange train, val, test;
};

// Contiguous chronological split. Val and test take floor(ratio * rows);
// the remainder goes to train.
SplitRanges chronological_split(std::size_t rows, double train, double val, double test);

struct Window {
  std::size_t start_row = 0;   // first input row
  std::vector<double> input;   // [nodes x input_steps], node-major
  std::vector<double> target;  // [nodes x output_steps]
};

struct WindowList {
  std::vector<Window> windows;
  std::vector<std::string> warnings;
};

// Start rows of every stride-1 window of input_steps + output_steps rows in
// the range. With mask_days, windows never span a day change or a spacing
// break.
std::vector<std::size_t> window_starts(const FlowMatrix& flows, RowRange rows, std::size_t input_steps,
                                       std::size_t output_steps, bool mask_days = true);
WindowList make_windows(const FlowMatrix& flows, const TaskSpec& task, RowRange rows, bool mask_days = true);

}  // namespace tel2veh::flow
