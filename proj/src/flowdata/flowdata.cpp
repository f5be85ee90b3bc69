#include "flowdata/flowdata.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "common/config.hpp"
#include "common/error.hpp"

namespace tel2veh::flow {

namespace {

constexpr double kEarthRadiusM = 6371008.8;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

bool parse_int(std::string_view s, int& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size() && std::isfinite(out);
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  for (auto& f : split(line, ',')) out.push_back(trim(f));
  return out;
}

std::string format_count(double v) {
  if (std::isnan(v)) return {};
  if (v == std::floor(v) && std::fabs(v) < 1e15) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.0f", v);
    return buf;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

Timestamp make_timestamp(int year, unsigned month, unsigned day, int hour, int minute, int second) {
  using namespace std::chrono;
  const year_month_day ymd{std::chrono::year{year}, std::chrono::month{month}, std::chrono::day{day}};
  if (!ymd.ok()) {
    fail(ErrorKind::parse, "invalid calendar date " + std::to_string(year) + "-" + std::to_string(month) + "-" +
                               std::to_string(day));
  }
  const auto days_since = sys_days{ymd}.time_since_epoch().count();
  return static_cast<Timestamp>(days_since) * kSecondsPerDay + hour * 3600 + minute * 60 + second;
}

std::optional<Timestamp> parse_timestamp(std::string_view text) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);

  int year = 1970, month = 1, day = 1;
  std::string_view clock = text;
  const auto space = text.find_first_of(" T");
  if (space != std::string_view::npos) {
    const auto date = text.substr(0, space);
    clock = text.substr(space + 1);
    if (date.size() != 10 || date[4] != '-' || date[7] != '-') return std::nullopt;
    if (!parse_int(date.substr(0, 4), year) || !parse_int(date.substr(5, 2), month) ||
        !parse_int(date.substr(8, 2), day)) {
      return std::nullopt;
    }
  }
  int hh = 0, mm = 0, ss = 0;
  if (clock.size() != 5 && clock.size() != 8) return std::nullopt;
  if (clock[2] != ':') return std::nullopt;
  if (!parse_int(clock.substr(0, 2), hh) || !parse_int(clock.substr(3, 2), mm)) return std::nullopt;
  if (clock.size() == 8) {
    if (clock[5] != ':' || !parse_int(clock.substr(6, 2), ss)) return std::nullopt;
  }
  if (hh < 0 || hh > 23 || mm < 0 || mm > 59 || ss < 0 || ss > 59) return std::nullopt;
  const std::chrono::year_month_day ymd{std::chrono::year{year}, std::chrono::month{static_cast<unsigned>(month)},
                                        std::chrono::day{static_cast<unsigned>(day)}};
  if (!ymd.ok()) return std::nullopt;
  return make_timestamp(year, static_cast<unsigned>(month), static_cast<unsigned>(day), hh, mm, ss);
}

std::int64_t day_index(Timestamp t) { return floor_div(t, kSecondsPerDay); }

std::int64_t seconds_of_day(Timestamp t) { return t - day_index(t) * kSecondsPerDay; }

std::string format_date(Timestamp t) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{days{day_index(t)}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

std::string format_timestamp(Timestamp t, bool with_seconds) {
  const auto sod = seconds_of_day(t);
  char buf[32];
  if (with_seconds) {
    std::snprintf(buf, sizeof buf, "%s %02d:%02d:%02d", format_date(t).c_str(), static_cast<int>(sod / 3600),
                  static_cast<int>(sod / 60 % 60), static_cast<int>(sod % 60));
  } else {
    std::snprintf(buf, sizeof buf, "%s %02d:%02d", format_date(t).c_str(), static_cast<int>(sod / 3600),
                  static_cast<int>(sod / 60 % 60));
  }
  return buf;
}

std::optional<int> parse_clock(std::string_view text) {
  int hh = 0, mm = 0;
  if (text.size() != 5 || text[2] != ':') return std::nullopt;
  if (!parse_int(text.substr(0, 2), hh) || !parse_int(text.substr(3, 2), mm)) return std::nullopt;
  if (hh < 0 || hh > 24 || mm < 0 || mm > 59 || (hh == 24 && mm != 0)) return std::nullopt;
  return hh * 60 + mm;
}

// ---------------------------------------------------------------------------

bool is_hashed_device_id(std::string_view id) {
  if (id.empty()) return false;
  bool all_digits = true;
  for (char c : id) {
    if (c == ' ' || c == '\t' || c == '@') return false;
    if (c < '0' || c > '9') all_digits = false;
  }
  if (all_digits && id.size() >= 14 && id.size() <= 16) return false;
  return true;
}

GctParseResult parse_gct_records(std::istream& in) {
  if (!in) fail(ErrorKind::io, "GCT record stream is not readable");
  GctParseResult result;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto fields = split_csv_line(line);
    if (line_no == 1 && !fields.empty()) {
      std::string head = fields[0];
      std::transform(head.begin(), head.end(), head.begin(), [](unsigned char c) { return std::tolower(c); });
      if (head == "time") continue;
    }
    auto report = [&](RecordErrorKind kind, const std::string& message) {
      result.errors.push_back({line_no, kind, "line " + std::to_string(line_no) + ": " + message});
    };
    if (fields.size() != 4) {
      report(RecordErrorKind::field_count, "expected 4 fields, got " + std::to_string(fields.size()));
      continue;
    }
    const auto ts = parse_timestamp(fields[0]);
    if (!ts) {
      report(RecordErrorKind::timestamp, "bad timestamp '" + fields[0] + "'");
      continue;
    }
    if (fields[1].empty()) {
      report(RecordErrorKind::device_id, "empty device id");
      continue;
    }
    if (!is_hashed_device_id(fields[1])) {
      report(RecordErrorKind::device_id, "device id '" + fields[1] + "' is not in hashed form");
      continue;
    }
    double lat = 0, lon = 0;
    if (!parse_double(fields[2], lat) || !parse_double(fields[3], lon)) {
      report(RecordErrorKind::number, "bad coordinate '" + fields[2] + "," + fields[3] + "'");
      continue;
    }
    if (lat < -90.0 || lat > 90.0 || lon < -180.0 || lon > 180.0) {
      report(RecordErrorKind::coordinate_range, "coordinate out of range (" + fields[2] + ", " + fields[3] + ")");
      continue;
    }
    result.records.push_back({*ts, fields[1], lat, lon});
  }
  if (in.bad()) fail(ErrorKind::io, "read error in GCT record stream");
  return result;
}

GctParseResult parse_gct_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open raw GCT file '" + path + "'");
  return parse_gct_records(in);
}

// ---------------------------------------------------------------------------

std::vector<RoadSegment> load_segments(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open segments file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::parse, path + ": missing header");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "segment_id") {
    fail(ErrorKind::parse, path + ": header must start with segment_id,lat,lon");
  }
  std::vector<RoadSegment> out;
  std::set<std::int64_t> seen;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    RoadSegment seg;
    double id = 0;
    if (f.size() < 3 || !parse_double(f[0], id) || !parse_double(f[1], seg.center_lat) ||
        !parse_double(f[2], seg.center_lon)) {
      fail(ErrorKind::parse, path + ":" + std::to_string(line_no) + ": malformed segment row");
    }
    seg.segment_id = static_cast<std::int64_t>(id);
    if (seg.segment_id <= 0 || static_cast<double>(seg.segment_id) != id) {
      fail(ErrorKind::data, path + ":" + std::to_string(line_no) + ": segment_id must be a positive integer");
    }
    if (f.size() >= 4 && !f[3].empty()) {
      if (!parse_double(f[3], seg.half_width_m) || seg.half_width_m <= 0) {
        fail(ErrorKind::data, path + ":" + std::to_string(line_no) + ": bad half_width_m");
      }
    }
    if (!seen.insert(seg.segment_id).second) {
      fail(ErrorKind::data, path + ": duplicate segment_id " + std::to_string(seg.segment_id));
    }
    out.push_back(seg);
  }
  return out;
}

void save_segments(const std::vector<RoadSegment>& segments, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write segments file '" + path + "'");
  out << "segment_id,lat,lon\n";
  char buf[96];
  for (const auto& s : segments) {
    std::snprintf(buf, sizeof buf, "%lld,%.7f,%.7f\n", static_cast<long long>(s.segment_id), s.center_lat,
                  s.center_lon);
    out << buf;
  }
}

// ---------------------------------------------------------------------------

FlowMatrix::FlowMatrix(FlowKind kind, int interval_minutes, std::vector<Timestamp> times,
                       std::vector<std::string> node_ids, std::vector<double> values)
    : kind_(kind),
      interval_minutes_(interval_minutes),
      times_(std::move(times)),
      node_ids_(std::move(node_ids)),
      values_(std::move(values)) {
  if (interval_minutes_ <= 0) fail(ErrorKind::data, "interval_minutes must be positive");
  if (values_.size() != times_.size() * node_ids_.size()) {
    fail(ErrorKind::data, "flow matrix has " + std::to_string(values_.size()) + " cells, expected " +
                              std::to_string(times_.size()) + " x " + std::to_string(node_ids_.size()));
  }
  std::set<std::string> ids(node_ids_.begin(), node_ids_.end());
  if (ids.size() != node_ids_.size()) fail(ErrorKind::data, "duplicate node id in flow matrix");
  const std::int64_t step = static_cast<std::int64_t>(interval_minutes_) * 60;
  for (std::size_t r = 1; r < times_.size(); ++r) {
    const auto prev = times_[r - 1];
    const auto cur = times_[r];
    if (cur <= prev) {
      fail(ErrorKind::data, "timestamps not strictly increasing at row " + std::to_string(r + 1) + " (" +
                                format_timestamp(cur) + ")");
    }
    if (day_index(cur) == day_index(prev)) {
      if (cur - prev != step) {
        fail(ErrorKind::data, "irregular spacing at row " + std::to_string(r + 1) + ": " + format_timestamp(prev) +
                                  " -> " + format_timestamp(cur) + ", expected " +
                                  std::to_string(interval_minutes_) + " minutes");
      }
    } else if ((seconds_of_day(cur) - seconds_of_day(times_[0])) % step != 0) {
      fail(ErrorKind::data, "row " + std::to_string(r + 1) + " (" + format_timestamp(cur) +
                                ") is off the interval grid after a day change");
    }
  }
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isnan(values_[i]) && (values_[i] < 0 || !std::isfinite(values_[i]))) {
      fail(ErrorKind::data, "invalid count " + std::to_string(values_[i]) + " at row " +
                                std::to_string(i / node_ids_.size() + 1) + ", column '" +
                                node_ids_[i % node_ids_.size()] + "'");
    }
  }
}

bool FlowMatrix::is_gap(std::size_t row, std::size_t node) const { return std::isnan(at(row, node)); }

std::vector<CellRef> FlowMatrix::gaps() const {
  std::vector<CellRef> out;
  for (std::size_t r = 0; r < rows(); ++r) {
    for (std::size_t n = 0; n < nodes(); ++n) {
      if (is_gap(r, n)) out.push_back({r, n});
    }
  }
  return out;
}

std::optional<std::size_t> FlowMatrix::node_index(const std::string& id) const {
  for (std::size_t i = 0; i < node_ids_.size(); ++i) {
    if (node_ids_[i] == id) return i;
  }
  return std::nullopt;
}

std::vector<double> FlowMatrix::column(std::size_t node) const {
  std::vector<double> out(rows());
  for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, node);
  return out;
}

FlowMatrix FlowMatrix::select_nodes(const std::vector<std::size_t>& nodes) const {
  std::vector<std::string> ids;
  for (auto n : nodes) ids.push_back(node_ids_.at(n));
  std::vector<double> vals(rows() * nodes.size());
  for (std::size_t r = 0; r < rows(); ++r) {
    for (std::size_t j = 0; j < nodes.size(); ++j) vals[r * nodes.size() + j] = at(r, nodes[j]);
  }
  return FlowMatrix(kind_, interval_minutes_, times_, std::move(ids), std::move(vals));
}

FlowMatrix FlowMatrix::select_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) fail(ErrorKind::invalid_argument, "select_rows: bad row range");
  std::vector<Timestamp> t(times_.begin() + static_cast<std::ptrdiff_t>(begin),
                           times_.begin() + static_cast<std::ptrdiff_t>(end));
  std::vector<double> v(values_.begin() + static_cast<std::ptrdiff_t>(begin * nodes()),
                        values_.begin() + static_cast<std::ptrdiff_t>(end * nodes()));
  return FlowMatrix(kind_, interval_minutes_, std::move(t), node_ids_, std::move(v));
}

bool FlowMatrix::contiguous(std::size_t row) const {
  if (row + 1 >= rows()) return false;
  return times_[row + 1] - times_[row] == static_cast<std::int64_t>(interval_minutes_) * 60 &&
         day_index(times_[row + 1]) == day_index(times_[row]);
}

FlowMatrix parse_flow_matrix(std::istream& in, FlowKind kind, const std::string& source_name) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::parse, source_name + ": missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "Time") {
    fail(ErrorKind::parse, source_name + ": header must be 'Time,<node ids>'");
  }
  std::vector<std::string> ids(header.begin() + 1, header.end());
  if (kind == FlowKind::vehicle) {
    for (auto& id : ids) id = canonical_camera_id(id);
  }
  std::vector<Timestamp> times;
  std::vector<double> values;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size()) {
      fail(ErrorKind::parse, source_name + ":" + std::to_string(line_no) + ": expected " +
                                 std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    }
    const auto ts = parse_timestamp(f[0]);
    if (!ts) fail(ErrorKind::parse, source_name + ":" + std::to_string(line_no) + ": bad timestamp '" + f[0] + "'");
    times.push_back(*ts);
    for (std::size_t c = 1; c < f.size(); ++c) {
      if (f[c].empty() || f[c] == "NaN" || f[c] == "nan" || f[c] == "NA") {
        values.push_back(kNaN);
        continue;
      }
      double v = 0;
      if (!parse_double(f[c], v)) {
        fail(ErrorKind::parse, source_name + ":" + std::to_string(line_no) + ", column '" + header[c] +
                                   "': not a number '" + f[c] + "'");
      }
      if (v < 0) {
        fail(ErrorKind::data, source_name + ": negative count " + f[c] + " at row " + std::to_string(line_no) +
                                  ", column '" + header[c] + "'");
      }
      values.push_back(v);
    }
  }
  int interval = 5;
  for (std::size_t r = 1; r < times.size(); ++r) {
    if (day_index(times[r]) == day_index(times[r - 1]) && times[r] > times[r - 1]) {
      const auto diff = times[r] - times[r - 1];
      if (diff % 60 != 0) fail(ErrorKind::data, source_name + ": spacing is not a whole number of minutes");
      interval = static_cast<int>(diff / 60);
      break;
    }
  }
  try {
    return FlowMatrix(kind, interval, std::move(times), std::move(ids), std::move(values));
  } catch (const Error& e) {
    fail(e.kind(), source_name + ": " + e.what());
  }
}

FlowMatrix load_flow_matrix(const std::string& path, FlowKind kind) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open flow file '" + path + "'");
  return parse_flow_matrix(in, kind, path);
}

void write_flow_matrix(const FlowMatrix& flows, std::ostream& out) {
  out << "Time";
  for (const auto& id : flows.node_ids()) out << ',' << id;
  out << '\n';
  for (std::size_t r = 0; r < flows.rows(); ++r) {
    out << format_timestamp(flows.times()[r]);
    for (std::size_t n = 0; n < flows.nodes(); ++n) out << ',' << format_count(flows.at(r, n));
    out << '\n';
  }
}

void save_flow_matrix(const FlowMatrix& flows, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write flow file '" + path + "'");
  write_flow_matrix(flows, out);
}

// ---------------------------------------------------------------------------

std::string canonical_camera_id(const std::string& raw) {
  const auto t = trim(raw);
  if (!t.empty() && std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); })) {
    return "Cam" + t;
  }
  if (t.size() > 4 && t.rfind("Cam ", 0) == 0) return "Cam" + t.substr(4);
  return t;
}

std::optional<std::string> CameraMapping::segment_of(const std::string& camera_id) const {
  for (const auto& [cam, seg] : entries) {
    if (cam == camera_id) return seg;
  }
  return std::nullopt;
}

void CameraMapping::validate(const FlowMatrix& gct, const FlowMatrix& vehicle) const {
  std::set<std::string> cams;
  for (const auto& [cam, seg] : entries) {
    if (!cams.insert(cam).second) fail(ErrorKind::data, "camera '" + cam + "' mapped more than once");
    if (!gct.node_index(seg)) {
      fail(ErrorKind::data, "camera '" + cam + "' maps to segment '" + seg + "' which has no GCT flow");
    }
  }
  for (const auto& id : vehicle.node_ids()) {
    if (!cams.count(id)) fail(ErrorKind::data, "vehicle flow column '" + id + "' has no camera mapping");
  }
  if (entries.size() != vehicle.nodes()) {
    fail(ErrorKind::data, "camera mapping lists " + std::to_string(entries.size()) + " cameras but vehicle flows have " +
                              std::to_string(vehicle.nodes()));
  }
  if (entries.empty() || entries.size() >= gct.nodes()) {
    fail(ErrorKind::data, "need 1 <= M < N cameras, got M=" + std::to_string(entries.size()) +
                              ", N=" + std::to_string(gct.nodes()));
  }
}

CameraMapping load_camera_mapping(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open camera map '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) fail(ErrorKind::parse, path + ": missing header");
  const auto header = split_csv_line(line);
  if (header.size() != 2 || header[0] != "camera_id" || header[1] != "segment_id") {
    fail(ErrorKind::parse, path + ": header must be 'camera_id,segment_id'");
  }
  CameraMapping mapping;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 2 || f[0].empty() || f[1].empty()) {
      fail(ErrorKind::parse, path + ":" + std::to_string(line_no) + ": malformed mapping row");
    }
    mapping.entries.emplace_back(canonical_camera_id(f[0]), f[1]);
  }
  return mapping;
}

void save_camera_mapping(const CameraMapping& mapping, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write camera map '" + path + "'");
  out << "camera_id,segment_id\n";
  for (const auto& [cam, seg] : mapping.entries) out << cam << ',' << seg << '\n';
}

void TaskSpec::validate() const {
  if (n_vehicle_nodes < 1 || n_gct_nodes <= n_vehicle_nodes) {
    fail(ErrorKind::config, "task needs N > M >= 1, got N=" + std::to_string(n_gct_nodes) +
                                ", M=" + std::to_string(n_vehicle_nodes));
  }
  if (input_steps < 1 || output_steps < 1) fail(ErrorKind::config, "task needs T_in >= 1 and T_out >= 1");
  if (interval_minutes < 1) fail(ErrorKind::config, "task interval must be positive");
}

// ---------------------------------------------------------------------------

namespace {

struct BoxOffset {
  double north_m, east_m;
};

BoxOffset offset_m(const RoadSegment& s, double lat, double lon) {
  const double deg = std::numbers::pi / 180.0;
  return {(lat - s.center_lat) * deg * kEarthRadiusM,
          (lon - s.center_lon) * deg * kEarthRadiusM * std::cos(s.center_lat * deg)};
}

std::vector<std::size_t> order_by_id(const std::vector<RoadSegment>& segments) {
  std::vector<std::size_t> order(segments.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return segments[a].segment_id < segments[b].segment_id; });
  return order;
}

std::optional<std::size_t> locate_in(const std::vector<RoadSegment>& segments, const std::vector<std::size_t>& order,
                                     double lat, double lon) {
  for (auto i : order) {
    const auto& s = segments[i];
    const auto off = offset_m(s, lat, lon);
    if (std::fabs(off.north_m) <= s.half_width_m && std::fabs(off.east_m) <= s.half_width_m) return i;
  }
  return std::nullopt;
}

}  // namespace

std::optional<std::size_t> locate_segment(const std::vector<RoadSegment>& segments, double lat, double lon) {
  return locate_in(segments, order_by_id(segments), lat, lon);
}

AggregationResult aggregate_gct_flow(const std::vector<GctRecord>& records, const std::vector<RoadSegment>& segments,
                                     int interval_minutes, DayWindow window, std::size_t shards) {
  if (segments.empty()) fail(ErrorKind::invalid_argument, "aggregate_gct_flow: no road segments");
  if (interval_minutes <= 0) fail(ErrorKind::invalid_argument, "aggregate_gct_flow: interval must be positive");
  const int span = window.end_minute - window.start_minute;
  if (span <= 0) fail(ErrorKind::invalid_argument, "aggregate_gct_flow: day window end must follow start");
  if (span % interval_minutes != 0) {
    fail(ErrorKind::invalid_argument, "aggregate_gct_flow: interval " + std::to_string(interval_minutes) +
                                          " does not divide the " + std::to_string(span) + "-minute day window");
  }
  AggregationResult result;
  result.total_records = records.size();

  const auto order = order_by_id(segments);
  for (std::size_t a = 0; a < segments.size(); ++a) {
    for (std::size_t b = a + 1; b < segments.size(); ++b) {
      const auto off = offset_m(segments[a], segments[b].center_lat, segments[b].center_lon);
      const double reach = segments[a].half_width_m + segments[b].half_width_m;
      if (std::fabs(off.north_m) <= reach && std::fabs(off.east_m) <= reach) {
        result.warnings.push_back("segments " + std::to_string(segments[a].segment_id) + " and " +
                                  std::to_string(segments[b].segment_id) +
                                  " overlap; shared points go to the lower segment_id");
      }
    }
  }

  const std::int64_t start_s = static_cast<std::int64_t>(window.start_minute) * 60;
  const std::int64_t end_s = static_cast<std::int64_t>(window.end_minute) * 60;
  const std::int64_t step_s = static_cast<std::int64_t>(interval_minutes) * 60;
  const std::size_t per_day = static_cast<std::size_t>(span / interval_minutes);

  std::int64_t first_day = std::numeric_limits<std::int64_t>::max();
  std::int64_t last_day = std::numeric_limits<std::int64_t>::min();
  for (const auto& r : records) {
    const auto sod = seconds_of_day(r.timestamp);
    if (sod < start_s || sod >= end_s) continue;
    first_day = std::min(first_day, day_index(r.timestamp));
    last_day = std::max(last_day, day_index(r.timestamp));
  }
  const std::size_t days = first_day > last_day ? 0 : static_cast<std::size_t>(last_day - first_day + 1);
  const std::size_t n_seg = segments.size();
  const std::size_t rows = days * per_day;

  struct Partial {
    std::vector<std::uint64_t> counts;
    std::size_t outside_window = 0;
    std::size_t outside_segments = 0;
  };
  auto count_slice = [&](std::size_t begin, std::size_t end, Partial& p) {
    p.counts.assign(rows * n_seg, 0);
    for (std::size_t i = begin; i < end; ++i) {
      const auto& r = records[i];
      const auto sod = seconds_of_day(r.timestamp);
      if (sod < start_s || sod >= end_s) {
        ++p.outside_window;
        continue;
      }
      const auto seg = locate_in(segments, order, r.latitude, r.longitude);
      if (!seg) {
        ++p.outside_segments;
        continue;
      }
      const auto day = static_cast<std::size_t>(day_index(r.timestamp) - first_day);
      const auto slot = static_cast<std::size_t>((sod - start_s) / step_s);
      ++p.counts[(day * per_day + slot) * n_seg + *seg];
    }
  };

  const std::size_t n_shards = std::max<std::size_t>(1, std::min(shards, records.size()));
  std::vector<Partial> partials(n_shards);
  if (n_shards == 1) {
    count_slice(0, records.size(), partials[0]);
  } else {
    std::vector<std::thread> workers;
    const std::size_t chunk = (records.size() + n_shards - 1) / n_shards;
    for (std::size_t s = 0; s < n_shards; ++s) {
      const std::size_t b = std::min(records.size(), s * chunk);
      const std::size_t e = std::min(records.size(), b + chunk);
      workers.emplace_back(count_slice, b, e, std::ref(partials[s]));
    }
    for (auto& w : workers) w.join();
  }

  std::vector<std::uint64_t> counts(rows * n_seg, 0);
  for (const auto& p : partials) {
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += p.counts[i];
    result.outside_window += p.outside_window;
    result.outside_segments += p.outside_segments;
  }

  std::vector<Timestamp> times;
  times.reserve(rows);
  for (std::size_t d = 0; d < days; ++d) {
    for (std::size_t k = 0; k < per_day; ++k) {
      times.push_back((first_day + static_cast<std::int64_t>(d)) * kSecondsPerDay + start_s +
                      static_cast<std::int64_t>(k) * step_s);
    }
  }
  std::vector<std::string> ids;
  for (const auto& s : segments) ids.push_back(std::to_string(s.segment_id));
  std::vector<double> values(counts.begin(), counts.end());
  result.flows = FlowMatrix(FlowKind::gct, interval_minutes, std::move(times), std::move(ids), std::move(values));
  return result;
}

// ---------------------------------------------------------------------------

FlowStats descriptive_stats(const FlowMatrix& flows) {
  if (flows.rows() == 0 || flows.nodes() == 0) fail(ErrorKind::data, "descriptive_stats: empty flow matrix");
  FlowStats st;
  st.samples = flows.rows();
  st.nodes = flows.nodes();
  double total = 0.0;
  std::size_t count = 0;
  st.node_means.assign(flows.nodes(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t n = 0; n < flows.nodes(); ++n) {
    double node_total = 0.0;
    std::size_t node_count = 0;
    for (std::size_t r = 0; r < flows.rows(); ++r) {
      const double v = flows.at(r, n);
      if (std::isnan(v)) {
        ++st.gap_cells;
        continue;
      }
      node_total += v;
      ++node_count;
    }
    total += node_total;
    count += node_count;
    if (node_count) st.node_means[n] = node_total / static_cast<double>(node_count);
  }
  if (count == 0) fail(ErrorKind::data, "descriptive_stats: every cell is a gap");
  st.mean = total / static_cast<double>(count);
  double sq = 0.0;
  for (double v : flows.values()) {
    if (!std::isnan(v)) sq += (v - st.mean) * (v - st.mean);
  }
  st.std = std::sqrt(sq / static_cast<double>(count));
  bool first = true;
  for (std::size_t n = 0; n < flows.nodes(); ++n) {
    const double m = st.node_means[n];
    if (std::isnan(m)) continue;
    if (first || m > st.max_node_mean) {
      st.max_node_mean = m;
      st.max_node = flows.node_ids()[n];
    }
    if (first || m < st.min_node_mean) {
      st.min_node_mean = m;
      st.min_node = flows.node_ids()[n];
    }
    first = false;
  }
  return st;
}

std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) fail(ErrorKind::invalid_argument, "pearson: length mismatch");
  if (x.size() < 2) return std::nullopt;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

DailyCorrelation daily_pearson(const FlowMatrix& gct, const FlowMatrix& vehicle, const CameraMapping& mapping) {
  if (gct.times() != vehicle.times()) {
    fail(ErrorKind::data, "daily_pearson: GCT and vehicle flows are not on the same interval grid");
  }
  mapping.validate(gct, vehicle);
  DailyCorrelation out;
  std::vector<std::pair<std::size_t, std::size_t>> day_rows;  // [begin, end)
  for (std::size_t r = 0; r < gct.rows(); ++r) {
    if (r == 0 || day_index(gct.times()[r]) != day_index(gct.times()[r - 1])) {
      out.days.push_back(day_index(gct.times()[r]) * kSecondsPerDay);
      day_rows.emplace_back(r, r + 1);
    } else {
      day_rows.back().second = r + 1;
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> columns;  // (vehicle col, gct col)
  for (std::size_t c = 0; c < vehicle.nodes(); ++c) {
    const auto& cam = vehicle.node_ids()[c];
    out.cameras.push_back(cam);
    columns.emplace_back(c, *gct.node_index(*mapping.segment_of(cam)));
  }
  for (const auto& [begin, end] : day_rows) {
    for (const auto& [vc, gc] : columns) {
      std::vector<double> xs, ys;
      for (std::size_t r = begin; r < end; ++r) {
        const double g = gct.at(r, gc), v = vehicle.at(r, vc);
        if (std::isnan(g) || std::isnan(v)) continue;
        xs.push_back(g);
        ys.push_back(v);
      }
      out.r.push_back(pearson(xs, ys));
    }
  }
  return out;
}

void write_daily_correlation(const DailyCorrelation& corr, std::ostream& out) {
  out << "date";
  for (const auto& c : corr.cameras) out << ',' << c;
  out << '\n';
  char buf[32];
  for (std::size_t d = 0; d < corr.days.size(); ++d) {
    out << format_date(corr.days[d]);
    for (std::size_t c = 0; c < corr.cameras.size(); ++c) {
      const auto& r = corr.at(d, c);
      if (r) {
        std::snprintf(buf, sizeof buf, "%.6f", *r);
        out << ',' << buf;
      } else {
        out << ",NA";
      }
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

std::vector<double> Normalizer::apply(const FlowMatrix& flows) const {
  if (flows.nodes() != mean.size()) fail(ErrorKind::invalid_argument, "normalizer node count mismatch");
  std::vector<double> out(flows.values().begin(), flows.values().end());
  const std::size_t n = flows.nodes();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!std::isnan(out[i])) out[i] = apply(out[i], i % n);
  }
  return out;
}

Normalizer fit_normalizer(const FlowMatrix& flows, RowRange train_rows, double epsilon) {
  if (train_rows.size() == 0 || train_rows.end > flows.rows()) {
    fail(ErrorKind::invalid_argument, "fit_normalizer: training rows must be a non-empty range inside the matrix");
  }
  Normalizer norm;
  norm.epsilon = epsilon;
  norm.mean.assign(flows.nodes(), 0.0);
  norm.std.assign(flows.nodes(), epsilon);
  for (std::size_t n = 0; n < flows.nodes(); ++n) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t r = train_rows.begin; r < train_rows.end; ++r) {
      const double v = flows.at(r, n);
      if (std::isnan(v)) continue;
      total += v;
      ++count;
    }
    if (count == 0) {
      norm.zero_variance_nodes.push_back(n);
      continue;
    }
    const double m = total / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t r = train_rows.begin; r < train_rows.end; ++r) {
      const double v = flows.at(r, n);
      if (!std::isnan(v)) sq += (v - m) * (v - m);
    }
    const double sd = std::sqrt(sq / static_cast<double>(count));
    norm.mean[n] = m;
    if (sd > 0.0) {
      norm.std[n] = sd;
    } else {
      norm.zero_variance_nodes.push_back(n);
    }
  }
  return norm;
}

SplitRanges chronological_split(std::size_t rows, double train, double val, double test) {
  if (!(train > 0 && val > 0 && test > 0)) fail(ErrorKind::invalid_argument, "split ratios must be positive");
  if (std::fabs(train + val + test - 1.0) > 1e-9) fail(ErrorKind::invalid_argument, "split ratios must sum to 1");
  const double n = static_cast<double>(rows);
  const auto n_val = static_cast<std::size_t>(std::floor(val * n + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(test * n + 1e-9));
  if (n_val == 0 || n_test == 0 || n_val + n_test >= rows) {
    fail(ErrorKind::data, "chronological split of " + std::to_string(rows) + " rows leaves an empty range");
  }
  const std::size_t n_train = rows - n_val - n_test;
  return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, rows}};
}

std::vector<std::size_t> window_starts(const FlowMatrix& flows, RowRange rows, std::size_t input_steps,
                                       std::size_t output_steps, bool mask_days) {
  if (rows.end > flows.rows() || rows.begin > rows.end) fail(ErrorKind::invalid_argument, "window range outside matrix");
  const std::size_t span = input_steps + output_steps;
  std::vector<std::size_t> out;
  if (span == 0 || rows.size() < span) return out;
  // run_end[r]: first row > r not reachable from r through contiguous steps
  std::vector<std::size_t> run_end(rows.size());
  for (std::size_t i = rows.size(); i-- > 0;) {
    const std::size_t r = rows.begin + i;
    if (i + 1 < rows.size() && (!mask_days || flows.contiguous(r))) {
      run_end[i] = run_end[i + 1];
    } else {
      run_end[i] = r + 1;
    }
  }
  for (std::size_t start = rows.begin; start + span <= rows.end; ++start) {
    if (run_end[start - rows.begin] >= start + span) out.push_back(start);
  }
  return out;
}

WindowList make_windows(const FlowMatrix& flows, const TaskSpec& task, RowRange rows, bool mask_days) {
  WindowList list;
  const std::size_t tin = task.input_steps, tout = task.output_steps;
  if (tin == 0 || tout == 0) fail(ErrorKind::invalid_argument, "make_windows: T_in and T_out must be >= 1");
  if (rows.size() < tin + tout) {
    list.warnings.push_back("row range of length " + std::to_string(rows.size()) + " is shorter than T_in + T_out = " +
                            std::to_string(tin + tout) + "; no windows");
    return list;
  }
  const std::size_t n = flows.nodes();
  for (auto start : window_starts(flows, rows, tin, tout, mask_days)) {
    Window w;
    w.start_row = start;
    w.input.resize(n * tin);
    w.target.resize(n * tout);
    for (std::size_t node = 0; node < n; ++node) {
      for (std::size_t t = 0; t < tin; ++t) w.input[node * tin + t] = flows.at(start + t, node);
      for (std::size_t t = 0; t < tout; ++t) w.target[node * tout + t] = flows.at(start + tin + t, node);
    }
    list.windows.push_back(std::move(w));
  }
  if (list.windows.empty()) list.warnings.push_back("no window fits inside a contiguous day in the range");
  return list;
}

}  // namespace tel2veh::flow
