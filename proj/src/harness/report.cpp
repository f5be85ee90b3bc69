#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "common/error.hpp"
#include "harness/harness.hpp"

namespace tel2veh::harness {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string pad(const std::string& s, std::size_t width, bool left = false) {
  if (s.size() >= width) return s;
  const std::string fill(width - s.size(), ' ');
  return left ? s + fill : fill + s;
}

std::string ir_text(const std::optional<double>& ir) { return ir ? fixed(*ir, 1) : "n/a"; }

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write '" + path + "'");
  out << text;
  if (!out) fail(ErrorKind::io, "write failed for '" + path + "'");
}

}  // namespace

ReportFormat parse_report_format(const std::string& name) {
  if (name == "text" || name == "text-table") return ReportFormat::text_table;
  if (name == "rows" || name == "csv") return ReportFormat::rows;
  if (name == "plot" || name == "line-plot") return ReportFormat::plot;
  fail(ErrorKind::invalid_argument, "unknown report format '" + name + "' (text, rows, plot)");
}

std::string render_text(const ExperimentReport& report) {
  std::ostringstream out;
  out << "Leave-one-camera-out evaluation\n";
  out << "config fingerprint  " << report.fingerprint << "\n";
  out << "cameras            ";
  for (const auto& c : report.cameras) out << ' ' << c;
  out << "\nseeds              ";
  for (auto s : report.seeds) out << ' ' << s;
  out << "\nfolds completed     " << report.completed << " / " << report.folds.size() << " ("
      << report.scheduled_trainings << " trainings scheduled)\n";
  out << "IR                  (score(w/o) - score(w)) / score(w/o) x 100, positive when the framework lowers error\n";
  out << "MAPE                |e| / max(|truth|, 1) x 100\n\n";

  const std::size_t label = 15, col = 9;
  out << pad("", label);
  for (auto h : report.horizons) {
    out << pad(std::to_string(h * static_cast<std::size_t>(report.interval_minutes)) + " mins.", 3 * col);
  }
  out << "\n" << pad("Model  Arm", label, true);
  for (std::size_t i = 0; i < report.horizons.size(); ++i) out << pad("MAE", col) << pad("RMSE", col) << pad("MAPE(%)", col);
  out << "\n";
  auto row = [&](const std::string& name, auto pick) {
    out << pad(name, label, true);
    for (const auto& s : report.summary) {
      const MetricsTriple& m = pick(s);
      out << pad(fixed(m.mae, 2), col) << pad(fixed(m.rmse, 2), col) << pad(fixed(m.mape, 2), col);
    }
    out << "\n";
  };
  row("STGNN  w/o", [](const HorizonSummary& s) -> const MetricsTriple& { return s.without; });
  row("STGNN  w", [](const HorizonSummary& s) -> const MetricsTriple& { return s.with; });
  for (const char* name : {"STGNN  IR(%)", "Average IR"}) {
    out << pad(name, label, true);
    for (const auto& s : report.summary) {
      out << pad(ir_text(s.ir_mae), col) << pad(ir_text(s.ir_rmse), col) << pad(ir_text(s.ir_mape), col);
    }
    out << "\n";
  }

  out << "\nPer excluded camera, MAE averaged over completed seeds\n";
  out << pad("Camera", 8, true) << pad("Node", 8, true) << pad("Folds", 6);
  for (auto h : report.horizons) {
    const auto m = std::to_string(h * static_cast<std::size_t>(report.interval_minutes));
    out << pad("w/o@" + m, col + 1) << pad("w@" + m, col) << pad("IR(%)", 7);
  }
  out << "\n";
  for (const auto& c : report.per_camera) {
    out << pad(c.camera, 8, true) << pad(c.node, 8, true) << pad(std::to_string(c.completed), 6);
    for (const auto& s : c.horizons) {
      if (c.completed == 0) {
        out << pad("-", col + 1) << pad("-", col) << pad("-", 7);
      } else {
        out << pad(fixed(s.without.mae, 2), col + 1) << pad(fixed(s.with.mae, 2), col) << pad(ir_text(s.ir_mae), 7);
      }
    }
    out << "\n";
  }

  bool header = false;
  for (const auto& f : report.folds) {
    for (const auto* arm : {&f.with, &f.without}) {
      if (arm->ok) continue;
      if (!header) out << "\nFailed folds\n";
      header = true;
      out << "  seed " << f.seed << " camera " << f.camera << " " << (arm == &f.with ? "w" : "w/o") << ": "
          << arm->error << "\n";
    }
  }
  return out.str();
}

std::string render_rows(const ExperimentReport& report) {
  std::ostringstream out;
  out << "camera,seed,arm,horizon,metric,value\n";
  for (const auto& f : report.folds) {
    if (!f.ok()) continue;
    for (const auto* arm : {&f.with, &f.without}) {
      const char* name = arm == &f.with ? "with" : "without";
      for (std::size_t h = 0; h < report.horizons.size(); ++h) {
        const auto& m = arm->horizons[h];
        const std::string prefix =
            f.camera + "," + std::to_string(f.seed) + "," + name + "," + std::to_string(report.horizons[h]) + ",";
        out << prefix << "mae," << exact(m.mae) << "\n";
        out << prefix << "rmse," << exact(m.rmse) << "\n";
        out << prefix << "mape," << exact(m.mape) << "\n";
      }
    }
  }
  return out.str();
}

std::string render_plot(const ExperimentReport& report, const Dataset& data, const std::string& camera,
                        const std::string& day) {
  const FoldEntry* fold = nullptr;
  for (const auto& f : report.folds) {
    if (f.camera == camera && f.ok()) {
      fold = &f;
      break;
    }
  }
  if (!fold) fail(ErrorKind::data, "no completed fold excludes camera '" + camera + "'");
  std::map<flow::Timestamp, std::size_t> at;
  for (std::size_t i = 0; i < fold->step1_time.size(); ++i) at[fold->step1_time[i]] = i;
  std::ostringstream out;
  out << "time,truth,pred_with,pred_without\n";
  std::size_t rows = 0;
  for (std::size_t r = 0; r < data.gct.rows(); ++r) {
    const auto t = data.gct.times()[r];
    if (flow::format_date(t) != day) continue;
    ++rows;
    out << flow::format_timestamp(t) << ",";
    if (!data.vehicle.is_gap(r, fold->camera_index)) out << exact(data.vehicle.at(r, fold->camera_index));
    out << ",";
    const auto it = at.find(t);
    if (it != at.end()) out << exact(fold->with.step1_pred[it->second]) << "," << exact(fold->without.step1_pred[it->second]);
    else out << ",";
    out << "\n";
  }
  if (rows == 0) fail(ErrorKind::invalid_argument, "no rows on day '" + day + "'");
  return out.str();
}

std::string emit_report(const ExperimentReport& report, const Dataset& data, ReportFormat format,
                        const std::string& dir, const std::string& camera, const std::string& day) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create '" + dir + "': " + ec.message());
  const std::filesystem::path root(dir);
  switch (format) {
    case ReportFormat::text_table: {
      const auto path = (root / "report.txt").string();
      write_file(path, render_text(report));
      return path;
    }
    case ReportFormat::rows: {
      const auto path = (root / "report_rows.csv").string();
      write_file(path, render_rows(report));
      return path;
    }
    case ReportFormat::plot: {
      if (report.cameras.empty()) fail(ErrorKind::data, "report has no cameras");
      if (data.gct.rows() == 0) fail(ErrorKind::data, "dataset has no rows");
      const std::string cam = camera.empty() ? report.cameras.front() : flow::canonical_camera_id(camera);
      const std::string d = day.empty() ? flow::format_date(data.gct.times().back()) : day;
      std::string node;
      for (const auto& f : report.folds) {
        if (f.camera == cam) node = f.node;
      }
      if (node.empty()) fail(ErrorKind::invalid_argument, "camera '" + cam + "' is not in the report");
      const auto text = render_plot(report, data, cam, d);
      const auto path = (root / ("plot_" + node + "_" + d + ".csv")).string();
      write_file(path, text);
      return path;
    }
  }
  fail(ErrorKind::invalid_argument, "unknown report format");
}

}  // namespace tel2veh::harness
