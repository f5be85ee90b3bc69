#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>

#include "common/error.hpp"
#include "harness/harness.hpp"

namespace tel2veh::harness {

MetricsTriple metrics(std::span<const double> pred, std::span<const double> truth, double epsilon) {
  if (pred.size() != truth.size()) {
    fail(ErrorKind::invalid_argument, "metrics: " + std::to_string(pred.size()) + " predictions vs " +
                                          std::to_string(truth.size()) + " truth values");
  }
  if (pred.empty()) fail(ErrorKind::invalid_argument, "metrics: no cells");
  double abs_sum = 0.0, sq_sum = 0.0, pct_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    abs_sum += std::fabs(e);
    sq_sum += e * e;
    pct_sum += std::fabs(e) / std::max(std::fabs(truth[i]), epsilon);
  }
  const double n = static_cast<double>(pred.size());
  return {abs_sum / n, std::sqrt(sq_sum / n), pct_sum / n * 100.0};
}

std::optional<double> improvement_ratio(double score_with, double score_without) {
  if (!(score_without > 0.0) || !std::isfinite(score_with)) return std::nullopt;
  return (score_without - score_with) / score_without * 100.0;
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_config(const KeyValueConfig& kv) {
  ExperimentConfig c;
  c.interval_minutes = static_cast<int>(kv.get_int("interval_minutes", c.interval_minutes));
  c.split_train = kv.get_double("split_train", c.split_train);
  c.split_val = kv.get_double("split_val", c.split_val);
  c.split_test = kv.get_double("split_test", c.split_test);
  c.graph_sigma_m = kv.get_double("graph_sigma_m", c.graph_sigma_m);
  c.graph_threshold = kv.get_double("graph_threshold", c.graph_threshold);
  c.model = stgnn::StgnnConfig::from_config(kv);
  c.mgat.attention_dim = kv.get_size("attention_dim", c.mgat.attention_dim);
  c.mgat.leaky_slope = kv.get_double("leaky_slope", c.mgat.leaky_slope);
  c.mgat.heads = kv.get_size("heads", c.mgat.heads);
  c.lambda_init = kv.get_double("lambda_init", c.lambda_init);
  const auto batch = kv.get_size("batch_size", 64);
  const double lr = kv.get_double("learning_rate", 1e-3);
  const double clip = kv.get_double("clip_norm", 5.0);
  for (auto* t : {&c.stage1, &c.stage2}) {
    t->batch_size = batch;
    t->adam.lr = lr;
    t->adam.clip_norm = clip;
  }
  c.stage1.epochs = kv.get_size("stage1_epochs", 30);
  c.stage1.patience = kv.get_size("stage1_patience", 8);
  c.stage2.epochs = kv.get_size("stage2_epochs", 30);
  c.stage2.patience = kv.get_size("stage2_patience", 8);
  c.horizons = kv.get_size_list("horizons", c.horizons);
  c.workers = kv.get_size("workers", c.workers);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  return from_config(KeyValueConfig::load(path));
}

void ExperimentConfig::validate() const {
  if (interval_minutes <= 0) fail(ErrorKind::config, "interval_minutes must be positive");
  for (double r : {split_train, split_val, split_test}) {
    if (!(r > 0.0) || r >= 1.0) fail(ErrorKind::config, "split ratios must lie in (0, 1)");
  }
  if (std::fabs(split_train + split_val + split_test - 1.0) > 1e-9) {
    fail(ErrorKind::config, "split ratios must sum to 1");
  }
  if (!(graph_sigma_m > 0.0) || graph_threshold < 0.0) fail(ErrorKind::config, "bad graph kernel parameters");
  if (!(lambda_init > 0.0)) fail(ErrorKind::config, "lambda_init must be positive");
  if (stage1.batch_size == 0 || stage2.batch_size == 0) fail(ErrorKind::config, "batch_size must be positive");
  if (stage1.epochs == 0 || stage2.epochs == 0) fail(ErrorKind::config, "epochs must be positive");
  if (horizons.empty()) fail(ErrorKind::config, "no horizons");
  for (auto h : horizons) {
    if (h == 0 || h > model.out_steps) {
      fail(ErrorKind::config, "horizon " + std::to_string(h) + " outside 1.." + std::to_string(model.out_steps));
    }
  }
  auto m = model;
  m.n_nodes = std::max<std::size_t>(m.n_nodes, 1);
  m.validate();
  auto g = mgat;
  g.channels = model.channels;
  g.feature_dim = model.feature_width();
  g.validate();
}

std::string ExperimentConfig::serialize() const {
  auto kv = KeyValueConfig::parse(model.serialize());
  kv.set("n_nodes", "0");
  kv.set("in_channels", "0");
  kv.set("interval_minutes", std::to_string(interval_minutes));
  kv.set("split_train", fmt(split_train));
  kv.set("split_val", fmt(split_val));
  kv.set("split_test", fmt(split_test));
  kv.set("graph_sigma_m", fmt(graph_sigma_m));
  kv.set("graph_threshold", fmt(graph_threshold));
  kv.set("attention_dim", std::to_string(mgat.attention_dim));
  kv.set("leaky_slope", fmt(mgat.leaky_slope));
  kv.set("heads", std::to_string(mgat.heads));
  kv.set("lambda_init", fmt(lambda_init));
  kv.set("batch_size", std::to_string(stage1.batch_size));
  kv.set("learning_rate", fmt(stage1.adam.lr));
  kv.set("clip_norm", fmt(stage1.adam.clip_norm));
  kv.set("stage1_epochs", std::to_string(stage1.epochs));
  kv.set("stage1_patience", std::to_string(stage1.patience));
  kv.set("stage2_epochs", std::to_string(stage2.epochs));
  kv.set("stage2_patience", std::to_string(stage2.patience));
  kv.set("horizons", join(horizons));
  return kv.serialize();
}

std::string ExperimentConfig::fingerprint() const { return hex64(fnv1a64(serialize())); }

// ---------------------------------------------------------------------------

Dataset make_dataset(flow::FlowMatrix gct, flow::FlowMatrix vehicle, flow::CameraMapping mapping,
                     std::vector<flow::RoadSegment> segments, std::optional<graph::GraphSpec> graph,
                     const ExperimentConfig& config) {
  if (gct.interval_minutes() != config.interval_minutes || vehicle.interval_minutes() != config.interval_minutes) {
    fail(ErrorKind::config, "flow interval does not match interval_minutes=" + std::to_string(config.interval_minutes));
  }
  if (gct.times() != vehicle.times()) fail(ErrorKind::data, "GCT and vehicle flows have different time rows");
  mapping.validate(gct, vehicle);
  Dataset d;
  std::map<std::string, flow::RoadSegment> by_id;
  for (const auto& s : segments) by_id[std::to_string(s.segment_id)] = s;
  for (const auto& id : gct.node_ids()) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) fail(ErrorKind::data, "GCT node " + id + " has no segment entry");
    d.segments.push_back(it->second);
  }
  if (graph) {
    graph->require_order(gct.node_ids());
    d.graph = std::move(*graph);
  } else {
    d.graph = graph::build_distance_graph(d.segments, config.graph_sigma_m, config.graph_threshold);
  }
  for (const auto& cam : vehicle.node_ids()) {
    d.camera_nodes.push_back(*gct.node_index(*mapping.segment_of(cam)));
  }
  d.gct = std::move(gct);
  d.vehicle = std::move(vehicle);
  d.mapping = std::move(mapping);
  return d;
}

Dataset load_dataset(const std::string& dir, const ExperimentConfig& config) {
  const std::filesystem::path root(dir);
  auto gct = flow::load_flow_matrix((root / "gct_flows.csv").string(), flow::FlowKind::gct);
  auto veh = flow::load_flow_matrix((root / "vehicle_flows.csv").string(), flow::FlowKind::vehicle);
  auto mapping = flow::load_camera_mapping((root / "camera_map.csv").string());
  auto segments = flow::load_segments((root / "segments.csv").string());
  std::optional<graph::GraphSpec> g;
  const auto adj = root / "adjacency.csv";
  if (std::filesystem::exists(adj)) g = graph::load_adjacency(adj.string(), gct.node_ids());
  return make_dataset(std::move(gct), std::move(veh), std::move(mapping), std::move(segments), std::move(g), config);
}

// ---------------------------------------------------------------------------

std::string gct_lineage_tag() { return "gct"; }
std::string vehicle_lineage_tag(const std::string& camera_id) { return "vehicle:" + camera_id; }

namespace {

std::set<std::string> vehicle_lineage(const flow::FlowMatrix& veh) {
  std::set<std::string> out;
  for (const auto& id : veh.node_ids()) out.insert(vehicle_lineage_tag(id));
  return out;
}

SplitWindows make_split(const Dataset& data, const FoldData& fold, const flow::Normalizer& gct_norm,
                        const flow::Normalizer& veh_norm, const std::vector<std::size_t>& starts,
                        const stgnn::StgnnConfig& m) {
  SplitWindows w;
  w.gct = stgnn::WindowSet(data.gct, gct_norm, starts, m.in_steps, m.out_steps, {gct_lineage_tag()});
  w.vehicle = stgnn::WindowSet(fold.retained_vehicle, veh_norm, starts, m.in_steps, m.out_steps,
                               vehicle_lineage(fold.retained_vehicle));
  return w;
}

}  // namespace

FoldData prepare_fold(const Dataset& data, const ExperimentConfig& config, std::optional<std::size_t> excluded) {
  const std::size_t M = data.cameras();
  if (M < 2) fail(ErrorKind::data, "leave-one-out needs at least 2 cameras");
  FoldData fold;
  fold.excluded = excluded;
  for (std::size_t m = 0; m < M; ++m) {
    if (excluded && *excluded == m) continue;
    fold.retained.push_back(m);
    fold.camera_nodes.push_back(data.camera_nodes[m]);
  }
  if (excluded) {
    if (*excluded >= M) fail(ErrorKind::invalid_argument, "excluded camera index out of range");
    fold.excluded_camera = data.vehicle.node_ids()[*excluded];
    fold.excluded_node = data.camera_nodes[*excluded];
  }
  fold.retained_vehicle = data.vehicle.select_nodes(fold.retained);
  fold.graph = data.graph;
  fold.vehicle_graph = data.graph.subgraph(fold.camera_nodes);

  const auto& m = config.model;
  const auto split = flow::chronological_split(data.gct.rows(), config.split_train, config.split_val, config.split_test);
  const auto gct_norm = flow::fit_normalizer(data.gct, split.train);
  const auto veh_norm = flow::fit_normalizer(fold.retained_vehicle, split.train);
  const std::vector<const flow::FlowMatrix*> seen = {&data.gct, &fold.retained_vehicle};
  const std::vector<const flow::FlowMatrix*> all = {&data.gct, &data.vehicle};
  fold.train = make_split(data, fold, gct_norm, veh_norm,
                          stgnn::clean_window_starts(seen, split.train, m.in_steps, m.out_steps), m);
  fold.val = make_split(data, fold, gct_norm, veh_norm,
                        stgnn::clean_window_starts(seen, split.val, m.in_steps, m.out_steps), m);
  fold.test = make_split(data, fold, gct_norm, veh_norm,
                         stgnn::clean_window_starts(all, split.test, m.in_steps, m.out_steps), m);
  if (fold.train.gct.size() == 0 || fold.val.gct.size() == 0 || fold.test.gct.size() == 0) {
    fail(ErrorKind::data, "a split has no complete windows (train " + std::to_string(fold.train.gct.size()) +
                              ", val " + std::to_string(fold.val.gct.size()) + ", test " +
                              std::to_string(fold.test.gct.size()) + ")");
  }
  for (auto s : fold.test.gct.starts()) {
    fold.test_first_time.push_back(data.gct.times()[s + m.in_steps]);
    if (excluded) {
      for (std::size_t k = 0; k < m.out_steps; ++k) fold.test_truth.push_back(data.vehicle.at(s + m.in_steps + k, *excluded));
    }
  }

  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t r = split.train.begin; r < split.train.end; ++r) {
    for (std::size_t c = 0; c < fold.retained_vehicle.nodes(); ++c) {
      if (fold.retained_vehicle.is_gap(r, c)) continue;
      const double v = fold.retained_vehicle.at(r, c);
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  if (n == 0) fail(ErrorKind::data, "no training vehicle flow for the retained cameras");
  fold.vehicle_mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sq / static_cast<double>(n) - fold.vehicle_mean * fold.vehicle_mean);
  fold.vehicle_std = var > 0.0 ? std::sqrt(var) : 1.0;
  return fold;
}

void check_fold_hygiene(const FoldData& fold) {
  if (!fold.excluded) return;
  const auto tag = vehicle_lineage_tag(fold.excluded_camera);
  auto check = [&](const stgnn::WindowSet& w, const char* what) {
    if (w.lineage().count(tag)) {
      fail(ErrorKind::state, std::string("withheld camera ") + fold.excluded_camera + " reached the " + what + " set");
    }
  };
  for (const auto* s : {&fold.train, &fold.val}) {
    check(s->gct, "GCT");
    check(s->vehicle, "vehicle");
  }
  for (const auto& id : fold.retained_vehicle.node_ids()) {
    if (id == fold.excluded_camera) fail(ErrorKind::state, "withheld camera still among retained vehicle flows");
  }
  for (auto node : fold.camera_nodes) {
    if (node == fold.excluded_node) fail(ErrorKind::state, "withheld camera's node still supervised");
  }
}

}  // namespace tel2veh::harness
