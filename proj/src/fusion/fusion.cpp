#include "fusion/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "common/config.hpp"
#include "common/error.hpp"
#include "numcore/ops.hpp"
#include "numcore/rng.hpp"

namespace tel2veh::fusion {

using num::Shape;
using num::Tensor;

namespace {

constexpr double kMasked = -1e30;

// Copies one window slice out of a cached [W, ...] feature buffer.
Tensor gather(const std::vector<double>& buffer, const Shape& item, const std::vector<std::size_t>& idx) {
  const std::size_t per = num::shape_size(item);
  std::vector<double> out(idx.size() * per);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    std::copy(buffer.begin() + static_cast<std::ptrdiff_t>(idx[b] * per),
              buffer.begin() + static_cast<std::ptrdiff_t>((idx[b] + 1) * per),
              out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  Shape shape{idx.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  return Tensor::from(shape, std::move(out));
}

void check_camera_nodes(const std::vector<std::size_t>& camera_nodes, std::size_t n_nodes) {
  if (camera_nodes.empty()) fail(ErrorKind::invalid_argument, "stage 2 needs at least one camera node");
  std::set<std::size_t> seen;
  for (auto c : camera_nodes) {
    if (c >= n_nodes) fail(ErrorKind::invalid_argument, "camera node index out of range");
    if (!seen.insert(c).second) fail(ErrorKind::invalid_argument, "two cameras map to the same GCT node");
  }
  if (camera_nodes.size() >= n_nodes) fail(ErrorKind::invalid_argument, "need at least one camera-free node");
}

}  // namespace

void MgatConfig::validate() const {
  if (channels == 0 || feature_dim == 0 || attention_dim == 0 || heads == 0) {
    fail(ErrorKind::config, "mgat: channels, feature_dim, attention_dim and heads must be positive");
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) fail(ErrorKind::config, "mgat: leaky_slope must be in [0, 1)");
}

std::vector<std::uint8_t> candidate_table(const graph::GraphSpec& g, const std::vector<std::size_t>& camera_nodes) {
  const std::size_t N = g.size(), M = camera_nodes.size();
  std::vector<std::uint8_t> table(N * (1 + M), 0);
  for (std::size_t n = 0; n < N; ++n) {
    table[n * (1 + M)] = 1;
    bool any = false;
    for (std::size_t m = 0; m < M; ++m) {
      if (camera_nodes[m] >= N) fail(ErrorKind::invalid_argument, "camera node index out of range");
      if (g.weight(n, camera_nodes[m]) != 0.0) {
        table[n * (1 + M) + 1 + m] = 1;
        any = true;
      }
    }
    if (!any) {
      for (std::size_t m = 0; m < M; ++m) table[n * (1 + M) + 1 + m] = 1;
    }
  }
  return table;
}

Mgat::Mgat(MgatConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  num::Rng rng(seed);
  const std::size_t C = config_.heads * config_.channels, D = config_.feature_dim, A = config_.attention_dim;
  params_.add("w", num::glorot_init({C, D, A}, D, A, rng));
  params_.add("a_src", num::glorot_init({C, A, 1}, A, 1, rng));
  params_.add("a_dst", num::glorot_init({C, A, 1}, A, 1, rng));
}

Mgat::Output Mgat::forward(const Tensor& hg, const Tensor& hv, const std::vector<std::uint8_t>& candidates) const {
  using namespace num;
  const std::size_t K = config_.channels, D = config_.feature_dim, H = config_.heads;
  const auto& gs = hg.shape();
  if (gs.size() != 4 || gs[1] != K || gs[3] != D) {
    fail(ErrorKind::invalid_argument, "mgat: GCT features " + shape_string(gs) + " do not match K=" +
                                          std::to_string(K) + ", D=" + std::to_string(D));
  }
  const std::size_t B = gs[0], N = gs[2];
  std::size_t M = 0;
  if (hv.defined()) {
    const auto& vs = hv.shape();
    if (vs.size() != 4 || vs[0] != B || vs[1] != K || vs[3] != D) {
      fail(ErrorKind::invalid_argument, "mgat: vehicle features " + shape_string(vs) + " do not match " +
                                            shape_string(gs));
    }
    M = vs[2];
  }
  if (candidates.size() != N * (1 + M)) fail(ErrorKind::invalid_argument, "mgat: candidate table size mismatch");

  auto tile = [&](const Tensor& t) { return H == 1 ? t : concat(std::vector<Tensor>(H, t), 1); };
  const Tensor& W = params_.get("w");
  const Tensor wg = matmul(tile(hg), W);  // [B, HK, N, A]
  Output out;
  Tensor fused;
  if (M == 0) {
    fused = wg;
    out.alpha = Tensor::full({B, H * K, N, 1}, 1.0);
  } else {
    const Tensor wv = matmul(tile(hv), W);  // [B, HK, M, A]
    const Tensor src = matmul(wg, params_.get("a_src"));  // [B, HK, N, 1]
    const Tensor self = add(src, matmul(wg, params_.get("a_dst")));
    const Tensor dst_v = reshape(matmul(wv, params_.get("a_dst")), {B, H * K, 1, M});
    const Tensor cross = add(src, dst_v);  // [B, HK, N, M]
    std::vector<double> mask(N * (1 + M));
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = candidates[i] ? 0.0 : kMasked;
    const Tensor scores =
        add(leaky_relu(concat({self, cross}, 3), config_.leaky_slope), Tensor::from({N, 1 + M}, std::move(mask)));
    const Tensor alpha = softmax(scores, 3);
    fused = add(mul(slice(alpha, 3, 0, 1), wg), matmul(slice(alpha, 3, 1, 1 + M), wv));
    out.alpha = alpha;
  }
  if (H > 1) fused = mean(reshape(fused, {B, H, K, N, config_.attention_dim}), 1);
  out.fused = fused;
  return out;
}

Tensor mgat_fuse(const Mgat& mgat, const Tensor& gct_features, const Tensor& vehicle_features,
                 const std::vector<std::uint8_t>& candidates, std::size_t n) {
  auto batch = [](const Tensor& t) {
    if (!t.defined()) return t;
    Shape s{1};
    s.insert(s.end(), t.shape().begin(), t.shape().end());
    return num::reshape(t, s);
  };
  const std::size_t N = gct_features.dim(1);
  if (n >= N) fail(ErrorKind::invalid_argument, "mgat_fuse: node index out of range");
  const Tensor fused = mgat.forward(batch(gct_features), batch(vehicle_features), candidates).fused;
  const std::size_t K = fused.dim(1), A = fused.dim(3);
  return num::reshape(num::slice(fused, 2, n, n + 1), {K, A});
}

// ---------------------------------------------------------------------------

PredictionBatch split_prediction(const Tensor& combined, const std::vector<std::size_t>& camera_nodes) {
  if (combined.rank() != 3) fail(ErrorKind::invalid_argument, "prediction must be [B, N, T]");
  const std::size_t N = combined.dim(1);
  check_camera_nodes(camera_nodes, N);
  PredictionBatch p;
  p.combined = combined;
  p.camera_nodes = camera_nodes;
  std::vector<std::uint8_t> is_cam(N, 0);
  for (auto c : camera_nodes) is_cam[c] = 1;
  for (std::size_t n = 0; n < N; ++n) {
    if (!is_cam[n]) p.other_nodes.push_back(n);
  }
  p.with_cameras = num::index_select(combined, 1, camera_nodes);
  p.without_cameras = num::index_select(combined, 1, p.other_nodes);
  return p;
}

double lambda_to_theta(double lambda) {
  if (!(lambda > 0.0)) fail(ErrorKind::config, "lambda_init must be positive");
  return num::inverse_softplus(lambda);
}

LossBreakdown dynamic_loss(const PredictionBatch& pred, const Tensor& y_vehicle, const Tensor& y_gct,
                           const Tensor& theta) {
  if (y_vehicle.shape() != pred.with_cameras.shape()) {
    fail(ErrorKind::invalid_argument, "dynamic_loss: vehicle targets " + num::shape_string(y_vehicle.shape()) +
                                          " vs predictions " + num::shape_string(pred.with_cameras.shape()));
  }
  if (y_gct.shape() != pred.without_cameras.shape()) {
    fail(ErrorKind::invalid_argument, "dynamic_loss: GCT targets " + num::shape_string(y_gct.shape()) +
                                          " vs predictions " + num::shape_string(pred.without_cameras.shape()));
  }
  auto check = [](const Tensor& t, const char* what) {
    const std::size_t nodes = t.dim(1), steps = t.dim(2);
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (std::isnan(t.values()[i])) {
        fail(ErrorKind::data, std::string("dynamic_loss: NaN in ") + what + " target at sample " +
                                  std::to_string(i / (nodes * steps)) + ", node " +
                                  std::to_string(i / steps % nodes) + ", step " + std::to_string(i % steps));
      }
    }
  };
  check(y_vehicle, "vehicle");
  check(y_gct, "GCT");
  LossBreakdown out;
  const Tensor lw = num::mae(pred.with_cameras, y_vehicle);
  const Tensor lwo = num::mae(pred.without_cameras, y_gct);
  out.lambda = num::softplus(theta);
  out.total = num::add(lw, num::mul(out.lambda, lwo));
  out.loss_with = lw.item();
  out.loss_without = lwo.item();
  out.lambda_value = out.lambda.item();
  out.total_value = out.total.item();
  return out;
}

// ---------------------------------------------------------------------------

FusionData::FusionData(const stgnn::StgnnModel& gct_extractor, const stgnn::StgnnModel& vehicle_extractor,
                       const stgnn::WindowSet& gct_windows, const stgnn::WindowSet& vehicle_windows)
    : size_(gct_windows.size()), gct_windows_(&gct_windows), veh_windows_(&vehicle_windows) {
  if (gct_windows.starts() != vehicle_windows.starts()) {
    fail(ErrorKind::data, "GCT and vehicle windows do not share their start rows");
  }
  lineage_ = gct_windows.lineage();
  lineage_.insert(vehicle_windows.lineage().begin(), vehicle_windows.lineage().end());
  constexpr std::size_t chunk = 256;
  for (std::size_t b = 0; b < size_; b += chunk) {
    const auto idx = stgnn::iota_indices(b, std::min(size_, b + chunk));
    const Tensor g = gct_extractor.extract_features(gct_windows.inputs(idx));
    const Tensor v = vehicle_extractor.extract_features(vehicle_windows.inputs(idx));
    gct_shape_ = Shape(g.shape().begin() + 1, g.shape().end());
    veh_shape_ = Shape(v.shape().begin() + 1, v.shape().end());
    gct_feat_.insert(gct_feat_.end(), g.values().begin(), g.values().end());
    veh_feat_.insert(veh_feat_.end(), v.values().begin(), v.values().end());
  }
  if (!gct_shape_.empty() && (gct_shape_[0] != veh_shape_[0] || gct_shape_[2] != veh_shape_[2])) {
    fail(ErrorKind::config, "extractor feature maps differ: GCT " + num::shape_string(gct_shape_) + ", vehicle " +
                                num::shape_string(veh_shape_));
  }
}

Tensor FusionData::gct_features(const std::vector<std::size_t>& idx) const { return gather(gct_feat_, gct_shape_, idx); }
Tensor FusionData::vehicle_features(const std::vector<std::size_t>& idx) const {
  return gather(veh_feat_, veh_shape_, idx);
}
Tensor FusionData::gct_targets(const std::vector<std::size_t>& idx) const { return gct_windows_->targets(idx); }
Tensor FusionData::vehicle_targets(const std::vector<std::size_t>& idx) const { return veh_windows_->targets(idx); }

// ---------------------------------------------------------------------------

Stage2Model::Stage2Model(const stgnn::StgnnConfig& base, const MgatConfig& mgat, const graph::GraphSpec& graph,
                         std::vector<std::size_t> camera_nodes, double lambda_init, std::uint64_t seed)
    : camera_nodes_(std::move(camera_nodes)) {
  check_camera_nodes(camera_nodes_, graph.size());
  num::Rng rng(seed);
  MgatConfig mc = mgat;
  mc.channels = base.channels;
  mc.feature_dim = base.feature_width();
  mgat_ = Mgat(mc, rng.split(1).next_u64());
  auto proj_rng = rng.split(2);
  projection_ = num::glorot_init({mc.attention_dim, base.in_steps}, proj_rng);
  stgnn::StgnnConfig c3 = base;
  c3.n_nodes = graph.size();
  c3.in_channels = base.channels;
  stgnn3_ = stgnn::StgnnModel(c3, graph, rng.split(3).next_u64());
  theta_ = Tensor::scalar(lambda_to_theta(lambda_init));
  candidates_ = candidate_table(graph, camera_nodes_);
  collect_params();
}

void Stage2Model::collect_params() {
  params_ = num::ParameterSet();
  for (auto& [name, t] : mgat_.params().items()) params_.add("mgat." + name, t);
  params_.add("projection", projection_);
  for (auto& [name, t] : stgnn3_.params().items()) params_.add("stgnn3." + name, t);
  params_.add("lambda.theta", theta_);
}

double Stage2Model::lambda() const { return num::softplus_value(theta_.item()); }

Mgat::Output Stage2Model::attention(const Tensor& hg, const Tensor& hv) const {
  return mgat_.forward(hg, hv, candidates_);
}

Tensor Stage2Model::forward(const Tensor& hg, const Tensor& hv) const {
  const Tensor fused = mgat_.forward(hg, hv, candidates_).fused;
  return stgnn3_.predict(num::matmul(fused, projection_));
}

namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

num::Checkpoint Stage2Model::to_checkpoint(const std::string& extra_metadata) const {
  num::Checkpoint ckpt;
  auto meta = KeyValueConfig::parse(extra_metadata);
  const auto& mc = mgat_.config();
  meta.set("kind", "stage2");
  meta.set("mgat.channels", std::to_string(mc.channels));
  meta.set("mgat.feature_dim", std::to_string(mc.feature_dim));
  meta.set("mgat.attention_dim", std::to_string(mc.attention_dim));
  meta.set("mgat.heads", std::to_string(mc.heads));
  char slope[32];
  std::snprintf(slope, sizeof slope, "%.17g", mc.leaky_slope);
  meta.set("mgat.leaky_slope", slope);
  meta.set("camera_nodes", join_sizes(camera_nodes_));
  std::string cand;
  for (auto c : candidates_) cand += c ? '1' : '0';
  meta.set("candidates", cand);
  ckpt.metadata = meta.serialize();
  for (const auto& [name, t] : mgat_.params().items()) ckpt.tensors.emplace_back("mgat." + name, t.clone());
  ckpt.tensors.emplace_back("projection", projection_.clone());
  ckpt.tensors.emplace_back("lambda.theta", theta_.clone());
  stgnn3_.append_to(ckpt, "stgnn3.");
  return ckpt;
}

Stage2Model Stage2Model::from_checkpoint(const num::Checkpoint& ckpt) {
  const auto meta = KeyValueConfig::parse(ckpt.metadata);
  if (meta.get_string("kind", "") != "stage2") fail(ErrorKind::data, "checkpoint is not a stage-2 model");
  Stage2Model m;
  MgatConfig mc;
  mc.channels = meta.get_size("mgat.channels", 0);
  mc.feature_dim = meta.get_size("mgat.feature_dim", 0);
  mc.attention_dim = meta.get_size("mgat.attention_dim", 0);
  mc.heads = meta.get_size("mgat.heads", 1);
  mc.leaky_slope = meta.get_double("mgat.leaky_slope", 0.2);
  m.mgat_ = Mgat(mc, 0);
  for (auto& [name, t] : m.mgat_.params().items()) {
    const auto& src = ckpt.tensor("mgat." + name);
    if (src.shape() != t.shape()) fail(ErrorKind::data, "checkpoint tensor mgat." + name + " has the wrong shape");
    std::copy(src.values().begin(), src.values().end(), t.mutable_values().begin());
  }
  m.projection_ = ckpt.tensor("projection").clone();
  m.theta_ = ckpt.tensor("lambda.theta").clone();
  m.stgnn3_ = stgnn::StgnnModel::from_checkpoint(ckpt, "stgnn3.");
  for (const auto& s : split(meta.get_string("camera_nodes", ""), ',')) {
    if (!s.empty()) m.camera_nodes_.push_back(std::stoul(s));
  }
  for (char c : meta.get_string("candidates", "")) m.candidates_.push_back(c == '1' ? 1 : 0);
  if (m.candidates_.size() != m.stgnn3_.config().n_nodes * (1 + m.camera_nodes_.size())) {
    fail(ErrorKind::data, "stage-2 checkpoint candidate table has the wrong size");
  }
  m.collect_params();
  return m;
}

double stage2_camera_mae(const Stage2Model& model, const FusionData& data, std::size_t batch_size) {
  if (data.size() == 0) fail(ErrorKind::data, "stage2_camera_mae: empty data");
  num::NoTapeScope off;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const auto idx = stgnn::iota_indices(b, std::min(data.size(), b + batch_size));
    const Tensor pred = model.forward(data.gct_features(idx), data.vehicle_features(idx));
    const Tensor cams = num::index_select(pred, 1, model.camera_nodes());
    const Tensor truth = data.vehicle_targets(idx);
    for (std::size_t i = 0; i < cams.size(); ++i) total += std::fabs(cams.values()[i] - truth.values()[i]);
    count += cams.size();
  }
  return total / static_cast<double>(count);
}

Stage2Result train_stage2(const stgnn::StgnnModel& gct_extractor, const stgnn::StgnnModel& vehicle_extractor,
                          const graph::GraphSpec& graph, const std::vector<std::size_t>& camera_nodes,
                          const FusionData& train, const FusionData& val, const stgnn::StgnnConfig& base,
                          const Stage2Options& options, double vehicle_mean, double vehicle_std, std::uint64_t seed) {
  if (!gct_extractor.frozen() || !vehicle_extractor.frozen()) {
    fail(ErrorKind::state, "stage 2 needs frozen stage-1 extractors");
  }
  if (train.size() == 0 || val.size() == 0) fail(ErrorKind::data, "stage-2 training needs train and val windows");
  if (gct_extractor.config().channels != vehicle_extractor.config().channels ||
      gct_extractor.config().feature_width() != vehicle_extractor.config().feature_width()) {
    fail(ErrorKind::config, "stage-1 extractors disagree on K or D");
  }
  num::Rng rng(seed);
  Stage2Result result;
  result.gct_checksum_before = gct_extractor.params().checksum();
  result.vehicle_checksum_before = vehicle_extractor.params().checksum();
  stgnn::StgnnConfig cfg = base;
  cfg.channels = gct_extractor.config().channels;
  result.model = Stage2Model(cfg, options.mgat, graph, camera_nodes, options.lambda_init, rng.split(1).next_u64());
  auto& model = result.model;
  model.stgnn3().set_output_affine({vehicle_mean}, {vehicle_std});
  auto loss = [&](const std::vector<std::size_t>& batch, std::size_t step) {
    const auto pred = split_prediction(model.forward(train.gct_features(batch), train.vehicle_features(batch)),
                                       model.camera_nodes());
    const auto y_gct = num::index_select(train.gct_targets(batch), 1, pred.other_nodes);
    auto l = dynamic_loss(pred, train.vehicle_targets(batch), y_gct, model.theta());
    result.steps.push_back({step, l.loss_with, l.loss_without, l.lambda_value, l.total_value});
    return l.total;
  };
  auto validate = [&] { return stage2_camera_mae(model, val); };
  result.log = num::fit(model.params(), train.size(), loss, validate, options.train, rng.split(2).next_u64());
  result.gct_checksum_after = gct_extractor.params().checksum();
  result.vehicle_checksum_after = vehicle_extractor.params().checksum();
  return result;
}

// ---------------------------------------------------------------------------

num::Checkpoint BaselineModel::to_checkpoint(const std::string& extra_metadata) const {
  auto meta = KeyValueConfig::parse(extra_metadata);
  meta.set("kind", "baseline");
  meta.set("camera_nodes", join_sizes(camera_nodes));
  num::Checkpoint ckpt;
  ckpt.metadata = meta.serialize();
  ckpt.tensors.emplace_back("lambda.theta", theta.clone());
  stgnn.append_to(ckpt, "stgnn.");
  return ckpt;
}

BaselineModel BaselineModel::from_checkpoint(const num::Checkpoint& ckpt) {
  const auto meta = KeyValueConfig::parse(ckpt.metadata);
  if (meta.get_string("kind", "") != "baseline") fail(ErrorKind::data, "checkpoint is not a baseline model");
  BaselineModel m;
  m.stgnn = stgnn::StgnnModel::from_checkpoint(ckpt, "stgnn.");
  m.theta = ckpt.tensor("lambda.theta").clone();
  for (const auto& s : split(meta.get_string("camera_nodes", ""), ',')) {
    if (!s.empty()) m.camera_nodes.push_back(std::stoul(s));
  }
  return m;
}

double baseline_camera_mae(const BaselineModel& model, const stgnn::WindowSet& gct, const stgnn::WindowSet& veh,
                           std::size_t batch_size) {
  if (gct.size() == 0) fail(ErrorKind::data, "baseline_camera_mae: empty data");
  num::NoTapeScope off;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < gct.size(); b += batch_size) {
    const auto idx = stgnn::iota_indices(b, std::min(gct.size(), b + batch_size));
    const Tensor cams = num::index_select(model.stgnn.predict(gct.inputs(idx)), 1, model.camera_nodes);
    const Tensor truth = veh.targets(idx);
    for (std::size_t i = 0; i < cams.size(); ++i) total += std::fabs(cams.values()[i] - truth.values()[i]);
    count += cams.size();
  }
  return total / static_cast<double>(count);
}

BaselineResult train_baseline(const stgnn::WindowSet& gct_train, const stgnn::WindowSet& veh_train,
                              const stgnn::WindowSet& gct_val, const stgnn::WindowSet& veh_val,
                              const graph::GraphSpec& graph, const std::vector<std::size_t>& camera_nodes,
                              const stgnn::StgnnConfig& base, double lambda_init, const num::TrainOptions& options,
                              double vehicle_mean, double vehicle_std, std::uint64_t seed) {
  if (gct_train.starts() != veh_train.starts() || gct_val.starts() != veh_val.starts()) {
    fail(ErrorKind::data, "baseline: GCT and vehicle windows do not share their start rows");
  }
  if (gct_train.size() == 0 || gct_val.size() == 0) fail(ErrorKind::data, "baseline needs train and val windows");
  check_camera_nodes(camera_nodes, graph.size());
  num::Rng rng(seed);
  stgnn::StgnnConfig cfg = base;
  cfg.n_nodes = graph.size();
  cfg.in_channels = 1;
  BaselineResult result;
  auto& model = result.model;
  model.stgnn = stgnn::StgnnModel(cfg, graph, rng.split(1).next_u64());
  model.stgnn.set_output_affine({vehicle_mean}, {vehicle_std});
  model.theta = Tensor::scalar(lambda_to_theta(lambda_init));
  model.camera_nodes = camera_nodes;
  num::ParameterSet params;
  for (auto& [name, t] : model.stgnn.params().items()) params.add("stgnn." + name, t);
  params.add("lambda.theta", model.theta);
  auto loss = [&](const std::vector<std::size_t>& batch, std::size_t step) {
    const auto pred = split_prediction(model.stgnn.predict(gct_train.inputs(batch)), camera_nodes);
    const auto y_gct = num::index_select(gct_train.targets(batch), 1, pred.other_nodes);
    auto l = dynamic_loss(pred, veh_train.targets(batch), y_gct, model.theta);
    result.steps.push_back({step, l.loss_with, l.loss_without, l.lambda_value, l.total_value});
    return l.total;
  };
  auto validate = [&] { return baseline_camera_mae(model, gct_val, veh_val); };
  result.log = num::fit(params, gct_train.size(), loss, validate, options, rng.split(2).next_u64());
  return result;
}

}  // namespace tel2veh::fusion
