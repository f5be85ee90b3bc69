#include "stgnn/stgnn.hpp"

#include <cmath>
#include <numeric>

#include "common/error.hpp"
#include "numcore/ops.hpp"
#include "numcore/rng.hpp"

namespace tel2veh::stgnn {

using num::Shape;
using num::Tensor;

std::size_t StgnnConfig::receptive_field() const {
  std::size_t rf = 1;
  for (auto d : dilations) rf += (kernel_size - 1) * d;
  return rf;
}

std::size_t StgnnConfig::feature_width() const {
  const auto rf = receptive_field();
  return rf > in_steps ? 0 : in_steps - rf + 1;
}

void StgnnConfig::validate() const {
  if (n_nodes == 0) fail(ErrorKind::config, "stgnn: n_nodes must be positive");
  if (in_channels == 0) fail(ErrorKind::config, "stgnn: in_channels must be positive");
  if (in_steps == 0 || out_steps == 0) fail(ErrorKind::config, "stgnn: input_steps and output_steps must be >= 1");
  if (channels == 0) fail(ErrorKind::config, "stgnn: channels (K) must be >= 1");
  if (layers == 0) fail(ErrorKind::config, "stgnn: layers (L) must be >= 1");
  if (kernel_size < 2) fail(ErrorKind::config, "stgnn: kernel_size must be >= 2");
  if (dilations.size() != layers) {
    fail(ErrorKind::config, "stgnn: dilations lists " + std::to_string(dilations.size()) + " entries for " +
                                std::to_string(layers) + " layers");
  }
  for (auto d : dilations) {
    if (d == 0) fail(ErrorKind::config, "stgnn: dilation 0");
  }
  if (receptive_field() > in_steps) {
    fail(ErrorKind::config, "stgnn: receptive field " + std::to_string(receptive_field()) + " exceeds input_steps " +
                                std::to_string(in_steps));
  }
  if (use_adaptive_adjacency && embedding_dim == 0) fail(ErrorKind::config, "stgnn: embedding_dim must be >= 1");
  if (head_hidden == 0) fail(ErrorKind::config, "stgnn: head_hidden must be >= 1");
}

StgnnConfig StgnnConfig::from_config(const KeyValueConfig& kv) {
  StgnnConfig c;
  c.in_steps = kv.get_size("input_steps", c.in_steps);
  c.out_steps = kv.get_size("output_steps", c.out_steps);
  c.channels = kv.get_size("channels", c.channels);
  c.layers = kv.get_size("layers", c.layers);
  c.kernel_size = kv.get_size("kernel_size", c.kernel_size);
  c.dilations = kv.get_size_list("dilations", c.dilations);
  c.use_adaptive_adjacency = kv.get_bool("adaptive_adjacency", c.use_adaptive_adjacency);
  c.embedding_dim = kv.get_size("embedding_dim", c.embedding_dim);
  c.head_hidden = kv.get_size("head_hidden", c.head_hidden);
  return c;
}

std::string StgnnConfig::serialize() const {
  KeyValueConfig kv;
  kv.set("n_nodes", std::to_string(n_nodes));
  kv.set("in_channels", std::to_string(in_channels));
  kv.set("input_steps", std::to_string(in_steps));
  kv.set("output_steps", std::to_string(out_steps));
  kv.set("channels", std::to_string(channels));
  kv.set("layers", std::to_string(layers));
  kv.set("kernel_size", std::to_string(kernel_size));
  std::string d;
  for (std::size_t i = 0; i < dilations.size(); ++i) d += (i ? "," : "") + std::to_string(dilations[i]);
  kv.set("dilations", d);
  kv.set("adaptive_adjacency", use_adaptive_adjacency ? "true" : "false");
  kv.set("embedding_dim", std::to_string(embedding_dim));
  kv.set("head_hidden", std::to_string(head_hidden));
  return kv.serialize();
}

StgnnConfig StgnnConfig::parse(const std::string& text) {
  const auto kv = KeyValueConfig::parse(text);
  StgnnConfig c = from_config(kv);
  c.n_nodes = kv.get_size("n_nodes", 0);
  c.in_channels = kv.get_size("in_channels", 1);
  return c;
}

// ---------------------------------------------------------------------------

namespace {

std::string layer_key(std::size_t l, const char* name) { return "layer" + std::to_string(l) + "." + name; }

Tensor support_tensor(const graph::GraphSpec& g) {
  const auto norm = graph::row_normalize(g);
  return Tensor::from({g.size(), g.size()}, norm.weights());
}

}  // namespace

StgnnModel::StgnnModel(StgnnConfig config, const graph::GraphSpec& graph, std::uint64_t seed)
    : config_(std::move(config)), node_ids_(graph.node_ids()) {
  config_.validate();
  if (graph.size() != config_.n_nodes) {
    fail(ErrorKind::config, "stgnn: graph has " + std::to_string(graph.size()) + " nodes, config expects " +
                                std::to_string(config_.n_nodes));
  }
  support_ = support_tensor(graph);
  num::Rng rng(seed);
  const std::size_t K = config_.channels, k = config_.kernel_size, N = config_.n_nodes;
  const std::size_t supports = config_.use_adaptive_adjacency ? 3 : 2;
  params_.add("start.w", num::glorot_init({K, config_.in_channels, 1}, rng));
  params_.add("start.b", Tensor::zeros({K}));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    params_.add(layer_key(l, "filter.w"), num::glorot_init({K, K, k}, rng));
    params_.add(layer_key(l, "filter.b"), Tensor::zeros({K}));
    params_.add(layer_key(l, "gate.w"), num::glorot_init({K, K, k}, rng));
    params_.add(layer_key(l, "gate.b"), Tensor::zeros({K}));
    params_.add(layer_key(l, "skip.w"), num::glorot_init({K, K, 1}, rng));
    params_.add(layer_key(l, "skip.b"), Tensor::zeros({K}));
    params_.add(layer_key(l, "gconv.w"), num::glorot_init({K, supports * K, 1}, rng));
    params_.add(layer_key(l, "gconv.b"), Tensor::zeros({K}));
  }
  if (config_.use_adaptive_adjacency) {
    const std::size_t e = config_.embedding_dim;
    std::vector<double> e1(N * e), e2(e * N);
    for (auto& v : e1) v = rng.normal();
    for (auto& v : e2) v = rng.normal();
    params_.add("adp.e1", Tensor::from({N, e}, std::move(e1)));
    params_.add("adp.e2", Tensor::from({e, N}, std::move(e2)));
  }
  const std::size_t D = config_.feature_width();
  params_.add("head.w1", num::glorot_init({K * D, config_.head_hidden}, rng));
  params_.add("head.b1", Tensor::zeros({config_.head_hidden}));
  params_.add("head.w2", num::glorot_init({config_.head_hidden, config_.out_steps}, rng));
  params_.add("head.b2", Tensor::zeros({config_.out_steps}));
  set_output_affine({0.0}, {1.0});
}

void StgnnModel::set_output_affine(const std::vector<double>& mean, const std::vector<double>& std) {
  if (mean.size() != std.size() || (mean.size() != 1 && mean.size() != config_.n_nodes)) {
    fail(ErrorKind::invalid_argument, "output affine must have 1 or N entries");
  }
  for (double s : std) {
    if (!(s > 0.0) || !std::isfinite(s)) fail(ErrorKind::invalid_argument, "output affine scale must be positive");
  }
  out_mean_ = Tensor::from({1, mean.size(), 1}, mean);
  out_std_ = Tensor::from({1, std.size(), 1}, std);
}

void StgnnModel::freeze() {
  params_.set_requires_grad(false);
  frozen_ = true;
}

Tensor StgnnModel::adaptive_adjacency() const {
  if (!config_.use_adaptive_adjacency) return {};
  return num::softmax(num::relu(num::matmul(params_.get("adp.e1"), params_.get("adp.e2"))), 1);
}

StgnnModel::Output StgnnModel::forward(const Tensor& x) const {
  using namespace num;
  if (frozen_ && active_tape()) fail(ErrorKind::state, "frozen STGNN cannot run under gradient recording");
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != config_.in_channels || s[2] != config_.n_nodes || s[3] != config_.in_steps) {
    fail(ErrorKind::invalid_argument, "stgnn forward: input " + shape_string(s) + ", expected [B, " +
                                          std::to_string(config_.in_channels) + ", " +
                                          std::to_string(config_.n_nodes) + ", " + std::to_string(config_.in_steps) +
                                          "]");
  }
  const std::size_t B = s[0], K = config_.channels, N = config_.n_nodes;
  Tensor h = dilated_causal_conv1d(x, params_.get("start.w"), params_.get("start.b"), 1);
  const Tensor adp = adaptive_adjacency();
  Tensor skip;
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::size_t d = config_.dilations[l];
    const Tensor f = tanh(dilated_causal_conv1d(h, params_.get(layer_key(l, "filter.w")),
                                                params_.get(layer_key(l, "filter.b")), d));
    const Tensor g = sigmoid(dilated_causal_conv1d(h, params_.get(layer_key(l, "gate.w")),
                                                   params_.get(layer_key(l, "gate.b")), d));
    const Tensor z = mul(f, g);
    const std::size_t width = z.dim(3);
    const Tensor sk = dilated_causal_conv1d(z, params_.get(layer_key(l, "skip.w")), params_.get(layer_key(l, "skip.b")), 1);
    skip = skip.defined() ? add(sk, slice(skip, 3, skip.dim(3) - width, skip.dim(3))) : sk;
    std::vector<Tensor> parts = {z, matmul(support_, z)};
    if (adp.defined()) parts.push_back(matmul(adp, z));
    const Tensor gc = dilated_causal_conv1d(concat(parts, 1), params_.get(layer_key(l, "gconv.w")),
                                            params_.get(layer_key(l, "gconv.b")), 1);
    h = add(gc, slice(h, 3, h.dim(3) - width, h.dim(3)));
  }
  const std::size_t D = skip.dim(3);
  Tensor r = reshape(permute(relu(skip), {0, 2, 1, 3}), {B, N, K * D});
  r = relu(add(matmul(r, params_.get("head.w1")), params_.get("head.b1")));
  const Tensor y = add(matmul(r, params_.get("head.w2")), params_.get("head.b2"));
  return {add(mul(y, out_std_), out_mean_), skip};
}

Tensor StgnnModel::extract_features(const Tensor& x) const {
  if (!frozen_) fail(ErrorKind::state, "extract_features needs a frozen model");
  num::NoTapeScope off;
  return forward(x).features;
}

void StgnnModel::append_to(num::Checkpoint& ckpt, const std::string& prefix) const {
  auto meta = KeyValueConfig::parse(ckpt.metadata);
  for (const auto& line : split(config_.serialize(), '\n')) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) meta.set(prefix + "config." + line.substr(0, eq), line.substr(eq + 1));
  }
  std::string ids;
  for (std::size_t i = 0; i < node_ids_.size(); ++i) ids += (i ? "," : "") + node_ids_[i];
  meta.set(prefix + "node_ids", ids);
  meta.set(prefix + "frozen", frozen_ ? "true" : "false");
  ckpt.metadata = meta.serialize();
  for (const auto& [name, t] : params_.items()) ckpt.tensors.emplace_back(prefix + name, t.clone());
  ckpt.tensors.emplace_back(prefix + "buffer.support", support_.clone());
  ckpt.tensors.emplace_back(prefix + "buffer.out_mean", out_mean_.clone());
  ckpt.tensors.emplace_back(prefix + "buffer.out_std", out_std_.clone());
}

num::Checkpoint StgnnModel::to_checkpoint(const std::string& extra_metadata) const {
  num::Checkpoint ckpt;
  ckpt.metadata = extra_metadata;
  append_to(ckpt, "");
  return ckpt;
}

StgnnModel StgnnModel::from_checkpoint(const num::Checkpoint& ckpt, const std::string& prefix) {
  const auto meta = KeyValueConfig::parse(ckpt.metadata);
  std::string config_text;
  for (const auto& [key, value] : meta.entries()) {
    if (key.rfind(prefix + "config.", 0) == 0) config_text += key.substr(prefix.size() + 7) + "=" + value + "\n";
  }
  if (config_text.empty()) fail(ErrorKind::data, "checkpoint has no STGNN config under '" + prefix + "'");
  StgnnConfig config = StgnnConfig::parse(config_text);
  auto ids = split(meta.get_string(prefix + "node_ids", ""), ',');
  if (ids.size() != config.n_nodes) fail(ErrorKind::data, "checkpoint node_ids do not match n_nodes");
  // Rebuild the parameter layout, then overwrite every tensor.
  const auto& support = ckpt.tensor(prefix + "buffer.support");
  graph::GraphSpec g(ids, std::vector<double>(support.values().begin(), support.values().end()), false);
  StgnnModel model(config, g, 0);
  model.support_ = support.clone();
  for (auto& [name, t] : model.params_.items()) {
    const auto& src = ckpt.tensor(prefix + name);
    if (src.shape() != t.shape()) {
      fail(ErrorKind::data, "checkpoint tensor '" + prefix + name + "' has shape " + num::shape_string(src.shape()) +
                                ", model expects " + num::shape_string(t.shape()));
    }
    std::copy(src.values().begin(), src.values().end(), t.mutable_values().begin());
  }
  model.out_mean_ = ckpt.tensor(prefix + "buffer.out_mean").clone();
  model.out_std_ = ckpt.tensor(prefix + "buffer.out_std").clone();
  if (meta.get_bool(prefix + "frozen", false)) model.freeze();
  return model;
}

// ---------------------------------------------------------------------------

WindowSet::WindowSet(const flow::FlowMatrix& flows, const flow::Normalizer& norm, std::vector<std::size_t> starts,
                     std::size_t input_steps, std::size_t output_steps, std::set<std::string> lineage)
    : nodes_(flows.nodes()),
      t_in_(input_steps),
      t_out_(output_steps),
      starts_(std::move(starts)),
      norm_values_(norm.apply(flows)),
      raw_values_(flows.values().begin(), flows.values().end()),
      norm_(norm),
      lineage_(std::move(lineage)) {
  for (auto s : starts_) {
    if (s + t_in_ + t_out_ > flows.rows()) fail(ErrorKind::invalid_argument, "window runs past the flow matrix");
  }
}

Tensor WindowSet::inputs(const std::vector<std::size_t>& idx) const {
  std::vector<double> out(idx.size() * nodes_ * t_in_);
  double* p = out.data();
  for (auto i : idx) {
    const std::size_t s = starts_.at(i);
    for (std::size_t n = 0; n < nodes_; ++n) {
      for (std::size_t t = 0; t < t_in_; ++t) *p++ = norm_values_[(s + t) * nodes_ + n];
    }
  }
  return Tensor::from({idx.size(), 1, nodes_, t_in_}, std::move(out));
}

Tensor WindowSet::targets(const std::vector<std::size_t>& idx) const {
  std::vector<double> out(idx.size() * nodes_ * t_out_);
  double* p = out.data();
  for (auto i : idx) {
    const std::size_t s = starts_.at(i) + t_in_;
    for (std::size_t n = 0; n < nodes_; ++n) {
      for (std::size_t t = 0; t < t_out_; ++t) *p++ = raw_values_[(s + t) * nodes_ + n];
    }
  }
  return Tensor::from({idx.size(), nodes_, t_out_}, std::move(out));
}

double WindowSet::target(std::size_t i, std::size_t node, std::size_t step) const {
  return raw_values_[(starts_.at(i) + t_in_ + step) * nodes_ + node];
}

std::vector<std::size_t> clean_window_starts(const std::vector<const flow::FlowMatrix*>& flows, flow::RowRange rows,
                                             std::size_t input_steps, std::size_t output_steps) {
  if (flows.empty()) return {};
  const auto& ref = *flows.front();
  for (const auto* f : flows) {
    if (f->times() != ref.times()) fail(ErrorKind::data, "flow matrices are not on a shared interval grid");
  }
  std::vector<std::size_t> out;
  for (auto start : flow::window_starts(ref, rows, input_steps, output_steps, true)) {
    bool clean = true;
    for (const auto* f : flows) {
      for (std::size_t r = start; clean && r < start + input_steps + output_steps; ++r) {
        for (std::size_t n = 0; n < f->nodes(); ++n) {
          if (f->is_gap(r, n)) {
            clean = false;
            break;
          }
        }
      }
    }
    if (clean) out.push_back(start);
  }
  return out;
}

std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> out(end - begin);
  std::iota(out.begin(), out.end(), begin);
  return out;
}

// ---------------------------------------------------------------------------

double evaluate_mae(const StgnnModel& model, const WindowSet& windows, std::size_t batch_size) {
  if (windows.size() == 0) fail(ErrorKind::data, "evaluate_mae: empty window set");
  num::NoTapeScope off;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < windows.size(); b += batch_size) {
    const auto idx = iota_indices(b, std::min(windows.size(), b + batch_size));
    const Tensor pred = model.predict(windows.inputs(idx));
    const Tensor truth = windows.targets(idx);
    for (std::size_t i = 0; i < pred.size(); ++i) total += std::fabs(pred.values()[i] - truth.values()[i]);
    count += pred.size();
  }
  return total / static_cast<double>(count);
}

double persistence_mae(const WindowSet& windows) {
  if (windows.size() == 0) fail(ErrorKind::data, "persistence_mae: empty window set");
  double total = 0.0;
  std::size_t count = 0;
  const auto& norm = windows.normalizer();
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto in = windows.inputs({i});
    for (std::size_t n = 0; n < windows.nodes(); ++n) {
      const double last = norm.invert(in.values()[n * windows.input_steps() + windows.input_steps() - 1], n);
      for (std::size_t t = 0; t < windows.output_steps(); ++t) {
        total += std::fabs(windows.target(i, n, t) - last);
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

Stage1Result train_stage1(const WindowSet& train, const WindowSet& val, const graph::GraphSpec& graph,
                          StgnnConfig config, const num::TrainOptions& options, std::uint64_t seed) {
  if (train.size() == 0 || val.size() == 0) fail(ErrorKind::data, "stage-1 training needs train and val windows");
  config.n_nodes = train.nodes();
  config.in_channels = 1;
  config.in_steps = train.input_steps();
  config.out_steps = train.output_steps();
  num::Rng rng(seed);
  Stage1Result result{StgnnModel(config, graph, rng.split(1).next_u64()), {}};
  auto& model = result.model;
  model.set_output_affine(train.normalizer().mean, train.normalizer().std);
  auto loss = [&](const std::vector<std::size_t>& batch, std::size_t) {
    return num::mae(model.predict(train.inputs(batch)), train.targets(batch));
  };
  auto validate = [&] { return evaluate_mae(model, val); };
  result.log = num::fit(model.params(), train.size(), loss, validate, options, rng.split(2).next_u64());
  model.freeze();
  return result;
}

}  // namespace tel2veh::stgnn
