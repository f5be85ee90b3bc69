#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "common/config.hpp"
#include "flowdata/flowdata.hpp"
#include "graphspec/graphspec.hpp"
#include "numcore/params.hpp"
#include "numcore/tensor.hpp"
#include "numcore/trainer.hpp"

namespace tel2veh::stgnn {

struct StgnnConfig {
  std::size_t n_nodes = 0;
  std::size_t in_channels = 1;
  std::size_t in_steps = 12;
  std::size_t out_steps = 12;
  std::size_t channels = 16;  // K
  std::size_t layers = 4;     // L
  std::size_t kernel_size = 2;
  std::vector<std::size_t> dilations = {1, 2, 2, 4};
  bool use_adaptive_adjacency = true;
  std::size_t embedding_dim = 10;
  std::size_t head_hidden = 64;

  std::size_t receptive_field() const;
  // D: temporal width left after the conv stack.
  std::size_t feature_width() const;
  void validate() const;

  // Reads the shared model keys (channels, layers, kernel_size, dilations,
  // adaptive_adjacency, embedding_dim, head_hidden, input_steps,
  // output_steps); n_nodes and in_channels come from the caller.
  static StgnnConfig from_config(const KeyValueConfig& kv);
  std::string serialize() const;
  static StgnnConfig parse(const std::string& text);
};

// Graph-WaveNet-style network. Tensors are [batch, channels, nodes, time].
class StgnnModel {
 public:
  StgnnModel() = default;
  StgnnModel(StgnnConfig config, const graph::GraphSpec& graph, std::uint64_t seed);

  const StgnnConfig& config() const { return config_; }
  const std::vector<std::string>& node_ids() const { return node_ids_; }
  num::ParameterSet& params() { return params_; }
  const num::ParameterSet& params() const { return params_; }

  // Per-node (length N) or global (length 1) affine mapping network output
  // onto flow units.
  void set_output_affine(const std::vector<double>& mean, const std::vector<double>& std);
  const num::Tensor& output_mean() const { return out_mean_; }
  const num::Tensor& output_std() const { return out_std_; }

  bool frozen() const { return frozen_; }
  void freeze();

  struct Output {
    num::Tensor prediction;  // [B, N, T_out], flow units
    num::Tensor features;    // [B, K, N, D], pre-head skip sum
  };
  // x: [B, in_channels, N, T_in]. A frozen model refuses to run under an
  // active tape.
  Output forward(const num::Tensor& x) const;
  num::Tensor predict(const num::Tensor& x) const { return forward(x).prediction; }

  // Frozen models only; never records.
  num::Tensor extract_features(const num::Tensor& x) const;

  // softmax(relu(E1 E2), rows); undefined when disabled.
  num::Tensor adaptive_adjacency() const;
  const num::Tensor& support() const { return support_; }

  num::Checkpoint to_checkpoint(const std::string& extra_metadata = "") const;
  static StgnnModel from_checkpoint(const num::Checkpoint& ckpt, const std::string& prefix = "");
  // Adds this model's tensors to `ckpt` under `prefix`.
  void append_to(num::Checkpoint& ckpt, const std::string& prefix) const;

 private:
  StgnnConfig config_;
  std::vector<std::string> node_ids_;
  num::ParameterSet params_;
  num::Tensor support_;  // row-normalized G, [N, N]
  num::Tensor out_mean_, out_std_;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Windowed training data

// Fixed windows cut from one flow matrix: normalized inputs and raw targets.
// `lineage` names every flow source the windows were built from; the
// harness checks it before training.
class WindowSet {
 public:
  WindowSet() = default;
  WindowSet(const flow::FlowMatrix& flows, const flow::Normalizer& norm, std::vector<std::size_t> starts,
            std::size_t input_steps, std::size_t output_steps, std::set<std::string> lineage);

  std::size_t size() const { return starts_.size(); }
  std::size_t nodes() const { return nodes_; }
  std::size_t input_steps() const { return t_in_; }
  std::size_t output_steps() const { return t_out_; }
  const std::vector<std::size_t>& starts() const { return starts_; }
  const std::set<std::string>& lineage() const { return lineage_; }
  const flow::Normalizer& normalizer() const { return norm_; }

  // [B, 1, N, T_in] z-scores.
  num::Tensor inputs(const std::vector<std::size_t>& idx) const;
  // [B, N, T_out] raw counts.
  num::Tensor targets(const std::vector<std::size_t>& idx) const;
  // Raw target of one node at one output step for window i.
  double target(std::size_t i, std::size_t node, std::size_t step) const;

 private:
  std::size_t nodes_ = 0, t_in_ = 0, t_out_ = 0;
  std::vector<std::size_t> starts_;
  std::vector<double> norm_values_;
  std::vector<double> raw_values_;
  flow::Normalizer norm_;
  std::set<std::string> lineage_;
};

// Window starts inside `rows` (day-masked) whose input and target cells are
// gap-free in every listed matrix.
std::vector<std::size_t> clean_window_starts(const std::vector<const flow::FlowMatrix*>& flows, flow::RowRange rows,
                                             std::size_t input_steps, std::size_t output_steps);

std::vector<std::size_t> iota_indices(std::size_t begin, std::size_t end);

// ---------------------------------------------------------------------------
// Stage 1

struct Stage1Result {
  StgnnModel model;  // frozen, best validation epoch
  num::TrainResult log;
};

// Trains on MAE between denormalized forecasts and raw targets; the output
// affine is the training normalizer.
Stage1Result train_stage1(const WindowSet& train, const WindowSet& val, const graph::GraphSpec& graph,
                          StgnnConfig config, const num::TrainOptions& options, std::uint64_t seed);

// Mean absolute error of model forecasts over a window set.
double evaluate_mae(const StgnnModel& model, const WindowSet& windows, std::size_t batch_size = 256);

// "Repeat the last observed value" forecast MAE, as a reference floor.
double persistence_mae(const WindowSet& windows);

}  // namespace tel2veh::stgnn
