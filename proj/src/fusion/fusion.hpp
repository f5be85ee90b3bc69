#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "graphspec/graphspec.hpp"
#include "numcore/params.hpp"
#include "numcore/tensor.hpp"
#include "numcore/trainer.hpp"
#include "stgnn/stgnn.hpp"

namespace tel2veh::fusion {

struct MgatConfig {
  std::size_t channels = 16;      // K
  std::size_t feature_dim = 3;    // D
  std::size_t attention_dim = 16;  // A, width of the fused feature
  double leaky_slope = 0.2;
  std::size_t heads = 1;

  void validate() const;
};

// Boolean [N x (1 + M)] candidate table: column 0 is the node itself,
// column 1 + m is vehicle feature m. A vehicle feature is a candidate for
// node n when G links n to the camera's segment; a node with no such link
// falls back to every vehicle feature.
std::vector<std::uint8_t> candidate_table(const graph::GraphSpec& g, const std::vector<std::size_t>& camera_nodes);

// Multi-channel graph attention. Each channel k owns W_k [D x A] and score
// vectors a_k = [a_src; a_dst]; channels never share attention weights.
//   e_k(n, j) = leaky(a_src . W_k h_n + a_dst . W_k h_j),  j in candidates(n)
//   out_k(n)  = sum_j softmax_j(e_k(n, .)) W_k h_j
// With several heads the per-head outputs are averaged.
class Mgat {
 public:
  Mgat() = default;
  Mgat(MgatConfig config, std::uint64_t seed);

  const MgatConfig& config() const { return config_; }
  num::ParameterSet& params() { return params_; }
  const num::ParameterSet& params() const { return params_; }

  struct Output {
    num::Tensor fused;  // [B, K, N, A]
    num::Tensor alpha;  // [B, heads * K, N, 1 + M]
  };
  // hg: [B, K, N, D]; hv: [B, K, M, D], or undefined when M = 0.
  // `candidates` comes from candidate_table (N x (1 + M)).
  Output forward(const num::Tensor& hg, const num::Tensor& hv, const std::vector<std::uint8_t>& candidates) const;

 private:
  MgatConfig config_;
  num::ParameterSet params_;
};

// Fused feature of a single GCT node n for one sample: [K x A].
num::Tensor mgat_fuse(const Mgat& mgat, const num::Tensor& gct_features, const num::Tensor& vehicle_features,
                      const std::vector<std::uint8_t>& candidates, std::size_t n);

// ---------------------------------------------------------------------------

struct PredictionBatch {
  num::Tensor combined;       // [B, N, T_out], node order
  num::Tensor with_cameras;   // [B, M_w, T_out]
  num::Tensor without_cameras;  // [B, N - M_w, T_out]
  std::vector<std::size_t> camera_nodes;
  std::vector<std::size_t> other_nodes;
};

PredictionBatch split_prediction(const num::Tensor& combined, const std::vector<std::size_t>& camera_nodes);

struct LossBreakdown {
  num::Tensor total;  // differentiable
  num::Tensor lambda;
  double loss_with = 0.0;
  double loss_without = 0.0;
  double lambda_value = 0.0;
  double total_value = 0.0;
};

// L = L_w + lambda * L_w/o with lambda = softplus(theta). Targets are raw
// counts; a NaN target throws with its position.
LossBreakdown dynamic_loss(const PredictionBatch& pred, const num::Tensor& y_vehicle, const num::Tensor& y_gct,
                           const num::Tensor& theta);

// theta such that softplus(theta) = lambda.
double lambda_to_theta(double lambda);

struct LossLogEntry {
  std::size_t step = 0;
  double loss_with = 0.0;
  double loss_without = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Stage 2

// Frozen-extractor features for every window, cached once, plus targets.
class FusionData {
 public:
  FusionData() = default;
  // gct_windows and vehicle_windows must share their window starts and must
  // outlive this object (targets are read through them).
  FusionData(const stgnn::StgnnModel& gct_extractor, const stgnn::StgnnModel& vehicle_extractor,
             const stgnn::WindowSet& gct_windows, const stgnn::WindowSet& vehicle_windows);

  std::size_t size() const { return size_; }
  const std::set<std::string>& lineage() const { return lineage_; }

  num::Tensor gct_features(const std::vector<std::size_t>& idx) const;      // [B, K, N, D]
  num::Tensor vehicle_features(const std::vector<std::size_t>& idx) const;  // [B, K, M, D]
  num::Tensor gct_targets(const std::vector<std::size_t>& idx) const;       // [B, N, T_out]
  num::Tensor vehicle_targets(const std::vector<std::size_t>& idx) const;   // [B, M, T_out]

  const stgnn::WindowSet& gct_windows() const { return *gct_windows_; }

 private:
  std::size_t size_ = 0;
  num::Shape gct_shape_, veh_shape_;  // per window
  std::vector<double> gct_feat_, veh_feat_;
  const stgnn::WindowSet* gct_windows_ = nullptr;
  const stgnn::WindowSet* veh_windows_ = nullptr;
  std::set<std::string> lineage_;
};

// MGAT -> projection [A x T_in] -> STGNN3 with K input channels.
class Stage2Model {
 public:
  Stage2Model() = default;
  Stage2Model(const stgnn::StgnnConfig& base, const MgatConfig& mgat, const graph::GraphSpec& graph,
              std::vector<std::size_t> camera_nodes, double lambda_init, std::uint64_t seed);

  num::Tensor forward(const num::Tensor& hg, const num::Tensor& hv) const;  // [B, N, T_out]
  Mgat::Output attention(const num::Tensor& hg, const num::Tensor& hv) const;

  num::ParameterSet& params() { return params_; }
  const num::ParameterSet& params() const { return params_; }
  const num::Tensor& theta() const { return theta_; }
  double lambda() const;
  const std::vector<std::size_t>& camera_nodes() const { return camera_nodes_; }
  const std::vector<std::uint8_t>& candidates() const { return candidates_; }
  stgnn::StgnnModel& stgnn3() { return stgnn3_; }
  const stgnn::StgnnModel& stgnn3() const { return stgnn3_; }
  const Mgat& mgat() const { return mgat_; }

  num::Checkpoint to_checkpoint(const std::string& extra_metadata = "") const;
  static Stage2Model from_checkpoint(const num::Checkpoint& ckpt);

 private:
  void collect_params();

  Mgat mgat_;
  num::Tensor projection_;
  stgnn::StgnnModel stgnn3_;
  num::Tensor theta_;
  std::vector<std::size_t> camera_nodes_;
  std::vector<std::uint8_t> candidates_;
  num::ParameterSet params_;
};

struct Stage2Options {
  MgatConfig mgat;
  double lambda_init = 1e-4;
  num::TrainOptions train;
};

struct Stage2Result {
  Stage2Model model;
  num::TrainResult log;
  std::vector<LossLogEntry> steps;
  std::uint64_t gct_checksum_before = 0, gct_checksum_after = 0;
  std::uint64_t vehicle_checksum_before = 0, vehicle_checksum_after = 0;
};

// Trains MGAT, projection, STGNN3 and theta on the dynamic loss; the
// two extractors stay frozen. Output affine is the global mean/std of the
// retained cameras' training vehicle flows. Selection uses validation L_w.
Stage2Result train_stage2(const stgnn::StgnnModel& gct_extractor, const stgnn::StgnnModel& vehicle_extractor,
                          const graph::GraphSpec& graph, const std::vector<std::size_t>& camera_nodes,
                          const FusionData& train, const FusionData& val, const stgnn::StgnnConfig& base,
                          const Stage2Options& options, double vehicle_mean, double vehicle_std, std::uint64_t seed);

// Validation L_w of a Stage-2 model.
double stage2_camera_mae(const Stage2Model& model, const FusionData& data, std::size_t batch_size = 256);

// ---------------------------------------------------------------------------
// GCT-only arm

struct BaselineModel {
  stgnn::StgnnModel stgnn;
  num::Tensor theta;
  std::vector<std::size_t> camera_nodes;

  num::Checkpoint to_checkpoint(const std::string& extra_metadata = "") const;
  static BaselineModel from_checkpoint(const num::Checkpoint& ckpt);
};

struct BaselineResult {
  BaselineModel model;
  num::TrainResult log;
  std::vector<LossLogEntry> steps;
};

// One STGNN on normalized GCT input, trained with the same dynamic loss.
// `vehicle_windows` supplies the retained cameras' targets and must share
// window starts with `gct_windows`.
BaselineResult train_baseline(const stgnn::WindowSet& gct_train, const stgnn::WindowSet& veh_train,
                              const stgnn::WindowSet& gct_val, const stgnn::WindowSet& veh_val,
                              const graph::GraphSpec& graph, const std::vector<std::size_t>& camera_nodes,
                              const stgnn::StgnnConfig& base, double lambda_init, const num::TrainOptions& options,
                              double vehicle_mean, double vehicle_std, std::uint64_t seed);

double baseline_camera_mae(const BaselineModel& model, const stgnn::WindowSet& gct, const stgnn::WindowSet& veh,
                           std::size_t batch_size = 256);

}  // namespace tel2veh::fusion
