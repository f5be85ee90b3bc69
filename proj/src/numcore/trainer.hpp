#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "numcore/params.hpp"
#include "numcore/tensor.hpp"

namespace tel2veh::num {

struct TrainOptions {
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::size_t patience = 10;  // epochs without validation gain; 0 disables
  AdamOptions adam;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over batches
  double val_score = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  std::size_t steps = 0;
};

// Computes the scalar loss for the given training-example indices. Called
// with a tape already active.
using BatchLoss = std::function<Tensor(const std::vector<std::size_t>& batch, std::size_t step)>;
// Lower is better. Called with no tape active.
using Validator = std::function<double()>;

// Shuffled mini-batch Adam with early stopping on the validator. Parameters
// end at the best-validation snapshot. A non-finite loss throws with the
// step index.
TrainResult fit(ParameterSet& params, std::size_t n_examples, const BatchLoss& loss, const Validator& validate,
                const TrainOptions& options, std::uint64_t seed);

}  // namespace tel2veh::num
