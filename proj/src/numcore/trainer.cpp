#include "numcore/trainer.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "common/error.hpp"
#include "numcore/rng.hpp"

namespace tel2veh::num {

TrainResult fit(ParameterSet& params, std::size_t n_examples, const BatchLoss& loss, const Validator& validate,
                const TrainOptions& options, std::uint64_t seed) {
  if (n_examples == 0) fail(ErrorKind::data, "training set is empty");
  if (options.batch_size == 0) fail(ErrorKind::config, "batch_size must be positive");
  Adam adam(params.items(), options.adam);
  Rng rng(seed);
  std::vector<std::size_t> order(n_examples);
  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  auto best = params.snapshot();
  std::size_t stale = 0;
  Tape tape;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < n_examples; begin += options.batch_size) {
      const std::size_t end = std::min(n_examples, begin + options.batch_size);
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
      ++result.steps;
      tape.reset();
      adam.zero_grad();
      double value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor l = loss(batch, result.steps);
        value = l.item();
        if (!std::isfinite(value)) {
          fail(ErrorKind::numeric, "training diverged: non-finite loss at step " + std::to_string(result.steps));
        }
        tape.backward(l);
      }
      adam.step();
      total += value;
      ++batches;
    }
    tape.reset();
    double val = 0.0;
    {
      NoTapeScope off;
      val = validate();
    }
    if (!std::isfinite(val)) {
      fail(ErrorKind::numeric, "non-finite validation score after epoch " + std::to_string(epoch));
    }
    result.history.push_back({epoch, total / static_cast<double>(batches), val});
    if (val < result.best_val) {
      result.best_val = val;
      result.best_epoch = epoch;
      best = params.snapshot();
      stale = 0;
    } else if (options.patience > 0 && ++stale >= options.patience) {
      break;
    }
  }
  params.restore(best);
  return result;
}

}  // namespace tel2veh::num
