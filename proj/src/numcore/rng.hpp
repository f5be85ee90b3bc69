#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "numcore/tensor.hpp"

namespace tel2veh::num {

// Counter-based generator: value i of a stream is mix(key, i), with a
// SplitMix64 finalizer. Streams are platform independent and can be split
// into independent children by hashing a stream id into the key.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();  // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);
  double normal();  // standard normal, Box-Muller
  std::size_t below(std::size_t n);

  Rng split(std::uint64_t stream) const;

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Uniform in +-sqrt(6 / (fan_in + fan_out)). Rank-2 shapes use
// (rows, cols); higher ranks treat axes 2.. as the receptive field of an
// [out, in, ...] kernel.
Tensor glorot_init(const Shape& shape, Rng& rng);
Tensor glorot_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);
double glorot_bound(std::size_t fan_in, std::size_t fan_out);

}  // namespace tel2veh::num
