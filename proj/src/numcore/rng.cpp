#include "numcore/rng.hpp"

#include <cmath>
#include <numbers>

#include "common/error.hpp"

namespace tel2veh::num {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : key_(splitmix64(seed ^ 0x7E12E7E1A5EEDULL)) {}

std::uint64_t Rng::next_u64() {
  const std::uint64_t c = counter_++;
  return splitmix64(key_ ^ splitmix64(c));
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::below(std::size_t n) {
  if (n == 0) fail(ErrorKind::invalid_argument, "Rng::below(0)");
  // Rejection keeps the draw unbiased.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return static_cast<std::size_t>(v % n);
}

Rng Rng::split(std::uint64_t stream) const {
  Rng child(0);
  child.key_ = splitmix64(key_ ^ splitmix64(stream ^ 0xA0761D6478BD642FULL));
  return child;
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

Tensor glorot_init(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = glorot_bound(fan_in, fan_out);
  std::vector<double> values(shape_size(shape));
  for (auto& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from(shape, std::move(values));
}

Tensor glorot_init(const Shape& shape, Rng& rng) {
  std::size_t fan_in = 1, fan_out = 1;
  if (shape.size() == 1) {
    fan_in = fan_out = shape[0];
  } else if (shape.size() == 2) {
    fan_in = shape[0];
    fan_out = shape[1];
  } else if (shape.size() > 2) {
    std::size_t receptive = 1;
    for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
    fan_in = shape[1] * receptive;
    fan_out = shape[0] * receptive;
  }
  return glorot_init(shape, fan_in, fan_out, rng);
}

}  // namespace tel2veh::num
