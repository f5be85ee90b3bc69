#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "numcore/tensor.hpp"

namespace tel2veh::num {

using NamedTensor = std::pair<std::string, Tensor>;

// Ordered, named collection of trainable tensors.
class ParameterSet {
 public:
  Tensor& add(const std::string& name, Tensor tensor);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool has(const std::string& name) const;

  const std::vector<NamedTensor>& items() const { return items_; }
  std::vector<NamedTensor>& items() { return items_; }
  std::size_t scalar_count() const;

  void zero_grad();
  void set_requires_grad(bool on);

  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

  // FNV-1a over names, shapes and raw value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<NamedTensor> items_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
};

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
};

// One bias-corrected Adam update of a single parameter buffer. `step` is the
// 1-based step count after increment. Throws on a non-finite gradient,
// naming the parameter.
void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments, std::size_t step,
               const AdamOptions& options, const std::string& name);

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamOptions options);

  // Applies one update using the gradients currently stored on the params.
  void step();
  void zero_grad();

  std::size_t steps() const { return steps_; }
  const AdamOptions& options() const { return options_; }
  const std::vector<AdamMoments>& moments() const { return moments_; }

 private:
  std::vector<NamedTensor> params_;
  AdamOptions options_;
  std::vector<AdamMoments> moments_;
  std::size_t steps_ = 0;
};

// Binary container of named float64 tensors plus a metadata string.
// Layout (all integers little-endian):
//   8 bytes   magic "T2VCKPT1"
//   u32       format version (1)
//   u64       metadata length, then that many UTF-8 bytes
//   u32       tensor count
//   per tensor:
//     u32     name length, then name bytes
//     u32     rank, then rank x u64 dims
//     f64     values, row-major, IEEE-754 little-endian
struct Checkpoint {
  std::string metadata;
  std::vector<NamedTensor> tensors;

  std::string serialize() const;
  static Checkpoint parse(const std::string& bytes);
  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

  bool has(const std::string& name) const;
  const Tensor& tensor(const std::string& name) const;
};

}  // namespace tel2veh::num
