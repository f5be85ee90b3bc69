#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fusion/fusion.hpp"
#include "graphspec/graphspec.hpp"
#include "numcore/ops.hpp"
#include "numcore/rng.hpp"
#include "numcore/tensor.hpp"

namespace t2v_test {

using tel2veh::num::Tensor;

struct GradResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[index]"
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps
// near-zero gradients from turning rounding noise into huge ratios.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

// Central differences of `loss` against every element of `params`, compared
// with one reverse pass.
inline GradResult check_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                                  const std::function<Tensor()>& loss, double h = 1e-6) {
  using namespace tel2veh::num;
  for (auto& [name, p] : params) {
    Tensor t = p;
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tape tape;
  {
    TapeScope scope(tape);
    const Tensor l = loss();
    tape.backward(l);
  }
  GradResult out;
  NoTapeScope off;
  for (auto& [name, p] : params) {
    Tensor t = p;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto values = t.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double e = rel_error(analytic[i], numeric);
      ++out.checked;
      if (e > out.max_rel_error) {
        out.max_rel_error = e;
        out.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return out;
}

// Values in +-[0.2, 1.2] so kinks at zero stay out of reach of h.
inline Tensor away_from_zero(const tel2veh::num::Shape& shape, tel2veh::num::Rng& rng) {
  std::vector<double> v(tel2veh::num::shape_size(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.2);
  return Tensor::from(shape, std::move(v));
}

// sum(out * R) with a fixed random R, so every output element matters.
inline Tensor weighted_sum(const Tensor& out, std::uint64_t seed = 99) {
  tel2veh::num::Rng rng(seed);
  std::vector<double> w(out.size());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return tel2veh::num::sum_all(tel2veh::num::mul(out, Tensor::from(out.shape(), std::move(w))));
}

struct PrimitiveCase {
  std::string name;
  std::vector<std::pair<std::string, Tensor>> inputs;
  std::function<Tensor()> loss;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  using namespace tel2veh::num;
  Rng rng(2024);
  std::vector<PrimitiveCase> cases;
  auto unary = [&](const std::string& name, std::function<Tensor(const Tensor&)> f) {
    Tensor a = away_from_zero({2, 3, 4}, rng);
    cases.push_back({name, {{"a", a}}, [a, f] { return weighted_sum(f(a)); }});
  };
  auto binary = [&](const std::string& name, Shape sa, Shape sb, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    Tensor a = away_from_zero(sa, rng), b = away_from_zero(sb, rng);
    cases.push_back({name, {{"a", a}, {"b", b}}, [a, b, f] { return weighted_sum(f(a, b)); }});
  };
  binary("add", {2, 3, 4}, {2, 3, 4}, add);
  binary("add/broadcast", {2, 3, 4}, {3, 1}, add);
  binary("sub/broadcast", {1, 4}, {2, 3, 4}, sub);
  binary("mul", {2, 3, 4}, {2, 3, 4}, mul);
  binary("mul/broadcast", {2, 3, 4}, {1, 1, 4}, mul);
  unary("scale", [](const Tensor& a) { return scale(a, -1.7); });
  binary("matmul", {3, 4}, {4, 2}, matmul);
  binary("matmul/batched", {2, 3, 3, 4}, {4, 5}, matmul);
  binary("matmul/broadcast", {2, 1, 3, 4}, {3, 4, 2}, matmul);
  unary("sigmoid", [](const Tensor& a) { return sigmoid(a); });
  unary("tanh", [](const Tensor& a) { return tanh(a); });
  unary("relu", [](const Tensor& a) { return relu(a); });
  unary("leaky_relu", [](const Tensor& a) { return leaky_relu(a, 0.2); });
  unary("softplus", [](const Tensor& a) { return softplus(a); });
  unary("abs", [](const Tensor& a) { return abs(a); });
  unary("softmax/axis0", [](const Tensor& a) { return softmax(a, 0); });
  unary("softmax/axis2", [](const Tensor& a) { return softmax(a, 2); });
  unary("slice", [](const Tensor& a) { return slice(a, 2, 1, 3); });
  unary("index_select", [](const Tensor& a) { return index_select(a, 1, {2, 0, 2}); });
  unary("reshape", [](const Tensor& a) { return reshape(a, {6, 4}); });
  unary("permute", [](const Tensor& a) { return permute(a, {2, 0, 1}); });
  unary("sum", [](const Tensor& a) { return sum(a, 1); });
  unary("sum/keepdim", [](const Tensor& a) { return sum(a, 2, true); });
  unary("mean", [](const Tensor& a) { return mean(a, 0); });
  unary("sum_all", [](const Tensor& a) { return mul(sum_all(a), sum_all(a)); });
  unary("mean_all", [](const Tensor& a) { return mul(mean_all(a), mean_all(a)); });
  binary("concat", {2, 3, 4}, {2, 1, 4}, [](const Tensor& a, const Tensor& b) { return concat({a, b, a}, 1); });
  {
    Tensor pred = away_from_zero({2, 3, 4}, rng), target = away_from_zero({2, 3, 4}, rng);
    // Keep pred - target away from zero too.
    auto tv = target.mutable_values();
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] = pred.values()[i] + (i % 2 ? 0.5 : -0.5);
    cases.push_back({"mae", {{"pred", pred}}, [pred, target] { return mae(pred, target); }});
  }
  for (std::size_t dilation : {1, 2}) {
    Tensor x = away_from_zero({2, 3, 2, 7}, rng);
    Tensor w = away_from_zero({4, 3, 2}, rng);
    Tensor b = away_from_zero({4}, rng);
    cases.push_back({"conv1d/d" + std::to_string(dilation),
                     {{"x", x}, {"w", w}, {"b", b}},
                     [x, w, b, dilation] { return weighted_sum(dilated_causal_conv1d(x, w, b, dilation)); }});
  }
  {
    Tensor x = away_from_zero({1, 2, 3, 6}, rng);
    Tensor w = away_from_zero({2, 2, 3}, rng);
    cases.push_back({"conv1d/k3-nobias",
                     {{"x", x}, {"w", w}},
                     [x, w] { return weighted_sum(dilated_causal_conv1d(x, w, Tensor(), 2)); }});
  }
  return cases;
}

// Small Stage-2 graph: N=4, M=2, K=2, L=2, full dynamic loss.
struct Stage2Case {
  tel2veh::fusion::Stage2Model model;
  Tensor hg, hv, y_vehicle, y_gct;

  Tensor loss() const {
    using namespace tel2veh;
    const auto pred = fusion::split_prediction(model.forward(hg, hv), model.camera_nodes());
    return fusion::dynamic_loss(pred, y_vehicle, y_gct, model.theta()).total;
  }
};

inline tel2veh::graph::GraphSpec ring_graph(std::size_t n) {
  std::vector<std::string> ids;
  std::vector<double> w(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back(std::to_string(i + 1));
    w[i * n + (i + 1) % n] = w[((i + 1) % n) * n + i] = 0.6;
  }
  return tel2veh::graph::GraphSpec(ids, w, true);
}

inline Stage2Case stage2_case(std::uint64_t seed = 5) {
  using namespace tel2veh;
  stgnn::StgnnConfig base;
  base.n_nodes = 4;
  base.in_steps = 6;
  base.out_steps = 3;
  base.channels = 2;
  base.layers = 2;
  base.kernel_size = 2;
  base.dilations = {1, 2};
  base.embedding_dim = 2;
  base.head_hidden = 5;
  fusion::MgatConfig mc;
  mc.attention_dim = 3;
  Stage2Case c;
  c.model = fusion::Stage2Model(base, mc, ring_graph(4), {0, 2}, 0.3, seed);
  num::Rng rng(seed + 1);
  const std::size_t B = 2, D = base.feature_width();
  c.hg = away_from_zero({B, 2, 4, D}, rng);
  c.hv = away_from_zero({B, 2, 2, D}, rng);
  c.model.stgnn3().set_output_affine({0.5}, {2.0});
  // Targets far from any prediction, so |e| never crosses zero.
  c.y_vehicle = Tensor::full({B, 2, 3}, 40.0);
  c.y_gct = Tensor::full({B, 2, 3}, -40.0);
  return c;
}

}  // namespace t2v_test
