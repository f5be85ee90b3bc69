#pragma once

#include <vector>

#include "numcore/tensor.hpp"

// Differentiable primitives. Each op computes its forward value eagerly and,
// when a tape is active and an input requires grad, records a backward
// closure. Shape mismatches throw with both shapes in the message.
namespace tel2veh::num {

// Elementwise, numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

// Batched matrix product over the last two axes; leading axes broadcast.
// Both operands must have rank >= 2.
Tensor matmul(const Tensor& a, const Tensor& b);

// Valid (unpadded) dilated causal convolution along the last axis.
//   x: [B, C_in, N, T], w: [C_out, C_in, k], bias: [C_out] or undefined
//   out: [B, C_out, N, T - (k - 1) * dilation]
// Output step t reads x at t, t + d, ..., t + (k - 1) d, so the last tap is
// the most recent input step.
Tensor dilated_causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t dilation);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor softmax(const Tensor& a, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& indices);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// mean |pred - target|
Tensor mae(const Tensor& pred, const Tensor& target);

double softplus_value(double x);
double inverse_softplus(double y);

}  // namespace tel2veh::num
