#include "numcore/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace tel2veh::num {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

Tensor make_tensor(Shape shape, std::vector<double> data) {
  for (auto d : shape) {
    if (d == 0) fail(ErrorKind::invalid_argument, "tensor dims must be >= 1, got " + shape_string(shape));
  }
  if (shape_size(shape) != data.size()) {
    fail(ErrorKind::invalid_argument, "tensor shape " + shape_string(shape) + " does not match " +
                                          std::to_string(data.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(const Shape& shape) { return make_tensor(shape, std::vector<double>(shape_size(shape), 0.0)); }

Tensor Tensor::full(const Shape& shape, double value) {
  return make_tensor(shape, std::vector<double>(shape_size(shape), value));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) { return make_tensor(shape, std::move(values)); }

Tensor Tensor::scalar(double value) { return make_tensor({1}, {value}); }

namespace {
const TensorImpl& checked(const std::shared_ptr<TensorImpl>& impl) {
  if (!impl) fail(ErrorKind::state, "use of undefined tensor");
  return *impl;
}
}  // namespace

const Shape& Tensor::shape() const { return checked(impl_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) fail(ErrorKind::invalid_argument, "axis out of range for shape " + shape_string(s));
  return s[axis];
}

std::size_t Tensor::size() const { return checked(impl_).data.size(); }

std::span<const double> Tensor::values() const { return checked(impl_).data; }

std::span<double> Tensor::mutable_values() {
  checked(impl_);
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::invalid_argument, "item() on tensor of shape " + shape_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) fail(ErrorKind::invalid_argument, "index rank mismatch for " + shape_string(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) fail(ErrorKind::invalid_argument, "index out of range for " + shape_string(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return checked(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  checked(impl_);
  impl_->requires_grad = on;
  if (on) impl_->ensure_grad();
  return *this;
}

std::span<const double> Tensor::grad() const {
  const auto& impl = checked(impl_);
  if (impl.grad.size() != impl.data.size()) {
    impl_->ensure_grad();
  }
  return impl_->grad;
}

void Tensor::zero_grad() {
  checked(impl_);
  impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const { return make_tensor(shape(), checked(impl_).data); }

void Tape::record(Entry entry) {
  if (consumed_) fail(ErrorKind::state, "tape already back-propagated; reset() before recording again");
  entries_.push_back(std::move(entry));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) fail(ErrorKind::state, "backward() called twice on the same tape without reset()");
  if (!loss.defined() || loss.size() != 1) {
    fail(ErrorKind::invalid_argument, "backward() needs a scalar loss");
  }
  if (entries_.empty()) fail(ErrorKind::state, "backward() on an empty tape");
  const auto& root = loss.impl();
  if (!root->requires_grad) fail(ErrorKind::state, "loss does not depend on any tensor requiring grad");
  consumed_ = true;
  for (auto& e : entries_) e.output->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoTapeScope::NoTapeScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { g_active_tape = previous_; }

}  // namespace tel2veh::num
