#include "numcore/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "common/error.hpp"

namespace tel2veh::num {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

// Four interleaved partial sums; fixed order, so still deterministic.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = active_tape();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

void record(Tape* tape, const char* op, const Tensor& out, std::function<void()> backward) {
  out.impl()->requires_grad = true;
  tape->record({op, out.impl(), std::move(backward)});
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  fail(ErrorKind::invalid_argument,
       std::string(op) + ": incompatible shapes " + shape_string(a) + " and " + shape_string(b));
}

void check_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    fail(ErrorKind::invalid_argument, std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                                          shape_string(s));
  }
}

// Splits a shape around one axis into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.length = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

// Index maps from output positions back to each broadcast operand.
struct Broadcast {
  Shape shape;
  std::size_t size = 0;
  bool same = false;
  std::shared_ptr<std::vector<std::size_t>> ia, ib;
};

Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// For each flat position of `out`, the flat position in `in` (broadcast
// along size-1 or missing leading axes).
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in.size());
    stride[oi] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t total = shape_size(out);
  std::vector<std::size_t> idx(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    idx[flat] = pos;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      pos += stride[ax];
      if (counter[ax] < out[ax]) break;
      pos -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return idx;
}

Broadcast plan_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast plan;
  if (a == b) {
    plan.shape = a;
    plan.size = shape_size(a);
    plan.same = true;
    return plan;
  }
  plan.shape = broadcast_shapes(op, a, b);
  plan.size = shape_size(plan.shape);
  plan.ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a, plan.shape));
  plan.ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b, plan.shape));
  return plan;
}

template <class Fn>
Tensor unary(const Tensor& a, const char* /*op*/, Fn&& fn) {
  const auto& in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fn(in[i]);
  return make_tensor(a.shape(), std::move(out));
}

// Records dy/dx computed from (x, y) for elementwise unary ops.
template <class Deriv>
void record_unary(Tape* tape, const char* op, const Tensor& a, const Tensor& out, Deriv deriv) {
  ImplPtr ai = a.impl(), oi = out.impl();
  record(tape, op, out, [ai, oi, deriv] {
    if (!ai->requires_grad) return;
    ai->ensure_grad();
    const std::size_t n = oi->data.size();
    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * deriv(ai->data[i], oi->data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const auto plan = plan_broadcast("add", a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(plan.size);
  if (plan.same) {
    for (std::size_t i = 0; i < plan.size; ++i) out[i] = av[i] + bv[i];
  } else {
    const auto& ia = *plan.ia;
    const auto& ib = *plan.ib;
    for (std::size_t i = 0; i < plan.size; ++i) out[i] = av[ia[i]] + bv[ib[i]];
  }
  Tensor result = make_tensor(plan.shape, std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
    record(tape, "add", result, [ai, bi, oi, plan] {
      const auto& g = oi->grad;
      const std::pair<TensorImpl*, const std::vector<std::size_t>*> paths[2] = {
          {ai.get(), plan.ia.get()}, {bi.get(), plan.ib.get()}};
      for (const auto& [x, idx] : paths) {
        if (!x->requires_grad) continue;
        x->ensure_grad();
        if (plan.same) {
          for (std::size_t i = 0; i < plan.size; ++i) x->grad[i] += g[i];
        } else {
          for (std::size_t i = 0; i < plan.size; ++i) x->grad[(*idx)[i]] += g[i];
        }
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto plan = plan_broadcast("mul", a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(plan.size);
  if (plan.same) {
    for (std::size_t i = 0; i < plan.size; ++i) out[i] = av[i] * bv[i];
  } else {
    const auto& ia = *plan.ia;
    const auto& ib = *plan.ib;
    for (std::size_t i = 0; i < plan.size; ++i) out[i] = av[ia[i]] * bv[ib[i]];
  }
  Tensor result = make_tensor(plan.shape, std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
    record(tape, "mul", result, [ai, bi, oi, plan] {
      const auto& g = oi->grad;
      if (ai->requires_grad) {
        ai->ensure_grad();
        if (plan.same) {
          for (std::size_t i = 0; i < plan.size; ++i) ai->grad[i] += g[i] * bi->data[i];
        } else {
          const auto& ia = *plan.ia;
          const auto& ib = *plan.ib;
          for (std::size_t i = 0; i < plan.size; ++i) ai->grad[ia[i]] += g[i] * bi->data[ib[i]];
        }
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        if (plan.same) {
          for (std::size_t i = 0; i < plan.size; ++i) bi->grad[i] += g[i] * ai->data[i];
        } else {
          const auto& ia = *plan.ia;
          const auto& ib = *plan.ib;
          for (std::size_t i = 0; i < plan.size; ++i) bi->grad[ib[i]] += g[i] * ai->data[ia[i]];
        }
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  Tensor result = unary(a, "scale", [factor](double x) { return x * factor; });
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "scale", a, result, [factor](double, double) { return factor; });
  }
  return result;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) shape_error("matmul", as, bs);
  const std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  const std::size_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != k2) shape_error("matmul", as, bs);

  const Shape lead_a(as.begin(), as.end() - 2);
  const Shape lead_b(bs.begin(), bs.end() - 2);
  const Shape lead = broadcast_shapes("matmul", lead_a.empty() ? Shape{1} : lead_a, lead_b.empty() ? Shape{1} : lead_b);
  Shape out_shape = lead;
  if (lead_a.empty() && lead_b.empty()) out_shape.clear();
  out_shape.push_back(m);
  out_shape.push_back(n);

  const std::size_t batches = shape_size(lead);
  auto ia = std::make_shared<std::vector<std::size_t>>(
      lead_a.empty() ? std::vector<std::size_t>(batches, 0) : broadcast_index(lead_a, lead));
  auto ib = std::make_shared<std::vector<std::size_t>>(
      lead_b.empty() ? std::vector<std::size_t>(batches, 0) : broadcast_index(lead_b, lead));

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(batches * m * n, 0.0);
  for (std::size_t bt = 0; bt < batches; ++bt) {
    const double* A = av.data() + (*ia)[bt] * m * k;
    const double* B = bv.data() + (*ib)[bt] * k * n;
    double* C = out.data() + bt * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* Brow = B + p * n;
        double* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Crow[j] += aip * Brow[j];
      }
    }
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
    record(tape, "matmul", result, [ai, bi, oi, ia, ib, batches, m, k, n] {
      if (ai->requires_grad) ai->ensure_grad();
      if (bi->requires_grad) bi->ensure_grad();
      for (std::size_t bt = 0; bt < batches; ++bt) {
        const double* G = oi->grad.data() + bt * m * n;
        const double* A = ai->data.data() + (*ia)[bt] * m * k;
        const double* B = bi->data.data() + (*ib)[bt] * k * n;
        if (ai->requires_grad) {
          double* dA = ai->grad.data() + (*ia)[bt] * m * k;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              dA[i * k + p] += dot(G + i * n, B + p * n, n);
            }
          }
        }
        if (bi->requires_grad) {
          double* dB = bi->grad.data() + (*ib)[bt] * k * n;
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) dB[p * n + j] += aip * G[i * n + j];
            }
          }
        }
      }
    });
  }
  return result;
}

namespace {

// Unfolds one batch item of x [C_in, N, T] into rows (c, j) of N * T_out
// contiguous values so the conv becomes dense row updates.
void im2col(const double* x, double* col, std::size_t Cin, std::size_t N, std::size_t T, std::size_t K,
            std::size_t dilation, std::size_t To) {
  for (std::size_t c = 0; c < Cin; ++c) {
    for (std::size_t j = 0; j < K; ++j) {
      const double* src = x + c * N * T + j * dilation;
      double* dst = col + (c * K + j) * N * To;
      for (std::size_t n = 0; n < N; ++n) std::copy(src + n * T, src + n * T + To, dst + n * To);
    }
  }
}

}  // namespace

Tensor dilated_causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t dilation) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 3 || ws[1] != xs[1]) shape_error("dilated_causal_conv1d", xs, ws);
  if (dilation == 0) fail(ErrorKind::invalid_argument, "dilated_causal_conv1d: dilation must be >= 1");
  const std::size_t B = xs[0], Cin = xs[1], N = xs[2], T = xs[3];
  const std::size_t Cout = ws[0], K = ws[2];
  const std::size_t span = (K - 1) * dilation;
  if (span >= T) {
    fail(ErrorKind::invalid_argument, "dilated_causal_conv1d: receptive span " + std::to_string(span + 1) +
                                          " exceeds input length " + std::to_string(T));
  }
  if (bias.defined() && bias.shape() != Shape{Cout}) shape_error("dilated_causal_conv1d(bias)", bias.shape(), ws);
  const std::size_t To = T - span;
  const std::size_t CK = Cin * K, NT = N * To;

  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<double> out(B * Cout * NT, 0.0);
  std::vector<double> col(CK * NT);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(xv.data() + b * Cin * N * T, col.data(), Cin, N, T, K, dilation, To);
    for (std::size_t o = 0; o < Cout; ++o) {
      double* O = out.data() + (b * Cout + o) * NT;
      if (bias.defined()) std::fill(O, O + NT, bias.values()[o]);
      for (std::size_t r = 0; r < CK; ++r) {
        const double wr = wv[o * CK + r];
        const double* X = col.data() + r * NT;
        for (std::size_t i = 0; i < NT; ++i) O[i] += wr * X[i];
      }
    }
  }
  Tensor result = make_tensor({B, Cout, N, To}, std::move(out));
  if (Tape* tape = recording_tape({&x, &w, &bias})) {
    ImplPtr xi = x.impl(), wi = w.impl(), oi = result.impl();
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    record(tape, "dilated_causal_conv1d", result, [=] {
      const auto& G = oi->grad;
      const bool need_x = xi->requires_grad, need_w = wi->requires_grad, need_b = bi && bi->requires_grad;
      if (need_x) xi->ensure_grad();
      if (need_w) wi->ensure_grad();
      if (need_b) bi->ensure_grad();
      std::vector<double> col(CK * NT), dcol;
      if (need_x) dcol.resize(CK * NT);
      for (std::size_t b = 0; b < B; ++b) {
        const double* Gb = G.data() + b * Cout * NT;
        if (need_b) {
          for (std::size_t o = 0; o < Cout; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < NT; ++i) acc += Gb[o * NT + i];
            bi->grad[o] += acc;
          }
        }
        if (need_w) {
          im2col(xi->data.data() + b * Cin * N * T, col.data(), Cin, N, T, K, dilation, To);
          for (std::size_t o = 0; o < Cout; ++o) {
            const double* Go = Gb + o * NT;
            for (std::size_t r = 0; r < CK; ++r) {
              const double* X = col.data() + r * NT;
              wi->grad[o * CK + r] += dot(Go, X, NT);
            }
          }
        }
        if (need_x) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          for (std::size_t o = 0; o < Cout; ++o) {
            const double* Go = Gb + o * NT;
            for (std::size_t r = 0; r < CK; ++r) {
              const double wr = wi->data[o * CK + r];
              double* D = dcol.data() + r * NT;
              for (std::size_t i = 0; i < NT; ++i) D[i] += wr * Go[i];
            }
          }
          double* dX = xi->grad.data() + b * Cin * N * T;
          for (std::size_t c = 0; c < Cin; ++c) {
            for (std::size_t j = 0; j < K; ++j) {
              const double* src = dcol.data() + (c * K + j) * NT;
              double* dst = dX + c * N * T + j * dilation;
              for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t t = 0; t < To; ++t) dst[n * T + t] += src[n * To + t];
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& a) {
  Tensor result = unary(a, "sigmoid", [](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "sigmoid", a, result, [](double, double y) { return y * (1.0 - y); });
  }
  return result;
}

Tensor tanh(const Tensor& a) {
  Tensor result = unary(a, "tanh", [](double x) { return std::tanh(x); });
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "tanh", a, result, [](double, double y) { return 1.0 - y * y; });
  }
  return result;
}

Tensor relu(const Tensor& a) {
  Tensor result = unary(a, "relu", [](double x) { return x > 0.0 ? x : 0.0; });
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "relu", a, result, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
  }
  return result;
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Tensor result = unary(a, "leaky_relu", [slope](double x) { return x > 0.0 ? x : slope * x; });
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "leaky_relu", a, result, [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
  }
  return result;
}

double softplus_value(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) fail(ErrorKind::invalid_argument, "inverse_softplus needs y > 0");
  if (y > 30.0) return y + std::log(-std::expm1(-y));
  return std::log(std::expm1(y));
}

Tensor softplus(const Tensor& a) {
  Tensor result = unary(a, "softplus", softplus_value);
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "softplus", a, result, [](double x, double) {
      return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
  }
  return result;
}

Tensor abs(const Tensor& a) {
  Tensor result = unary(a, "abs", [](double x) { return std::fabs(x); });
  if (Tape* tape = recording_tape({&a})) {
    record_unary(tape, "abs", a, result, [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
  }
  return result;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  check_axis("softmax", a.shape(), axis);
  const auto sp = split_at(a.shape(), axis);
  const auto& in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.length * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < sp.length; ++l) mx = std::max(mx, in[base + l * sp.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < sp.length; ++l) {
        const double e = std::exp(in[base + l * sp.inner] - mx);
        out[base + l * sp.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < sp.length; ++l) out[base + l * sp.inner] /= total;
    }
  }
  Tensor result = make_tensor(a.shape(), std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "softmax", result, [ai, oi, sp] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const auto& y = oi->data;
      const auto& g = oi->grad;
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = o * sp.length * sp.inner + i;
          double dot = 0.0;
          for (std::size_t l = 0; l < sp.length; ++l) dot += g[base + l * sp.inner] * y[base + l * sp.inner];
          for (std::size_t l = 0; l < sp.length; ++l) {
            const std::size_t p = base + l * sp.inner;
            ai->grad[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) fail(ErrorKind::invalid_argument, "concat: no inputs");
  const Shape& first = parts.front().shape();
  check_axis("concat", first, axis);
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != first.size()) shape_error("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) shape_error("concat", first, s);
    }
    out_shape[axis] += s[axis];
  }
  const auto sp = split_at(out_shape, axis);
  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis];
    const auto& v = p.values();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(v.data() + o * len * sp.inner, len * sp.inner,
                  out.data() + (o * sp.length + offset) * sp.inner);
    }
    offset += len;
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  Tape* tape = active_tape();
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (tape && any) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    ImplPtr oi = result.impl();
    record(tape, "concat", result, [impls, offsets, oi, sp, axis] {
      for (std::size_t k = 0; k < impls.size(); ++k) {
        auto& x = *impls[k];
        if (!x.requires_grad) continue;
        x.ensure_grad();
        const std::size_t len = x.shape[axis];
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* g = oi->grad.data() + (o * sp.length + offsets[k]) * sp.inner;
          double* d = x.grad.data() + o * len * sp.inner;
          for (std::size_t i = 0; i < len * sp.inner; ++i) d[i] += g[i];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", a.shape(), axis);
  if (begin >= end || end > a.shape()[axis]) {
    fail(ErrorKind::invalid_argument, "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                          ") invalid for axis " + std::to_string(axis) + " of " +
                                          shape_string(a.shape()));
  }
  const auto sp = split_at(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  const auto& in = a.values();
  std::vector<double> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(in.data() + (o * sp.length + begin) * sp.inner, len * sp.inner, out.data() + o * len * sp.inner);
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "slice", result, [ai, oi, sp, begin, len] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* g = oi->grad.data() + o * len * sp.inner;
        double* d = ai->grad.data() + (o * sp.length + begin) * sp.inner;
        for (std::size_t i = 0; i < len * sp.inner; ++i) d[i] += g[i];
      }
    });
  }
  return result;
}

Tensor index_select(const Tensor& a, std::size_t axis, const std::vector<std::size_t>& indices) {
  check_axis("index_select", a.shape(), axis);
  if (indices.empty()) fail(ErrorKind::invalid_argument, "index_select: empty index list");
  const auto sp = split_at(a.shape(), axis);
  for (auto i : indices) {
    if (i >= sp.length) {
      fail(ErrorKind::invalid_argument, "index_select: index " + std::to_string(i) + " out of range for " +
                                            shape_string(a.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[axis] = indices.size();
  const std::size_t len = indices.size();
  const auto& in = a.values();
  std::vector<double> out(sp.outer * len * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      std::copy_n(in.data() + (o * sp.length + indices[l]) * sp.inner, sp.inner,
                  out.data() + (o * len + l) * sp.inner);
    }
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "index_select", result, [ai, oi, sp, indices, len] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
          const double* g = oi->grad.data() + (o * len + l) * sp.inner;
          double* d = ai->grad.data() + (o * sp.length + indices[l]) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) d[i] += g[i];
        }
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_size(shape) != a.size()) shape_error("reshape", a.shape(), shape);
  const auto& in = a.values();
  Tensor result = make_tensor(shape, std::vector<double>(in.begin(), in.end()));
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "reshape", result, [ai, oi] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const auto& s = a.shape();
  const std::size_t r = s.size();
  if (axes.size() != r) fail(ErrorKind::invalid_argument, "permute: axes rank mismatch for " + shape_string(s));
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) fail(ErrorKind::invalid_argument, "permute: invalid axis list for " + shape_string(s));
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[axes[i]];
  std::vector<std::size_t> in_stride(r);
  std::size_t st = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = st;
    st *= s[i];
  }
  // src[flat_out] = flat index into input
  auto src = std::make_shared<std::vector<std::size_t>>(a.size());
  std::vector<std::size_t> counter(r, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    (*src)[flat] = pos;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      pos += in_stride[axes[ax]];
      if (counter[ax] < out_shape[ax]) break;
      pos -= in_stride[axes[ax]] * counter[ax];
      counter[ax] = 0;
    }
  }
  const auto& in = a.values();
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[(*src)[i]];
  Tensor result = make_tensor(out_shape, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "permute", result, [ai, oi, src] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t i = 0; i < src->size(); ++i) ai->grad[(*src)[i]] += oi->grad[i];
    });
  }
  return result;
}

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis("sum", a.shape(), axis);
  const auto sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim || out_shape.size() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto& in = a.values();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t l = 0; l < sp.length; ++l) {
      const double* x = in.data() + (o * sp.length + l) * sp.inner;
      double* y = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) y[i] += x[i];
    }
  }
  Tensor result = make_tensor(out_shape, std::move(out));
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "sum", result, [ai, oi, sp] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t l = 0; l < sp.length; ++l) {
          double* d = ai->grad.data() + (o * sp.length + l) * sp.inner;
          const double* g = oi->grad.data() + o * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) d[i] += g[i];
        }
      }
    });
  }
  return result;
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  check_axis("mean", a.shape(), axis);
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[axis]));
}

Tensor sum_all(const Tensor& a) {
  const auto& in = a.values();
  double total = 0.0;
  for (double v : in) total += v;
  Tensor result = Tensor::scalar(total);
  if (Tape* tape = recording_tape({&a})) {
    ImplPtr ai = a.impl(), oi = result.impl();
    record(tape, "sum_all", result, [ai, oi] {
      if (!ai->requires_grad) return;
      ai->ensure_grad();
      const double g = oi->grad[0];
      for (auto& d : ai->grad) d += g;
    });
  }
  return result;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Tensor mae(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) shape_error("mae", pred.shape(), target.shape());
  return mean_all(abs(sub(pred, target)));
}

}  // namespace tel2veh::num
