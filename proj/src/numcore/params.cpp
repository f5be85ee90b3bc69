#include "numcore/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "common/config.hpp"
#include "common/error.hpp"

namespace tel2veh::num {

Tensor& ParameterSet::add(const std::string& name, Tensor tensor) {
  if (has(name)) fail(ErrorKind::invalid_argument, "duplicate parameter '" + name + "'");
  tensor.set_requires_grad(true);
  items_.emplace_back(name, std::move(tensor));
  return items_.back().second;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  fail(ErrorKind::invalid_argument, "no parameter named '" + name + "'");
}

Tensor& ParameterSet::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).get(name));
}

bool ParameterSet::has(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return true;
  }
  return false;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

void ParameterSet::set_requires_grad(bool on) {
  for (auto& [name, t] : items_) t.set_requires_grad(on);
}

std::vector<std::vector<double>> ParameterSet::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(items_.size());
  for (const auto& [name, t] : items_) out.emplace_back(t.values().begin(), t.values().end());
  return out;
}

void ParameterSet::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != items_.size()) fail(ErrorKind::state, "parameter snapshot size mismatch");
  for (std::size_t i = 0; i < items_.size(); ++i) {
    auto dst = items_[i].second.mutable_values();
    if (dst.size() != values[i].size()) fail(ErrorKind::state, "parameter snapshot shape mismatch");
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (const auto& [name, t] : items_) {
    h = fnv1a64(name.data(), name.size(), h);
    for (auto d : t.shape()) {
      const std::uint64_t d64 = d;
      h = fnv1a64(&d64, sizeof d64, h);
    }
    h = fnv1a64(t.values().data(), t.values().size_bytes(), h);
  }
  return h;
}

void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments, std::size_t step,
               const AdamOptions& options, const std::string& name) {
  if (param.size() != grad.size()) fail(ErrorKind::invalid_argument, "adam_step: gradient shape mismatch for '" + name + "'");
  if (step == 0) fail(ErrorKind::invalid_argument, "adam_step: step count starts at 1");
  if (moments.first.size() != param.size()) {
    moments.first.assign(param.size(), 0.0);
    moments.second.assign(param.size(), 0.0);
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      fail(ErrorKind::numeric, "adam_step: non-finite gradient in parameter '" + name + "' at index " +
                                   std::to_string(i));
    }
  }
  const double s = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(options.beta1, s);
  const double c2 = 1.0 - std::pow(options.beta2, s);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.first[i] = options.beta1 * moments.first[i] + (1.0 - options.beta1) * g;
    moments.second[i] = options.beta2 * moments.second[i] + (1.0 - options.beta2) * g * g;
    const double m_hat = moments.first[i] / c1;
    const double v_hat = moments.second[i] / c2;
    param[i] -= options.lr * m_hat / (std::sqrt(v_hat) + options.eps);
  }
}

Adam::Adam(std::vector<NamedTensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options), moments_(params_.size()) {
  for (auto& [name, t] : params_) {
    if (!t.requires_grad()) fail(ErrorKind::state, "Adam: parameter '" + name + "' does not require grad");
  }
}

void Adam::step() {
  ++steps_;
  double factor = 1.0;
  if (options_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, t] : params_) {
      for (double g : t.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (std::isfinite(norm) && norm > options_.clip_norm) factor = options_.clip_norm / norm;
  }
  std::vector<double> scaled;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, t] = params_[i];
    auto grad = t.grad();
    if (factor != 1.0) {
      scaled.assign(grad.begin(), grad.end());
      for (auto& g : scaled) g *= factor;
      adam_step(t.mutable_values(), scaled, moments_[i], steps_, options_, name);
    } else {
      adam_step(t.mutable_values(), grad, moments_[i], steps_, options_, name);
    }
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

namespace {

constexpr char kMagic[8] = {'T', '2', 'V', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put_le(std::string& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(U));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return std::bit_cast<T>(bits);
  }

  std::string get_bytes(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) {
    if (bytes_.size() - pos_ < n) fail(ErrorKind::parse, "checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::serialize() const {
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, metadata.size());
  out += metadata;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    for (double v : t.values()) put_le<double>(out, v);
  }
  return out;
}

Checkpoint Checkpoint::parse(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    fail(ErrorKind::parse, "not a tel2veh checkpoint (bad magic)");
  }
  Reader r(bytes);
  r.get_bytes(sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) fail(ErrorKind::parse, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.metadata = r.get_bytes(r.get<std::uint64_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_bytes(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) v = r.get<double>();
    ckpt.tensors.emplace_back(std::move(name), Tensor::from(shape, std::move(values)));
  }
  if (!r.done()) fail(ErrorKind::parse, "trailing bytes after checkpoint tensors");
  return ckpt;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write checkpoint '" + path + "'");
  const auto bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "short write on checkpoint '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open checkpoint '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str());
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  fail(ErrorKind::data, "checkpoint has no tensor '" + name + "'");
}

}  // namespace tel2veh::num
