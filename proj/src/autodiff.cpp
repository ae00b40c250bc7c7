#include "hiedit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "hiedit/error.hpp"

namespace hiedit::ad {

std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tape& Tensor::tape() const {
  if (!tape_) throw ContractError("use of an unbound tensor");
  return *tape_;
}
const Shape& Tensor::shape() const { return tape().node(id_).shape; }
std::size_t Tensor::size() const { return tape().node(id_).value.size(); }
std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 2 ? s[0] : 1;
}
std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}
std::span<const double> Tensor::values() const { return tape().node(id_).value; }
std::span<const double> Tensor::grad() const { return tape().grad_of(id_); }
double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return values()[0];
}
bool Tensor::requires_grad() const { return tape().node(id_).requires_grad; }

// ---- Tape -----------------------------------------------------------------

namespace {

void check_finite(const std::vector<double>& v, const std::string& op) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError("non-finite value produced by " + op);
}

}  // namespace

Tensor Tape::variable(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size())
    throw DimensionError("variable: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  check_finite(values, "variable");
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.op = "variable";
  n.requires_grad = true;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Tape::constant(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size())
    throw DimensionError("constant: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  check_finite(values, "constant");
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.op = "constant";
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Tensor Tape::scalar(double v, bool requires_grad) {
  return requires_grad ? variable({1}, {v}) : constant({1}, {v});
}

Tensor Tape::record(std::string op, Shape shape, std::vector<double> value,
                    std::vector<std::size_t> inputs, BackwardFn fn) {
  check_finite(value, op);
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  n.op = std::move(op);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

std::vector<double>& Tape::grad_of(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Tape::zero_grad() {
  for (auto& n : nodes_) n.grad.clear();
}

std::vector<std::string> Tape::op_sequence() const {
  std::vector<std::string> ops;
  ops.reserve(nodes_.size());
  for (const auto& n : nodes_) ops.push_back(n.op);
  return ops;
}

void Tape::run_backward(const Tensor& loss) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  const std::size_t top = loss.id();
  for (std::size_t i = 0; i <= top; ++i)
    if (!nodes_[i].leaf) nodes_[i].grad.clear();
  if (!active_[top]) return;
  grad_of(top)[0] += 1.0;
  for (std::size_t i = top + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.leaf || !active_[i] || n.grad.empty() || !n.backward) continue;
    n.backward(*this, i);
  }
  for (std::size_t i = 0; i <= top; ++i)
    if (nodes_[i].leaf && active_[i] && !nodes_[i].grad.empty())
      check_finite(nodes_[i].grad, "backward");
}

void Tape::backward(const Tensor& loss) {
  active_.assign(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) active_[i] = nodes_[i].requires_grad;
  run_backward(loss);
  active_.clear();
}

GradientMap Tape::backward(const Tensor& loss, std::span<const Tensor> params) {
  std::unordered_set<std::size_t> wanted;
  for (const auto& p : params) {
    if (&p.tape() != this) throw ContractError("backward: parameter belongs to another tape");
    wanted.insert(p.id());
  }
  active_.assign(nodes_.size(), 0);
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.leaf) {
      active_[i] = wanted.count(i) && n.requires_grad;
    } else {
      for (std::size_t in : n.inputs)
        if (active_[in]) {
          active_[i] = 1;
          break;
        }
    }
  }
  run_backward(loss);
  active_.clear();
  GradientMap out;
  for (const auto& p : params) out[p.id()] = grad_of(p.id());
  return out;
}

// ---- helpers --------------------------------------------------------------

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double x : logits) s += std::exp(x - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  auto out = log_softmax(logits);
  for (double& x : out) x = std::exp(x);
  return out;
}

std::vector<std::size_t> topk_indices(std::span<const double> z, std::size_t k) {
  std::vector<std::size_t> idx(z.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Stable sort on descending value keeps the lowest index first among ties.
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

Tape& same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands on different tapes");
  return a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

void require_vector(const Tensor& a, const char* op) {
  if (a.rank() != 1)
    throw DimensionError(std::string(op) + ": expected a vector, got " + shape_str(a.shape()));
}

// C[m×n] += A[m×k]·B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t r = 0; r < k; ++r) {
      const double air = a[i * k + r];
      if (air == 0.0) continue;
      const double* br = b + r * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += air * br[j];
    }
  }
}

// C[m×n] += A[m×k]·B[n×k]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t r = 0; r < k; ++r) s += ai[r] * bj[r];
      c[i * n + j] += s;
    }
  }
}

// C[m×n] += A[k×m]ᵀ·B[k×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t r = 0; r < k; ++r) {
    const double* ar = a + r * m;
    const double* br = b + r * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double ari = ar[i];
      if (ari == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += ari * br[j];
    }
  }
}

}  // namespace

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "matmul");
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: inner dimensions differ " + shape_str(a.shape()) + "·" +
                         shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  gemm_nn(a.values().data(), b.values().data(), c.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", {m, n}, std::move(c), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const double* dc = tp.node(self).grad.data();
    if (tp.wants(ia)) gemm_nt(dc, tp.node(ib).value.data(), tp.grad_of(ia).data(), m, n, k);
    if (tp.wants(ib)) gemm_tn(tp.node(ia).value.data(), dc, tp.grad_of(ib).data(), k, m, n);
  });
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "matmul_bt");
  require_matrix(a, "matmul_bt");
  require_matrix(b, "matmul_bt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k)
    throw DimensionError("matmul_bt: inner dimensions differ " + shape_str(a.shape()) + "·" +
                         shape_str(b.shape()) + "ᵀ");
  std::vector<double> c(m * n, 0.0);
  gemm_nt(a.values().data(), b.values().data(), c.data(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul_bt", {m, n}, std::move(c), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const double* dc = tp.node(self).grad.data();
    // dA = dC·B, dB = dCᵀ·A
    if (tp.wants(ia)) gemm_nn(dc, tp.node(ib).value.data(), tp.grad_of(ia).data(), m, n, k);
    if (tp.wants(ib)) gemm_tn(dc, tp.node(ia).value.data(), tp.grad_of(ib).data(), n, m, k);
  });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  const std::size_t ia = a.id();
  return a.tape().record("transpose", {n, m}, std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const auto& g = tp.node(self).grad;
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
  });
}

Tensor outer(const Tensor& v, const Tensor& u) {
  Tape& t = same_tape(v, u, "outer");
  require_vector(v, "outer");
  require_vector(u, "outer");
  const std::size_t m = v.size(), n = u.size();
  std::vector<double> out(m * n);
  auto vv = v.values();
  auto uv = u.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = vv[i] * uv[j];
  const std::size_t iv = v.id(), iu = u.id();
  return t.record("outer", {m, n}, std::move(out), {iv, iu}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.wants(iv)) {
      auto& gv = tp.grad_of(iv);
      const auto& uu = tp.node(iu).value;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gv[i] += g[i * n + j] * uu[j];
    }
    if (tp.wants(iu)) {
      auto& gu = tp.grad_of(iu);
      const auto& vv2 = tp.node(iv).value;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gu[j] += g[i * n + j] * vv2[i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  const std::size_t ia = a.id();
  std::vector<double> v(a.values().begin(), a.values().end());
  return a.tape().record("reshape", std::move(shape), std::move(v), {ia},
                         [=](Tape& tp, std::size_t self) {
                           if (!tp.wants(ia)) return;
                           const auto& g = tp.node(self).grad;
                           auto& ga = tp.grad_of(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", a.shape(), std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    for (std::size_t in : {ia, ib}) {
      if (!tp.wants(in)) continue;
      auto& gi = tp.grad_of(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", a.shape(), std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.wants(ia)) {
      auto& ga = tp.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.wants(ib)) {
      auto& gb = tp.grad_of(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "hadamard");
  require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("hadamard", a.shape(), std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.wants(ia)) {
      auto& ga = tp.grad_of(ia);
      const auto& bb = tp.node(ib).value;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bb[i];
    }
    if (tp.wants(ib)) {
      auto& gb = tp.grad_of(ib);
      const auto& aa = tp.node(ia).value;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * aa[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= s;
  const std::size_t ia = a.id();
  return a.tape().record("scale", a.shape(), std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const auto& g = tp.node(self).grad;
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Tensor scale(const Tensor& a, const Tensor& s) {
  Tape& t = same_tape(a, s, "scale");
  if (s.size() != 1) throw DimensionError("scale: factor must hold one element, got " + shape_str(s.shape()));
  const double sv = s.values()[0];
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x *= sv;
  const std::size_t ia = a.id(), is = s.id();
  return t.record("scale", a.shape(), std::move(out), {ia, is}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    const double factor = tp.node(is).value[0];
    if (tp.wants(ia)) {
      auto& ga = tp.grad_of(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
    }
    if (tp.wants(is)) {
      const auto& aa = tp.node(ia).value;
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * aa[i];
      tp.grad_of(is)[0] += acc;
    }
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& x : out) x = x > 0.0 ? x : 0.0;
  const std::size_t ia = a.id();
  return a.tape().record("relu", a.shape(), std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const auto& g = tp.node(self).grad;
    const auto& x = tp.node(ia).value;
    auto& ga = tp.grad_of(ia);
    // Subgradient 1 at x == 0, so zero-initialized layers feeding a relu still learn.
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] >= 0.0) ga[i] += g[i];
  });
}

Tensor swish(const Tensor& a) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / (1.0 + std::exp(-av[i]));
  const std::size_t ia = a.id();
  return a.tape().record("swish", a.shape(), std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const auto& g = tp.node(self).grad;
    const auto& x = tp.node(ia).value;
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double sg = 1.0 / (1.0 + std::exp(-x[i]));
      ga[i] += g[i] * (sg + x[i] * sg * (1.0 - sg));
    }
  });
}

Tensor apply(Elementwise kind, std::span<const Tensor> operands, double s) {
  const std::size_t arity =
      (kind == Elementwise::add || kind == Elementwise::sub || kind == Elementwise::hadamard) ? 2 : 1;
  if (operands.size() != arity)
    throw ArgumentError("elementwise: expected " + std::to_string(arity) + " operands, got " +
                        std::to_string(operands.size()));
  switch (kind) {
    case Elementwise::add: return add(operands[0], operands[1]);
    case Elementwise::sub: return sub(operands[0], operands[1]);
    case Elementwise::hadamard: return hadamard(operands[0], operands[1]);
    case Elementwise::scale: return scale(operands[0], s);
    case Elementwise::relu: return relu(operands[0]);
    case Elementwise::swish: return swish(operands[0]);
  }
  throw ArgumentError("elementwise: unknown kind");
}

// ---- reductions and reshaping ----------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  const std::size_t ia = a.id();
  return a.tape().record("sum", {1}, {s}, {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const double g = tp.node(self).grad[0];
    for (double& x : tp.grad_of(ia)) x += g;
  });
}

Tensor sq_norm(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x * x;
  const std::size_t ia = a.id();
  return a.tape().record("sq_norm", {1}, {s}, {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const double g = tp.node(self).grad[0];
    const auto& x = tp.node(ia).value;
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * g * x[i];
  });
}

Tensor index(const Tensor& a, std::size_t i) {
  if (i >= a.size())
    throw IndexError("index: " + std::to_string(i) + " out of range for " + shape_str(a.shape()));
  const std::size_t ia = a.id();
  return a.tape().record("index", {1}, {a.values()[i]}, {ia}, [=](Tape& tp, std::size_t self) {
    if (tp.wants(ia)) tp.grad_of(ia)[i] += tp.node(self).grad[0];
  });
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ArgumentError("concat: no operands");
  Tape& t = parts[0].tape();
  std::vector<double> out;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    if (&p.tape() != &t) throw ContractError("concat: operands on different tapes");
    require_vector(p, "concat");
    offsets.push_back(out.size());
    ids.push_back(p.id());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  const std::size_t n = out.size();
  return t.record("concat", {n}, std::move(out), ids, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.wants(ids[k])) continue;
      auto& gi = tp.grad_of(ids[k]);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[offsets[k] + i];
    }
  });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  Tape& t = same_tape(a, b, "concat_cols");
  require_matrix(a, "concat_cols");
  require_matrix(b, "concat_cols");
  if (a.rows() != b.rows()) throw DimensionError("concat_cols: row counts differ");
  const std::size_t m = a.rows(), na = a.cols(), nb = b.cols(), n = na + nb;
  std::vector<double> out(m * n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.data() + i * na, na, out.data() + i * n);
    std::copy_n(bv.data() + i * nb, nb, out.data() + i * n + na);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("concat_cols", {m, n}, std::move(out), {ia, ib}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.wants(ia)) {
      auto& ga = tp.grad_of(ia);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < na; ++j) ga[i * na + j] += g[i * n + j];
    }
    if (tp.wants(ib)) {
      auto& gb = tp.grad_of(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nb; ++j) gb[i * nb + j] += g[i * n + na + j];
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n)
    throw IndexError("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_str(a.shape()));
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data() + i * n + begin, w, out.data() + i * w);
  const std::size_t ia = a.id();
  return a.tape().record("slice_cols", {m, w}, std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const auto& g = tp.node(self).grad;
    auto& ga = tp.grad_of(ia);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += g[i * w + j];
  });
}

Tensor mean_rows(const Tensor& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(n, 0.0);
  auto av = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  for (double& x : out) x /= static_cast<double>(m);
  const std::size_t ia = a.id();
  return a.tape().record("mean_rows", {n}, std::move(out), {ia}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(ia)) return;
    const auto& g = tp.node(self).grad;
    auto& ga = tp.grad_of(ia);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j] * inv;
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  require_matrix(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * n);
  auto av = a.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) throw IndexError("gather_rows: row " + std::to_string(idx[r]) + " out of range");
    std::copy_n(av.data() + idx[r] * n, n, out.data() + r * n);
  }
  const std::size_t ia = a.id();
  return a.tape().record("gather_rows", {idx.size(), n}, std::move(out), {ia},
                         [=](Tape& tp, std::size_t self) {
                           if (!tp.wants(ia)) return;
                           const auto& g = tp.node(self).grad;
                           auto& ga = tp.grad_of(ia);
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[r * n + j];
                         });
}

Tensor affine_rows(const Tensor& x, const Tensor& scl, const Tensor& off) {
  Tape& t = same_tape(x, scl, "affine_rows");
  same_tape(x, off, "affine_rows");
  require_matrix(x, "affine_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (scl.size() != n || off.size() != n)
    throw DimensionError("affine_rows: scale/offset length must equal column count " + std::to_string(n));
  std::vector<double> out(m * n);
  auto xv = x.values();
  auto sv = scl.values();
  auto ov = off.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * sv[j] + ov[j];
  const std::size_t ix = x.id(), is = scl.id(), io = off.id();
  return t.record("affine_rows", {m, n}, std::move(out), {ix, is, io}, [=](Tape& tp, std::size_t self) {
    const auto& g = tp.node(self).grad;
    if (tp.wants(ix)) {
      auto& gx = tp.grad_of(ix);
      const auto& s = tp.node(is).value;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * s[j];
    }
    if (tp.wants(is)) {
      auto& gs = tp.grad_of(is);
      const auto& xx = tp.node(ix).value;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gs[j] += g[i * n + j] * xx[i * n + j];
    }
    if (tp.wants(io)) {
      auto& go = tp.grad_of(io);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) go[j] += g[i * n + j];
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  require_matrix(table, "embedding");
  for (std::size_t id : ids)
    if (id >= table.rows())
      throw IndexError("embedding: token " + std::to_string(id) + " out of range for vocabulary " +
                       std::to_string(table.rows()));
  Tensor out = gather_rows(table, ids);
  out.tape().node(out.id()).op = "embedding";
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  Tape& t = same_tape(x, gain, "rmsnorm");
  require_matrix(x, "rmsnorm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.size() != n) throw DimensionError("rmsnorm: gain length differs from feature count");
  std::vector<double> out(m * n), inv(m);
  auto xv = x.values();
  auto gv = gain.values();
  for (std::size_t i = 0; i < m; ++i) {
    double ms = 0.0;
    for (std::size_t j = 0; j < n; ++j) ms += xv[i * n + j] * xv[i * n + j];
    inv[i] = 1.0 / std::sqrt(ms / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * inv[i] * gv[j];
  }
  const std::size_t ix = x.id(), ig = gain.id();
  return t.record("rmsnorm", {m, n}, std::move(out), {ix, ig},
                  [=, inv = std::move(inv)](Tape& tp, std::size_t self) {
                    const auto& g = tp.node(self).grad;
                    const auto& xx = tp.node(ix).value;
                    const auto& gg = tp.node(ig).value;
                    if (tp.wants(ig)) {
                      auto& dg = tp.grad_of(ig);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) dg[j] += g[i * n + j] * xx[i * n + j] * inv[i];
                    }
                    if (tp.wants(ix)) {
                      auto& dx = tp.grad_of(ix);
                      for (std::size_t i = 0; i < m; ++i) {
                        // dx = r·(dŷ − x̂·mean(dŷ⊙x̂)) with x̂ = x·r, dŷ = g⊙gain
                        double dot = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                          dot += g[i * n + j] * gg[j] * xx[i * n + j] * inv[i];
                        dot /= static_cast<double>(n);
                        for (std::size_t j = 0; j < n; ++j)
                          dx[i * n + j] += inv[i] * (g[i * n + j] * gg[j] - xx[i * n + j] * inv[i] * dot);
                      }
                    }
                  });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                        std::size_t n_heads) {
  Tape& t = same_tape(q, k, "causal_attention");
  same_tape(q, v, "causal_attention");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  require_matrix(q, "causal_attention");
  const std::size_t rows = q.rows(), d = q.cols();
  if (seq_len == 0 || rows % seq_len != 0)
    throw DimensionError("causal_attention: row count not a multiple of the sequence length");
  if (n_heads == 0 || d % n_heads != 0)
    throw DimensionError("causal_attention: width not divisible by head count");
  const std::size_t batch = rows / seq_len, dh = d / n_heads, S = seq_len;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  // probs[((b*H + h)*S + i)*S + j], zero above the diagonal
  std::vector<double> probs(batch * n_heads * S * S, 0.0);
  std::vector<double> out(rows * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < S; ++i) {
        double* p = probs.data() + ((b * n_heads + h) * S + i) * S;
        const double* qi = qv.data() + (b * S + i) * d + h * dh;
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = kv.data() + (b * S + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[j] = s * sc;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) z += (p[j] = std::exp(p[j] - mx));
        double* oi = out.data() + (b * S + i) * d + h * dh;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] /= z;
          const double* vj = vv.data() + (b * S + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return t.record(
      "causal_attention", {rows, d}, std::move(out), {iq, ik, iv},
      [=, probs = std::move(probs)](Tape& tp, std::size_t self) {
        const auto& g = tp.node(self).grad;
        const auto& qq = tp.node(iq).value;
        const auto& kk = tp.node(ik).value;
        const auto& vv2 = tp.node(iv).value;
        const bool wq = tp.wants(iq), wk = tp.wants(ik), wv = tp.wants(iv);
        std::vector<double>* dq = wq ? &tp.grad_of(iq) : nullptr;
        std::vector<double>* dk = wk ? &tp.grad_of(ik) : nullptr;
        std::vector<double>* dv = wv ? &tp.grad_of(iv) : nullptr;
        std::vector<double> dp(S);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < n_heads; ++h)
            for (std::size_t i = 0; i < S; ++i) {
              const double* p = probs.data() + ((b * n_heads + h) * S + i) * S;
              const double* gi = g.data() + (b * S + i) * d + h * dh;
              double pdp = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = vv2.data() + (b * S + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dp[j] = s;
                pdp += p[j] * s;
                if (dv) {
                  double* dvj = dv->data() + (b * S + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * gi[c];
                }
              }
              if (!dq && !dk) continue;
              const double* qi = qq.data() + (b * S + i) * d + h * dh;
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = p[j] * (dp[j] - pdp) * sc;
                const double* kj = kk.data() + (b * S + j) * d + h * dh;
                if (dq) {
                  double* dqi = dq->data() + (b * S + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (dk) {
                  double* dkj = dk->data() + (b * S + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
      });
}

// ---- losses ---------------------------------------------------------------

Tensor softmax_nll_rows(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t m = logits.rank() == 1 ? 1 : logits.rows();
  const std::size_t n = logits.cols();
  if (logits.rank() > 2) throw DimensionError("softmax_nll: logits must be a vector or matrix");
  if (targets.size() != m) throw DimensionError("softmax_nll: one target per row required");
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  for (std::size_t y : tg)
    if (y >= n)
      throw IndexError("softmax_nll: target " + std::to_string(y) + " out of range for " +
                       std::to_string(n) + " classes");
  auto lv = logits.values();
  std::vector<double> out(m), probs(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    auto ls = log_softmax(lv.subspan(i * n, n));
    out[i] = -ls[tg[i]];
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(ls[j]);
  }
  const std::size_t il = logits.id();
  return logits.tape().record("softmax_nll", {m}, std::move(out), {il},
                              [=, probs = std::move(probs)](Tape& tp, std::size_t self) {
                                if (!tp.wants(il)) return;
                                const auto& g = tp.node(self).grad;
                                auto& gl = tp.grad_of(il);
                                for (std::size_t i = 0; i < m; ++i) {
                                  for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += g[i] * probs[i * n + j];
                                  gl[i * n + tg[i]] -= g[i];
                                }
                              });
}

Tensor softmax_nll(const Tensor& logits, std::size_t target) {
  require_vector(logits, "softmax_nll");
  const std::size_t t[1] = {target};
  return softmax_nll_rows(logits, t);
}

Tensor kl_div_rows(const Tensor& ref_logits, const Tensor& cur_logits) {
  Tape& t = same_tape(ref_logits, cur_logits, "kl_div");
  require_same_shape(ref_logits, cur_logits, "kl_div");
  if (cur_logits.rank() > 2) throw DimensionError("kl_div: logits must be a vector or matrix");
  const std::size_t m = cur_logits.rank() == 1 ? 1 : cur_logits.rows();
  const std::size_t n = cur_logits.cols();
  auto rv = ref_logits.values();
  auto cv = cur_logits.values();
  std::vector<double> out(m), pdiff(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    auto lr = log_softmax(rv.subspan(i * n, n));
    auto lc = log_softmax(cv.subspan(i * n, n));
    double kl = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double pr = std::exp(lr[j]);
      kl += pr * (lr[j] - lc[j]);
      pdiff[i * n + j] = std::exp(lc[j]) - pr;
    }
    out[i] = std::max(kl, 0.0);
  }
  const std::size_t ic = cur_logits.id();
  // The reference logits are deliberately not an input of this node.
  return t.record("kl_div", {m}, std::move(out), {ic}, [=, pdiff = std::move(pdiff)](Tape& tp, std::size_t self) {
    if (!tp.wants(ic)) return;
    const auto& g = tp.node(self).grad;
    auto& gc = tp.grad_of(ic);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gc[i * n + j] += g[i] * pdiff[i * n + j];
  });
}

Tensor kl_div(const Tensor& ref_logits, const Tensor& cur_logits) {
  require_vector(cur_logits, "kl_div");
  return kl_div_rows(ref_logits, cur_logits);
}

// ---- routing --------------------------------------------------------------

Tensor topk_mask_st(const Tensor& z, std::size_t k) {
  require_vector(z, "topk_mask_st");
  const std::size_t n = z.size();
  if (k < 1 || k > n)
    throw ArgumentError("topk_mask_st: K=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  std::vector<double> mask(n, 0.0);
  for (std::size_t i : topk_indices(z.values(), k)) mask[i] = 1.0;
  const std::size_t iz = z.id();
  // Forward is the hard mask; backward is the identity, i.e. sg(m − z) + z.
  return z.tape().record("topk_mask_st", {n}, std::move(mask), {iz}, [=](Tape& tp, std::size_t self) {
    if (!tp.wants(iz)) return;
    const auto& g = tp.node(self).grad;
    auto& gz = tp.grad_of(iz);
    for (std::size_t i = 0; i < n; ++i) gz[i] += g[i];
  });
}

Tensor stop_gradient(const Tensor& x) {
  std::vector<double> v(x.values().begin(), x.values().end());
  return x.tape().record("stop_gradient", x.shape(), std::move(v), {}, nullptr);
}

}  // namespace hiedit::ad
