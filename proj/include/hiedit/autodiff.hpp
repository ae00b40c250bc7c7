#pragma once

// Reverse-mode differentiation over dense row-major float64 arrays.
//
// A Tape owns every node created while recording a forward program. Nodes
// are appended in execution order, so the recording order is a valid
// topological order and backward simply walks the tape in reverse.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace hiedit::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Lightweight handle to a node on a Tape. Copying a Tensor never copies data.
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<const double> grad() const;
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }
  bool requires_grad() const;

 private:
  friend class Tape;
  Tensor(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradientMap = std::unordered_map<std::size_t, std::vector<double>>;

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string op;
    bool requires_grad = false;
    bool leaf = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor variable(Shape shape, std::vector<double> values);
  Tensor constant(Shape shape, std::vector<double> values);
  Tensor scalar(double v, bool requires_grad = false);

  // Records an op node. Inputs are tape ids; requires_grad is inherited.
  Tensor record(std::string op, Shape shape, std::vector<double> value,
                std::vector<std::size_t> inputs, BackwardFn fn);

  // Accumulates d(loss)/d(leaf) into every leaf that requires grad.
  void backward(const Tensor& loss);
  // Same, but restricted to paths that reach one of `params`; only those
  // leaves accumulate. Returns the accumulated gradient of each param.
  GradientMap backward(const Tensor& loss, std::span<const Tensor> params);

  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::vector<std::string> op_sequence() const;

  // Only valid inside a backward closure.
  bool wants(std::size_t id) const { return active_[id] != 0; }
  std::vector<double>& grad_of(std::size_t id);

 private:
  void run_backward(const Tensor& loss);

  std::deque<Node> nodes_;
  std::vector<std::uint8_t> active_;
};

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m×k]·[k×n]
Tensor matmul_bt(const Tensor& a, const Tensor& b);  // [m×k]·[n×k]ᵀ
Tensor transpose(const Tensor& a);
Tensor outer(const Tensor& v, const Tensor& u);
Tensor reshape(const Tensor& a, Shape shape);

enum class Elementwise { add, sub, hadamard, scale, relu, swish };

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor scale(const Tensor& a, const Tensor& s);  // s is a one-element tensor
Tensor relu(const Tensor& a);
Tensor swish(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sq_norm(const Tensor& a);
Tensor index(const Tensor& a, std::size_t i);
Tensor concat(std::span<const Tensor> parts);  // vectors only
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor mean_rows(const Tensor& a);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
Tensor affine_rows(const Tensor& x, const Tensor& scale, const Tensor& offset);
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 1e-6);
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t seq_len, std::size_t n_heads);

Tensor softmax_nll(const Tensor& logits, std::size_t target);
Tensor softmax_nll_rows(const Tensor& logits, std::span<const std::size_t> targets);
// KL[p_ref ‖ p_cur]; ref_logits never receives gradient.
Tensor kl_div(const Tensor& ref_logits, const Tensor& cur_logits);
Tensor kl_div_rows(const Tensor& ref_logits, const Tensor& cur_logits);

// Hard top-K 0/1 mask whose backward is the identity onto z.
Tensor topk_mask_st(const Tensor& z, std::size_t k);
Tensor stop_gradient(const Tensor& x);

Tensor apply(Elementwise kind, std::span<const Tensor> operands, double s = 1.0);

// Plain helpers shared with tests and callers that work outside a tape.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);
std::vector<std::size_t> topk_indices(std::span<const double> z, std::size_t k);

}  // namespace hiedit::ad
