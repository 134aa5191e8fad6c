#pragma once

// Dense f64 tensors and a small reverse-mode tape.
//
// Everything in the library trains through this: the tape records one node per
// tensor-level op, and backward() walks it in reverse. Parameters enter the
// tape as leaves; frozen parameters enter as constants so they never receive a
// gradient contribution.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace coplms {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }
  std::size_t ndim() const { return shape_.size(); }
  bool empty() const { return values_.empty(); }

  // 2-D view helpers. A 1-D tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  void fill(double v);
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  std::string shape_string() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> values_;
};

struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Tensor v, bool trainable_ = true);

  void zero_grad();
  std::size_t size() const { return value.size(); }
};

// ---------------------------------------------------------------------------
// Plain-value helpers.

// Max-subtracted softmax. Throws on non-finite input or empty vector.
std::vector<double> softmax(std::span<const double> logits);
std::vector<double> log_softmax(std::span<const double> logits);

// KL(p || q) = sum_j p_j log(p_j / q_j). Terms with p_j == 0 contribute 0.
// Throws on length mismatch or q_j == 0 where p_j > 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Floor applied inside log arguments of KL terms.
inline constexpr double kLogFloor = 1e-30;

// ---------------------------------------------------------------------------
// Reverse-mode tape.

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  double item() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t);
  // Trainable parameters become differentiable leaves; frozen ones are
  // recorded as constants.
  Var param(Parameter& p);

  // Seeds d(loss)/d(loss) = seed and propagates. Gradients are accumulated
  // (added) into Parameter::grad of every trainable leaf.
  void backward(Var loss, double seed = 1.0);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  // Op implementations push nodes through this. The backward closure receives
  // the tape and the node's own output gradient; it must accumulate into its
  // inputs via accumulate().
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;
  Var push(Tensor value, bool requires_grad, BackwardFn backward);

  // Adds `g` into the gradient slot of v (allocating it lazily).
  void accumulate(Var v, const Tensor& g);
  Tensor& grad_slot(Var v);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All tensors are 2-D (rows x cols) unless stated.

Var matmul(Var a, Var b);     // [n,k] x [k,m]
Var matmul_nt(Var a, Var b);  // [n,k] x [m,k]^T
Var add(Var a, Var b);
Var add_bias(Var a, Var bias);  // bias is 1-D of length cols(a)
Var scale(Var a, double c);
Var gelu(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Row gather: out[i] = table[ids[i]].
Var embedding(Var table, std::span<const int> ids);
// Multi-head causal self-attention over [S, d] projections.
Var causal_attention(Var q, Var k, Var v, std::size_t heads);
// Mean next-token cross-entropy over the listed logit rows.
Var cross_entropy(Var logits, std::span<const std::size_t> rows, std::span<const int> targets);
// Mean over rows of KL(softmax(teacher_row) || softmax(student_row)).
// The teacher is a constant; row count must match.
Var softmax_kl(Var student_logits, const Tensor& teacher_logits);

// Exact GeLU and its derivative (erf form).
double gelu_value(double x);
double gelu_derivative(double x);

// ---------------------------------------------------------------------------
// Finite-difference gradient verification.

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t checked_scalars = 0;
};

// `build_loss` must construct the loss on the provided tape from the given
// parameters. Returns max over trainable scalars of
// |analytic - central_difference| / max(1, |analytic|).
// Throws if eps is outside [1e-7, 1e-4] or any probe loss is non-finite.
GradCheckResult grad_check(std::span<Parameter* const> params,
                           const std::function<Var(Tape&)>& build_loss, double eps = 1e-6);

}  // namespace coplms
