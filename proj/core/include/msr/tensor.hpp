#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msr/error.hpp"

namespace msr {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major 64-bit tensor. Doubles throughout: the gradient-check
/// tolerances this project commits to are not reachable in single precision.
class Tensor {
 public:
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;   // same length as data when requires_grad
  bool grad_live = false;     // set by Tape::backward, cleared by zero_grad

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d, bool rg = false);

  static Tensor zeros(Shape s, bool rg = false);
  static Tensor full(Shape s, double v, bool rg = false);
  /// Uniform(-limit, +limit) init, seeded; limit defaults to 1/sqrt(fan_in).
  static Tensor uniform(Shape s, double limit, std::uint64_t seed, bool rg = true);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void zero_grad();
  double norm() const;  // Frobenius
};

class Tape;

/// Lightweight handle to a node on a Tape. Cheap to copy; valid only while
/// its tape is alive.
class Var {
 public:
  Var() = default;
  Var(Tape* t, std::uint32_t id) : tape_(t), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::uint32_t id() const { return id_; }

  const Shape& shape() const;
  const std::vector<double>& value() const;
  std::size_t size() const { return value().size(); }
  /// Value of a single-element node.
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Records a forward computation as a topologically ordered list of nodes and
/// replays it in reverse for gradients. Single-owner: one tape per
/// forward/backward pass, never shared across threads.
class Tape {
 public:
  enum class Op : std::uint8_t {
    constant, param,
    add, sub, mul, divide,
    neg, scale, add_const, clamp_min,
    sigmoid, tanh_fn, relu, softplus, sqrt_fn,
    matmul, matvec, vecmat, dot, transpose, rowsum,
    reshape, concat, slice, row, at,
    sum, mean,
    softmax, softmax_row,
    scale_by,
    bce_logit,
  };

  struct Node {
    Op op;
    std::uint32_t a = 0, b = 0;       // parent ids (unused slots ignored)
    double c0 = 0.0;                  // scalar payload (constant, label, floor)
    std::uint32_t i0 = 0, i1 = 0;     // index payload (slice offset/len, row)
    Shape shape;
    std::vector<double> val;
    std::vector<std::uint32_t> extra; // additional parents (concat)
    Tensor* src = nullptr;            // parameter leaves only
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(std::vector<double> data, Shape shape);
  Var constant(const Tensor& t);
  Var scalar_const(double v);
  /// Differentiable leaf. The same Tensor registered twice yields the same
  /// node, so parameter sharing sums gradients naturally.
  Var param(Tensor& t);

  /// Reverse pass from a single-element loss node. Accumulates seed *
  /// d(loss)/d(leaf) into every reachable parameter's grad and marks it live.
  /// A second call on the same tape is a contract violation.
  void backward(const Var& loss, double seed = 1.0);

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  /// Gradient buffer of a node after backward (empty if grads never reached it).
  std::span<const double> grad_of(const Var& v) const;

 private:
  friend class Var;
  friend Var add(Var, Var);
  friend Var sub(Var, Var);
  friend Var mul(Var, Var);
  friend Var divide(Var, Var);
  friend Var neg(Var);
  friend Var scale(Var, double);
  friend Var add_const(Var, double);
  friend Var clamp_min(Var, double);
  friend Var sigmoid(Var);
  friend Var tanh_v(Var);
  friend Var relu(Var);
  friend Var softplus(Var);
  friend Var sqrt_v(Var);
  friend Var matmul(Var, Var);
  friend Var matvec(Var, Var);
  friend Var vecmat(Var, Var);
  friend Var dot(Var, Var);
  friend Var transpose(Var);
  friend Var rowsum(Var);
  friend Var reshape(Var, Shape);
  friend Var concat(std::span<const Var>);
  friend Var slice(Var, std::size_t, std::size_t);
  friend Var row(Var, std::size_t);
  friend Var at(Var, std::size_t);
  friend Var sum(Var);
  friend Var mean(Var);
  friend Var softmax(Var);
  friend Var softmax_row(Var);
  friend Var scale_by(Var, Var);
  friend Var bce_with_logit(Var, double);

  std::uint32_t push(Node n);
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::unordered_map<const Tensor*, std::uint32_t> param_ids_;
  bool backward_done_ = false;
};

// ---- op surface ------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);        // element-wise
Var divide(Var a, Var b);     // element-wise
Var neg(Var a);
Var scale(Var a, double c);
Var add_const(Var a, double c);
Var clamp_min(Var a, double floor);

Var sigmoid(Var a);
Var tanh_v(Var a);
Var relu(Var a);
Var softplus(Var a);          // log(1 + e^x), overflow-safe
Var sqrt_v(Var a);

Var matmul(Var a, Var b);     // [p,q] x [q,r] -> [p,r]
Var matvec(Var m, Var x);     // [p,q] x [q]   -> [p]
Var vecmat(Var x, Var m);     // [p]  x [p,q]  -> [q]  (i.e. M^T x)
Var dot(Var a, Var b);        // [n] . [n] -> [1]
Var transpose(Var m);
Var rowsum(Var m);            // [p,q] -> [p], sum over columns

Var reshape(Var a, Shape s);
Var concat(std::span<const Var> parts);          // 1-D concatenation
Var concat(std::initializer_list<Var> parts);
Var slice(Var a, std::size_t offset, std::size_t len);  // 1-D
Var row(Var m, std::size_t r);                   // [p,q] -> [q]
Var at(Var a, std::size_t i);                    // 1-D -> [1]

Var sum(Var a);               // -> [1]
Var mean(Var a);              // -> [1]

/// Max-subtracted softmax over a 1-D vector.
Var softmax(Var a);
/// Row-wise max-subtracted softmax over a 2-D matrix.
Var softmax_row(Var a);

/// Single-element scalar times tensor.
Var scale_by(Var scalar, Var v);

/// Binary cross entropy from the pre-sigmoid logit, computed in the
/// log-sum-exp form so neither log(0) nor exp overflow can occur.
Var bce_with_logit(Var logit, double y);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// Composites built from primitives (they inherit the primitives' gradients).
Var outer(Var a, Var b);                 // [n],[m] -> [n,m]
Var cosine(Var a, Var b);                // norms floored at 1e-12
Var one_minus(Var a);                    // 1 - x, element-wise

}  // namespace msr
