#include "msr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "msr/rng.hpp"

namespace msr {

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (numel(shape) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  for (auto dim : shape)
    if (dim == 0) throw ShapeError("zero dimension in shape " + shape_str(shape));
  if (requires_grad) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape s, bool rg) {
  auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0), rg);
}

Tensor Tensor::full(Shape s, double v, bool rg) {
  auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, v), rg);
}

Tensor Tensor::uniform(Shape s, double limit, std::uint64_t seed, bool rg) {
  auto n = numel(s);
  std::vector<double> d(n);
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (auto& v : d) v = dist(rng);
  return Tensor(std::move(s), std::move(d), rg);
}

void Tensor::zero_grad() {
  std::fill(grad.begin(), grad.end(), 0.0);
  grad_live = false;
}

double Tensor::norm() const {
  double s = 0.0;
  for (double v : data) s += v * v;
  return std::sqrt(s);
}

// ---- Var -------------------------------------------------------------------

const Shape& Var::shape() const { return tape_->node(id_).shape; }
const std::vector<double>& Var::value() const { return tape_->node(id_).val; }

double Var::scalar() const {
  const auto& v = value();
  if (v.size() != 1)
    throw ContractError("scalar() on node of shape " + shape_str(shape()));
  return v[0];
}

// ---- Tape basics -----------------------------------------------------------

std::uint32_t Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<std::uint32_t>(nodes_.size() - 1);
}

Var Tape::constant(std::vector<double> data, Shape shape) {
  if (numel(shape) != data.size())
    throw ShapeError("constant data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  Node n;
  n.op = Op::constant;
  n.shape = std::move(shape);
  n.val = std::move(data);
  return Var(this, push(std::move(n)));
}

Var Tape::constant(const Tensor& t) { return constant(t.data, t.shape); }

Var Tape::scalar_const(double v) { return constant({v}, {1}); }

Var Tape::param(Tensor& t) {
  if (!t.requires_grad)
    throw ContractError("param() requires a requires_grad tensor");
  auto it = param_ids_.find(&t);
  if (it != param_ids_.end()) return Var(this, it->second);
  Node n;
  n.op = Op::param;
  n.shape = t.shape;
  n.val = t.data;
  n.src = &t;
  auto id = push(std::move(n));
  param_ids_.emplace(&t, id);
  return Var(this, id);
}

std::span<const double> Tape::grad_of(const Var& v) const {
  if (v.id() >= grads_.size()) return {};
  return grads_[v.id()];
}

// ---- helpers ---------------------------------------------------------------

namespace {

Tape* same_tape(Var a, Var b) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw ContractError("operands belong to different tapes");
  return a.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

void require_2d(const Var& a, const char* what) {
  if (a.shape().size() != 2)
    throw ShapeError(std::string(what) + ": expected 2-D, got " + shape_str(a.shape()));
}

void require_1d(const Var& a, const char* what) {
  if (a.shape().size() != 1)
    throw ShapeError(std::string(what) + ": expected 1-D, got " + shape_str(a.shape()));
}

double stable_sigmoid(double x) {
  double y;
  if (x >= 0.0) {
    double e = std::exp(-x);
    y = 1.0 / (1.0 + e);
  } else {
    double e = std::exp(x);
    y = e / (1.0 + e);
  }
  // keep the output strictly inside (0,1) even where f64 would round to the ends
  constexpr double lo = 1e-300;
  constexpr double hi = 1.0 - (1.0 / 9007199254740992.0);  // 1 - 2^-53
  return std::min(std::max(y, lo), hi);
}

double stable_softplus(double x) {
  // log(1 + e^x) without overflow on large |x|
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

}  // namespace

#define UNARY_PROLOGUE(a)                 \
  Tape* tp = a.tape();                    \
  Tape::Node n;                           \
  n.a = a.id();                           \
  n.shape = a.shape();

// ---- element-wise ----------------------------------------------------------

Var add(Var a, Var b) {
  Tape* tp = same_tape(a, b);
  require_same_shape(a, b, "add");
  Tape::Node n;
  n.op = Tape::Op::add;
  n.a = a.id();
  n.b = b.id();
  n.shape = a.shape();
  n.val.resize(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] + bv[i];
  return Var(tp, tp->push(std::move(n)));
}

Var sub(Var a, Var b) {
  Tape* tp = same_tape(a, b);
  require_same_shape(a, b, "sub");
  Tape::Node n;
  n.op = Tape::Op::sub;
  n.a = a.id();
  n.b = b.id();
  n.shape = a.shape();
  n.val.resize(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] - bv[i];
  return Var(tp, tp->push(std::move(n)));
}

Var mul(Var a, Var b) {
  Tape* tp = same_tape(a, b);
  require_same_shape(a, b, "mul");
  Tape::Node n;
  n.op = Tape::Op::mul;
  n.a = a.id();
  n.b = b.id();
  n.shape = a.shape();
  n.val.resize(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] * bv[i];
  return Var(tp, tp->push(std::move(n)));
}

Var divide(Var a, Var b) {
  Tape* tp = same_tape(a, b);
  require_same_shape(a, b, "divide");
  Tape::Node n;
  n.op = Tape::Op::divide;
  n.a = a.id();
  n.b = b.id();
  n.shape = a.shape();
  n.val.resize(a.size());
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] / bv[i];
  return Var(tp, tp->push(std::move(n)));
}

Var neg(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::neg;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = -av[i];
  return Var(tp, tp->push(std::move(n)));
}

Var scale(Var a, double c) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::scale;
  n.c0 = c;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = c * av[i];
  return Var(tp, tp->push(std::move(n)));
}

Var add_const(Var a, double c) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::add_const;
  n.c0 = c;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] + c;
  return Var(tp, tp->push(std::move(n)));
}

Var clamp_min(Var a, double floor) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::clamp_min;
  n.c0 = floor;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::max(av[i], floor);
  return Var(tp, tp->push(std::move(n)));
}

Var sigmoid(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::sigmoid;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = stable_sigmoid(av[i]);
  return Var(tp, tp->push(std::move(n)));
}

Var tanh_v(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::tanh_fn;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::tanh(av[i]);
  return Var(tp, tp->push(std::move(n)));
}

Var relu(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::relu;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = av[i] > 0.0 ? av[i] : 0.0;
  return Var(tp, tp->push(std::move(n)));
}

Var softplus(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::softplus;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = stable_softplus(av[i]);
  return Var(tp, tp->push(std::move(n)));
}

Var sqrt_v(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::sqrt_fn;
  n.val.resize(a.size());
  const auto& av = a.value();
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::sqrt(av[i]);
  return Var(tp, tp->push(std::move(n)));
}

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape* tp = same_tape(a, b);
  require_2d(a, "matmul lhs");
  require_2d(b, "matmul rhs");
  const auto p = a.shape()[0], q = a.shape()[1];
  const auto q2 = b.shape()[0], r = b.shape()[1];
  if (q != q2)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tape::Node n;
  n.op = Tape::Op::matmul;
  n.a = a.id();
  n.b = b.id();
  n.shape = {p, r};
  n.val.assign(p * r, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = av[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = bv.data() + k * r;
      double* orow = n.val.data() + i * r;
      for (std::size_t j = 0; j < r; ++j) orow[j] += aik * brow[j];
    }
  return Var(tp, tp->push(std::move(n)));
}

Var matvec(Var m, Var x) {
  Tape* tp = same_tape(m, x);
  require_2d(m, "matvec lhs");
  require_1d(x, "matvec rhs");
  const auto p = m.shape()[0], q = m.shape()[1];
  if (x.shape()[0] != q)
    throw ShapeError("matvec: " + shape_str(m.shape()) + " vs " + shape_str(x.shape()));
  Tape::Node n;
  n.op = Tape::Op::matvec;
  n.a = m.id();
  n.b = x.id();
  n.shape = {p};
  n.val.assign(p, 0.0);
  const auto& mv = m.value();
  const auto& xv = x.value();
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    const double* mrow = mv.data() + i * q;
    for (std::size_t j = 0; j < q; ++j) acc += mrow[j] * xv[j];
    n.val[i] = acc;
  }
  return Var(tp, tp->push(std::move(n)));
}

Var vecmat(Var x, Var m) {
  Tape* tp = same_tape(x, m);
  require_1d(x, "vecmat lhs");
  require_2d(m, "vecmat rhs");
  const auto p = m.shape()[0], q = m.shape()[1];
  if (x.shape()[0] != p)
    throw ShapeError("vecmat: " + shape_str(x.shape()) + " vs " + shape_str(m.shape()));
  Tape::Node n;
  n.op = Tape::Op::vecmat;
  n.a = x.id();
  n.b = m.id();
  n.shape = {q};
  n.val.assign(q, 0.0);
  const auto& xv = x.value();
  const auto& mv = m.value();
  for (std::size_t i = 0; i < p; ++i) {
    const double xi = xv[i];
    if (xi == 0.0) continue;
    const double* mrow = mv.data() + i * q;
    for (std::size_t j = 0; j < q; ++j) n.val[j] += xi * mrow[j];
  }
  return Var(tp, tp->push(std::move(n)));
}

Var dot(Var a, Var b) {
  Tape* tp = same_tape(a, b);
  require_1d(a, "dot lhs");
  require_same_shape(a, b, "dot");
  Tape::Node n;
  n.op = Tape::Op::dot;
  n.a = a.id();
  n.b = b.id();
  n.shape = {1};
  double acc = 0.0;
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  n.val = {acc};
  return Var(tp, tp->push(std::move(n)));
}

Var transpose(Var m) {
  Tape* tp = m.tape();
  require_2d(m, "transpose");
  const auto p = m.shape()[0], q = m.shape()[1];
  Tape::Node n;
  n.op = Tape::Op::transpose;
  n.a = m.id();
  n.shape = {q, p};
  n.val.resize(p * q);
  const auto& mv = m.value();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j) n.val[j * p + i] = mv[i * q + j];
  return Var(tp, tp->push(std::move(n)));
}

Var rowsum(Var m) {
  Tape* tp = m.tape();
  require_2d(m, "rowsum");
  const auto p = m.shape()[0], q = m.shape()[1];
  Tape::Node n;
  n.op = Tape::Op::rowsum;
  n.a = m.id();
  n.shape = {p};
  n.val.assign(p, 0.0);
  const auto& mv = m.value();
  for (std::size_t i = 0; i < p; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < q; ++j) acc += mv[i * q + j];
    n.val[i] = acc;
  }
  return Var(tp, tp->push(std::move(n)));
}

// ---- shape ops -------------------------------------------------------------

Var reshape(Var a, Shape s) {
  Tape* tp = a.tape();
  if (numel(s) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(s));
  Tape::Node n;
  n.op = Tape::Op::reshape;
  n.a = a.id();
  n.shape = std::move(s);
  n.val = a.value();
  return Var(tp, tp->push(std::move(n)));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat of zero parts");
  Tape* tp = parts[0].tape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_tape(parts[0], p);
    require_1d(p, "concat part");
    total += p.size();
  }
  Tape::Node n;
  n.op = Tape::Op::concat;
  n.shape = {total};
  n.val.reserve(total);
  n.extra.reserve(parts.size());
  for (const auto& p : parts) {
    n.extra.push_back(p.id());
    const auto& v = p.value();
    n.val.insert(n.val.end(), v.begin(), v.end());
  }
  return Var(tp, tp->push(std::move(n)));
}

Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice(Var a, std::size_t offset, std::size_t len) {
  Tape* tp = a.tape();
  require_1d(a, "slice");
  if (offset + len > a.size())
    throw ShapeError("slice [" + std::to_string(offset) + ", " +
                     std::to_string(offset + len) + ") out of " + shape_str(a.shape()));
  Tape::Node n;
  n.op = Tape::Op::slice;
  n.a = a.id();
  n.i0 = static_cast<std::uint32_t>(offset);
  n.shape = {len};
  const auto& av = a.value();
  n.val.assign(av.begin() + offset, av.begin() + offset + len);
  return Var(tp, tp->push(std::move(n)));
}

Var row(Var m, std::size_t r) {
  Tape* tp = m.tape();
  require_2d(m, "row");
  const auto p = m.shape()[0], q = m.shape()[1];
  if (r >= p) throw ShapeError("row " + std::to_string(r) + " out of " + shape_str(m.shape()));
  Tape::Node n;
  n.op = Tape::Op::row;
  n.a = m.id();
  n.i0 = static_cast<std::uint32_t>(r);
  n.shape = {q};
  const auto& mv = m.value();
  n.val.assign(mv.begin() + r * q, mv.begin() + (r + 1) * q);
  return Var(tp, tp->push(std::move(n)));
}

Var at(Var a, std::size_t i) {
  Tape* tp = a.tape();
  if (i >= a.size())
    throw ShapeError("at " + std::to_string(i) + " out of " + shape_str(a.shape()));
  Tape::Node n;
  n.op = Tape::Op::at;
  n.a = a.id();
  n.i0 = static_cast<std::uint32_t>(i);
  n.shape = {1};
  n.val = {a.value()[i]};
  return Var(tp, tp->push(std::move(n)));
}

// ---- reductions ------------------------------------------------------------

Var sum(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::sum;
  n.shape = {1};
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  n.val = {acc};
  return Var(tp, tp->push(std::move(n)));
}

Var mean(Var a) {
  UNARY_PROLOGUE(a)
  n.op = Tape::Op::mean;
  n.shape = {1};
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  n.val = {acc / static_cast<double>(a.size())};
  return Var(tp, tp->push(std::move(n)));
}

// ---- softmax ---------------------------------------------------------------

namespace {
void softmax_inplace(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    s += out[i];
  }
  for (std::size_t i = 0; i < n; ++i) out[i] /= s;
}
}  // namespace

Var softmax(Var a) {
  Tape* tp = a.tape();
  require_1d(a, "softmax");
  Tape::Node n;
  n.op = Tape::Op::softmax;
  n.a = a.id();
  n.shape = a.shape();
  n.val.resize(a.size());
  softmax_inplace(a.value().data(), n.val.data(), a.size());
  return Var(tp, tp->push(std::move(n)));
}

Var softmax_row(Var a) {
  Tape* tp = a.tape();
  require_2d(a, "softmax_row");
  const auto p = a.shape()[0], q = a.shape()[1];
  Tape::Node n;
  n.op = Tape::Op::softmax_row;
  n.a = a.id();
  n.shape = a.shape();
  n.val.resize(p * q);
  const auto& av = a.value();
  for (std::size_t i = 0; i < p; ++i)
    softmax_inplace(av.data() + i * q, n.val.data() + i * q, q);
  return Var(tp, tp->push(std::move(n)));
}

Var scale_by(Var scalar, Var v) {
  Tape* tp = same_tape(scalar, v);
  if (scalar.size() != 1)
    throw ShapeError("scale_by scalar has shape " + shape_str(scalar.shape()));
  Tape::Node n;
  n.op = Tape::Op::scale_by;
  n.a = scalar.id();
  n.b = v.id();
  n.shape = v.shape();
  n.val.resize(v.size());
  const double s = scalar.value()[0];
  const auto& vv = v.value();
  for (std::size_t i = 0; i < vv.size(); ++i) n.val[i] = s * vv[i];
  return Var(tp, tp->push(std::move(n)));
}

Var bce_with_logit(Var logit, double y) {
  Tape* tp = logit.tape();
  if (logit.size() != 1)
    throw ShapeError("bce_with_logit expects a scalar logit, got " + shape_str(logit.shape()));
  if (y != 0.0 && y != 1.0) throw ContractError("label must be 0 or 1");
  const double z = logit.value()[0];
  // -[y log sigma(z) + (1-y) log(1-sigma(z))] = max(z,0) - z y + log(1+e^{-|z|})
  const double loss = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  Tape::Node n;
  n.op = Tape::Op::bce_logit;
  n.a = logit.id();
  n.c0 = y;
  n.shape = {1};
  n.val = {loss};
  return Var(tp, tp->push(std::move(n)));
}

// ---- composites ------------------------------------------------------------

Var outer(Var a, Var b) {
  require_1d(a, "outer lhs");
  require_1d(b, "outer rhs");
  return matmul(reshape(a, {a.size(), 1}), reshape(b, {1, b.size()}));
}

Var cosine(Var a, Var b) {
  Var na = clamp_min(sqrt_v(dot(a, a)), 1e-12);
  Var nb = clamp_min(sqrt_v(dot(b, b)), 1e-12);
  return divide(dot(a, b), mul(na, nb));
}

Var one_minus(Var a) { return add_const(neg(a), 1.0); }

// ---- backward --------------------------------------------------------------

void Tape::backward(const Var& loss, double seed) {
  if (loss.tape() != this) throw ContractError("loss node belongs to another tape");
  if (backward_done_)
    throw ContractError("backward() already ran on this tape; rebuild the graph first");
  const auto& ln = nodes_[loss.id()];
  if (numel(ln.shape) != 1)
    throw ContractError("backward() needs a scalar loss, got " + shape_str(ln.shape));
  backward_done_ = true;

  grads_.assign(nodes_.size(), {});
  auto g = [this](std::uint32_t id) -> std::vector<double>& {
    auto& buf = grads_[id];
    if (buf.empty()) buf.assign(nodes_[id].val.size(), 0.0);
    return buf;
  };

  grads_[loss.id()].assign(1, seed);

  bool reached_param = false;
  for (std::uint32_t idx = loss.id() + 1; idx-- > 0;) {
    Node& n = nodes_[idx];
    auto& gout = grads_[idx];
    if (gout.empty()) continue;

    switch (n.op) {
      case Op::constant:
        break;
      case Op::param: {
        reached_param = true;
        auto& dst = n.src->grad;
        for (std::size_t i = 0; i < gout.size(); ++i) dst[i] += gout[i];
        n.src->grad_live = true;
        break;
      }
      case Op::add: {
        auto &ga = g(n.a), &gb = g(n.b);
        for (std::size_t i = 0; i < gout.size(); ++i) {
          ga[i] += gout[i];
          gb[i] += gout[i];
        }
        break;
      }
      case Op::sub: {
        auto &ga = g(n.a), &gb = g(n.b);
        for (std::size_t i = 0; i < gout.size(); ++i) {
          ga[i] += gout[i];
          gb[i] -= gout[i];
        }
        break;
      }
      case Op::mul: {
        auto &ga = g(n.a), &gb = g(n.b);
        const auto &av = nodes_[n.a].val, &bv = nodes_[n.b].val;
        for (std::size_t i = 0; i < gout.size(); ++i) {
          ga[i] += gout[i] * bv[i];
          gb[i] += gout[i] * av[i];
        }
        break;
      }
      case Op::divide: {
        auto &ga = g(n.a), &gb = g(n.b);
        const auto &av = nodes_[n.a].val, &bv = nodes_[n.b].val;
        for (std::size_t i = 0; i < gout.size(); ++i) {
          ga[i] += gout[i] / bv[i];
          gb[i] -= gout[i] * av[i] / (bv[i] * bv[i]);
        }
        break;
      }
      case Op::neg: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] -= gout[i];
        break;
      }
      case Op::scale: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += n.c0 * gout[i];
        break;
      }
      case Op::add_const: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
        break;
      }
      case Op::clamp_min: {
        auto& ga = g(n.a);
        const auto& av = nodes_[n.a].val;
        for (std::size_t i = 0; i < gout.size(); ++i)
          if (av[i] > n.c0) ga[i] += gout[i];
        break;
      }
      case Op::sigmoid: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i)
          ga[i] += gout[i] * n.val[i] * (1.0 - n.val[i]);
        break;
      }
      case Op::tanh_fn: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i)
          ga[i] += gout[i] * (1.0 - n.val[i] * n.val[i]);
        break;
      }
      case Op::relu: {
        auto& ga = g(n.a);
        const auto& av = nodes_[n.a].val;
        for (std::size_t i = 0; i < gout.size(); ++i)
          if (av[i] > 0.0) ga[i] += gout[i];
        break;
      }
      case Op::softplus: {
        auto& ga = g(n.a);
        const auto& av = nodes_[n.a].val;
        for (std::size_t i = 0; i < gout.size(); ++i)
          ga[i] += gout[i] * stable_sigmoid(av[i]);
        break;
      }
      case Op::sqrt_fn: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i)
          ga[i] += gout[i] * 0.5 / std::max(n.val[i], 1e-12);
        break;
      }
      case Op::matmul: {
        auto &ga = g(n.a), &gb = g(n.b);
        const auto &av = nodes_[n.a].val, &bv = nodes_[n.b].val;
        const auto p = nodes_[n.a].shape[0], q = nodes_[n.a].shape[1], r = n.shape[1];
        // dA = G B^T, dB = A^T G
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t k = 0; k < q; ++k) {
            double acc = 0.0;
            const double* grow = gout.data() + i * r;
            const double* brow = bv.data() + k * r;
            for (std::size_t j = 0; j < r; ++j) acc += grow[j] * brow[j];
            ga[i * q + k] += acc;
          }
        for (std::size_t k = 0; k < q; ++k)
          for (std::size_t i = 0; i < p; ++i) {
            const double aik = av[i * q + k];
            if (aik == 0.0) continue;
            const double* grow = gout.data() + i * r;
            double* brow = gb.data() + k * r;
            for (std::size_t j = 0; j < r; ++j) brow[j] += aik * grow[j];
          }
        break;
      }
      case Op::matvec: {
        auto &gm = g(n.a), &gx = g(n.b);
        const auto &mv = nodes_[n.a].val, &xv = nodes_[n.b].val;
        const auto p = nodes_[n.a].shape[0], q = nodes_[n.a].shape[1];
        for (std::size_t i = 0; i < p; ++i) {
          const double gi = gout[i];
          if (gi == 0.0) continue;
          double* mrow = gm.data() + i * q;
          const double* wrow = mv.data() + i * q;
          for (std::size_t j = 0; j < q; ++j) {
            mrow[j] += gi * xv[j];
            gx[j] += gi * wrow[j];
          }
        }
        break;
      }
      case Op::vecmat: {
        auto &gx = g(n.a), &gm = g(n.b);
        const auto &xv = nodes_[n.a].val, &mv = nodes_[n.b].val;
        const auto p = nodes_[n.b].shape[0], q = nodes_[n.b].shape[1];
        for (std::size_t i = 0; i < p; ++i) {
          const double xi = xv[i];
          const double* wrow = mv.data() + i * q;
          double* mrow = gm.data() + i * q;
          double acc = 0.0;
          for (std::size_t j = 0; j < q; ++j) {
            acc += gout[j] * wrow[j];
            mrow[j] += xi * gout[j];
          }
          gx[i] += acc;
        }
        break;
      }
      case Op::dot: {
        auto &ga = g(n.a), &gb = g(n.b);
        const auto &av = nodes_[n.a].val, &bv = nodes_[n.b].val;
        const double gs = gout[0];
        for (std::size_t i = 0; i < av.size(); ++i) {
          ga[i] += gs * bv[i];
          gb[i] += gs * av[i];
        }
        break;
      }
      case Op::transpose: {
        auto& ga = g(n.a);
        const auto p = nodes_[n.a].shape[0], q = nodes_[n.a].shape[1];
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j) ga[i * q + j] += gout[j * p + i];
        break;
      }
      case Op::rowsum: {
        auto& ga = g(n.a);
        const auto p = nodes_[n.a].shape[0], q = nodes_[n.a].shape[1];
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < q; ++j) ga[i * q + j] += gout[i];
        break;
      }
      case Op::reshape: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
        break;
      }
      case Op::concat: {
        std::size_t off = 0;
        for (auto pid : n.extra) {
          auto& gp = g(pid);
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += gout[off + i];
          off += gp.size();
        }
        break;
      }
      case Op::slice: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[n.i0 + i] += gout[i];
        break;
      }
      case Op::row: {
        auto& ga = g(n.a);
        const auto q = nodes_[n.a].shape[1];
        for (std::size_t i = 0; i < q; ++i) ga[n.i0 * q + i] += gout[i];
        break;
      }
      case Op::at: {
        g(n.a)[n.i0] += gout[0];
        break;
      }
      case Op::sum: {
        auto& ga = g(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[0];
        break;
      }
      case Op::mean: {
        auto& ga = g(n.a);
        const double gs = gout[0] / static_cast<double>(ga.size());
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gs;
        break;
      }
      case Op::softmax: {
        auto& ga = g(n.a);
        double dotgy = 0.0;
        for (std::size_t i = 0; i < gout.size(); ++i) dotgy += gout[i] * n.val[i];
        for (std::size_t i = 0; i < gout.size(); ++i)
          ga[i] += n.val[i] * (gout[i] - dotgy);
        break;
      }
      case Op::softmax_row: {
        auto& ga = g(n.a);
        const auto p = n.shape[0], q = n.shape[1];
        for (std::size_t i = 0; i < p; ++i) {
          const double* y = n.val.data() + i * q;
          const double* go = gout.data() + i * q;
          double dotgy = 0.0;
          for (std::size_t j = 0; j < q; ++j) dotgy += go[j] * y[j];
          double* gr = ga.data() + i * q;
          for (std::size_t j = 0; j < q; ++j) gr[j] += y[j] * (go[j] - dotgy);
        }
        break;
      }
      case Op::scale_by: {
        auto &gs = g(n.a), &gv = g(n.b);
        const double s = nodes_[n.a].val[0];
        const auto& vv = nodes_[n.b].val;
        double acc = 0.0;
        for (std::size_t i = 0; i < gout.size(); ++i) {
          acc += gout[i] * vv[i];
          gv[i] += s * gout[i];
        }
        gs[0] += acc;
        break;
      }
      case Op::bce_logit: {
        const double z = nodes_[n.a].val[0];
        g(n.a)[0] += gout[0] * (stable_sigmoid(z) - n.c0);
        break;
      }
    }
  }

  if (!param_ids_.empty() && !reached_param)
    throw ContractError("backward() reached no parameters: the loss is detached "
                        "from every registered parameter");
}

#undef UNARY_PROLOGUE

}  // namespace msr
