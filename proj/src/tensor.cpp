#include "lv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "lv/conv_ops.hpp"

namespace lv {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using CRowMap = Eigen::Map<const RowMat>;

struct AxisSplit {
  std::int64_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit a{1, s[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

Shape drop_axis(const Shape& s, int axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (static_cast<int>(i) != axis) out.push_back(s[i]);
  return out;
}

int checked_axis(const Shape& s, int axis, const char* op) {
  if (axis < 0 || static_cast<std::size_t>(axis) >= s.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  return axis;
}

double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

std::vector<std::int64_t> row_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Right-aligned broadcast map: source stride per target axis, 0 where the
// source extent is 1 or the axis is missing.
std::vector<std::int64_t> broadcast_strides(const Shape& src, const Shape& dst, const char* op) {
  if (src.size() > dst.size())
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(src) + " to " +
                     shape_str(dst));
  const std::size_t off = dst.size() - src.size();
  const auto sst = row_strides(src);
  std::vector<std::int64_t> out(dst.size(), 0);
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i] == dst[off + i]) {
      out[off + i] = sst[i];
    } else if (src[i] == 1) {
      out[off + i] = 0;
    } else {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(src) + " to " +
                       shape_str(dst));
    }
  }
  return out;
}

}  // namespace

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::conv_transpose2d: return "conv_transpose2d";
    case Op::leaky_relu: return "leaky_relu";
    case Op::sigmoid: return "sigmoid";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::sqrt: return "sqrt";
    case Op::square: return "square";
    case Op::abs: return "abs";
    case Op::clamp: return "clamp";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::variance: return "variance";
    case Op::l2norm: return "l2norm";
    case Op::reshape: return "reshape";
    case Op::broadcast: return "broadcast";
  }
  return "?";
}

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0); }

Tensor Tensor::full(Shape s, double v) {
  Tensor t;
  t.shape_ = std::move(s);
  t.values_ = std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_size(t.shape_)), v);
  return t;
}

Tensor Tensor::from(Shape s, std::vector<double> v) {
  if (shape_size(s) != static_cast<std::int64_t>(v.size()))
    throw ShapeError("tensor: " + std::to_string(v.size()) + " values for shape " + shape_str(s));
  Tensor t;
  t.shape_ = std::move(s);
  t.values_ = std::make_shared<std::vector<double>>(std::move(v));
  return t;
}

Tensor Tensor::from_matrix(const Eigen::MatrixXd& m) {
  Tensor t = zeros({m.rows(), m.cols()});
  RowMap(t.values_->data(), m.rows(), m.cols()) = m;
  return t;
}

Tensor Tensor::from_rows(const Eigen::MatrixXd& m, const Shape& sample) {
  if (m.cols() != shape_size(sample))
    throw ShapeError("from_rows: " + std::to_string(m.cols()) + " columns for sample shape " +
                     shape_str(sample));
  Shape s;
  s.push_back(m.rows());
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor t = zeros(std::move(s));
  RowMap(t.values_->data(), m.rows(), m.cols()) = m;
  return t;
}

std::int64_t Tensor::size() const { return defined() ? static_cast<std::int64_t>(values_->size()) : 0; }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape_));
  return (*values_)[0];
}

std::span<const double> Tensor::data() const {
  if (!defined()) throw Error("tensor: undefined");
  return {values_->data(), values_->size()};
}

std::span<double> Tensor::data() {
  if (!defined()) throw Error("tensor: undefined");
  return {values_->data(), values_->size()};
}

Eigen::VectorXd Tensor::vec() const {
  auto d = data();
  return Eigen::Map<const Eigen::VectorXd>(d.data(), static_cast<Eigen::Index>(d.size()));
}

Eigen::MatrixXd Tensor::mat() const {
  if (rank() != 2) throw ShapeError("mat: tensor has shape " + shape_str(shape_));
  return CRowMap(values_->data(), shape_[0], shape_[1]);
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.graph_ = nullptr;
  t.node_ = -1;
  return t;
}

bool Tensor::grad_ready() const {
  return graph_ != nullptr && graph_->ran_backward_ && node_ >= 0 &&
         node_ < static_cast<int>(graph_->nodes_.size()) &&
         graph_->nodes_[static_cast<std::size_t>(node_)].grad.size() == values_->size();
}

std::span<const double> Tensor::grad() const {
  if (!grad_ready()) throw Error("grad: not available (backward has not run over this node)");
  const auto& g = graph_->nodes_[static_cast<std::size_t>(node_)].grad;
  return {g.data(), g.size()};
}

Eigen::VectorXd Tensor::grad_vec() const {
  auto g = grad();
  return Eigen::Map<const Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size()));
}

int Graph::push(Op op, Attrs attrs, Shape shape, std::vector<double> values, int in0, int in1) {
  if (ran_backward_) throw Error("graph: cannot extend a graph after backward");
  if (shape_size(shape) != static_cast<std::int64_t>(values.size()))
    throw Error("graph: internal size mismatch");
  Node n;
  n.op = op;
  n.attrs = std::move(attrs);
  n.shape = std::move(shape);
  n.in = {in0, in1};
  n.n_in = (in1 >= 0) ? 2 : (in0 >= 0 ? 1 : 0);
  n.val = std::make_shared<std::vector<double>>(std::move(values));
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Graph::wrap(int node) {
  Tensor t;
  t.shape_ = nodes_[static_cast<std::size_t>(node)].shape;
  t.values_ = nodes_[static_cast<std::size_t>(node)].val;
  t.graph_ = this;
  t.node_ = node;
  return t;
}

int Graph::node_of(const Tensor& t, const char* op) const {
  if (!t.defined()) throw Error(std::string(op) + ": undefined tensor");
  if (t.graph_ != this)
    throw Error(std::string(op) + ": tensor does not belong to this graph (wrap leaves with input())");
  return t.node_;
}

Tensor Graph::input(const Tensor& t) {
  if (!t.defined()) throw Error("input: undefined tensor");
  if (ran_backward_) throw Error("graph: cannot extend a graph after backward");
  Node n;
  n.op = Op::leaf;
  n.shape = t.shape_;
  n.val = t.values_;  // shared, not copied
  nodes_.push_back(std::move(n));
  return wrap(static_cast<int>(nodes_.size()) - 1);
}

Tensor Graph::input(Shape s, std::vector<double> v) { return input(Tensor::from(std::move(s), std::move(v))); }

Tensor Graph::constant(double v) { return input(Tensor::scalar(v)); }

Tensor Graph::apply(Op op, std::span<const Tensor> inputs, const Attrs& attrs) {
  const char* name = op_name(op);
  auto want = [&](std::size_t k) {
    if (inputs.size() != k)
      throw Error(std::string(name) + ": expected " + std::to_string(k) + " inputs, got " +
                  std::to_string(inputs.size()));
  };
  switch (op) {
    case Op::leaf:
      throw Error("apply: leaf is not an applicable primitive");
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div:
    case Op::matmul:
    case Op::conv2d:
    case Op::conv_transpose2d:
      want(2);
      break;
    default:
      want(1);
      break;
  }

  const int i0 = node_of(inputs[0], name);
  const int i1 = inputs.size() == 2 ? node_of(inputs[1], name) : -1;
  const Shape& sa = nodes_[static_cast<std::size_t>(i0)].shape;
  const std::vector<double>& a = vals(i0);

  switch (op) {
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      const Shape& sb = nodes_[static_cast<std::size_t>(i1)].shape;
      if (sa != sb)
        throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(sa) + " vs " +
                         shape_str(sb));
      const std::vector<double>& b = vals(i1);
      std::vector<double> out(a.size());
      switch (op) {
        case Op::add:
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
          break;
        case Op::sub:
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
          break;
        case Op::mul:
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
          break;
        default:
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / b[i];
          break;
      }
      return wrap(push(op, attrs, sa, std::move(out), i0, i1));
    }

    case Op::matmul: {
      const Shape& sb = nodes_[static_cast<std::size_t>(i1)].shape;
      if (sa.size() != 2 || sb.size() != 2)
        throw ShapeError(std::string("matmul: rank-2 operands required, got ") + shape_str(sa) +
                         " and " + shape_str(sb));
      const std::int64_t m = attrs.trans_a ? sa[1] : sa[0];
      const std::int64_t ka = attrs.trans_a ? sa[0] : sa[1];
      const std::int64_t kb = attrs.trans_b ? sb[1] : sb[0];
      const std::int64_t nn = attrs.trans_b ? sb[0] : sb[1];
      if (ka != kb)
        throw ShapeError("matmul: inner dimension mismatch " + shape_str(sa) +
                         (attrs.trans_a ? "^T" : "") + " x " + shape_str(sb) +
                         (attrs.trans_b ? "^T" : ""));
      std::vector<double> out(static_cast<std::size_t>(m * nn));
      CRowMap A(a.data(), sa[0], sa[1]);
      CRowMap B(vals(i1).data(), sb[0], sb[1]);
      RowMap C(out.data(), m, nn);
      if (!attrs.trans_a && !attrs.trans_b)
        C.noalias() = A * B;
      else if (!attrs.trans_a && attrs.trans_b)
        C.noalias() = A * B.transpose();
      else if (attrs.trans_a && !attrs.trans_b)
        C.noalias() = A.transpose() * B;
      else
        C.noalias() = A.transpose() * B.transpose();
      return wrap(push(op, attrs, {m, nn}, std::move(out), i0, i1));
    }

    case Op::conv2d:
    case Op::conv_transpose2d: {
      const Shape& sk = nodes_[static_cast<std::size_t>(i1)].shape;
      if (sa.size() != 4 || sk.size() != 4)
        throw ShapeError(std::string(name) + ": rank-4 input and kernel required, got " +
                         shape_str(sa) + " and " + shape_str(sk));
      if (sa[1] != sk[1])
        throw ShapeError(std::string(name) + ": input channels " + shape_str(sa) +
                         " do not match kernel " + shape_str(sk));
      const std::vector<double>& k = vals(i1);
      if (op == Op::conv2d) {
        ConvDims d = conv_dims(sa[0], sa[1], sa[2], sa[3], sk[0], sk[2], sk[3], attrs.stride,
                               attrs.pad, name);
        std::vector<double> out(static_cast<std::size_t>(d.n * d.co * d.ho * d.wo));
        conv_fwd(d, a.data(), k.data(), false, out.data());
        return wrap(push(op, attrs, {d.n, d.co, d.ho, d.wo}, std::move(out), i0, i1));
      }
      // Transposed direction: the input is the small side; kernel extents are
      // [own_out, own_in, kh, kw] so the big side carries sk[0] channels.
      const std::int64_t h = (sa[2] - 1) * attrs.stride - 2 * attrs.pad + sk[2];
      const std::int64_t w = (sa[3] - 1) * attrs.stride - 2 * attrs.pad + sk[3];
      if (h <= 0 || w <= 0)
        throw ShapeError(std::string(name) + ": degenerate output for input " + shape_str(sa));
      ConvDims d = conv_dims(sa[0], sk[0], h, w, sa[1], sk[2], sk[3], attrs.stride, attrs.pad, name);
      std::vector<double> out(static_cast<std::size_t>(d.n * d.ci * d.h * d.w));
      conv_adj(d, a.data(), k.data(), true, out.data());
      return wrap(push(op, attrs, {d.n, d.ci, d.h, d.w}, std::move(out), i0, i1));
    }

    case Op::leaky_relu: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] >= 0.0 ? a[i] : attrs.alpha * a[i];
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::sigmoid: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = stable_sigmoid(a[i]);
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::log: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (!(a[i] > 0.0))
          throw DomainError("log: non-positive input " + std::to_string(a[i]) + " at index " +
                            std::to_string(i));
        out[i] = std::log(a[i]);
      }
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::exp: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::exp(a[i]);
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::sqrt: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] < 0.0)
          throw DomainError("sqrt: negative input " + std::to_string(a[i]) + " at index " +
                            std::to_string(i));
        out[i] = std::sqrt(a[i]);
      }
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::square: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * a[i];
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::abs: {
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::fabs(a[i]);
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }
    case Op::clamp: {
      if (!(attrs.lo <= attrs.hi)) throw Error("clamp: lo > hi");
      std::vector<double> out(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::min(std::max(a[i], attrs.lo), attrs.hi);
      return wrap(push(op, attrs, sa, std::move(out), i0, -1));
    }

    case Op::mean:
    case Op::sum: {
      if (attrs.axis == kAllAxes) {
        double acc = 0.0;
        for (double v : a) acc += v;
        if (op == Op::mean) acc /= static_cast<double>(a.size());
        return wrap(push(op, attrs, {}, {acc}, i0, -1));
      }
      const int axis = checked_axis(sa, attrs.axis, name);
      const AxisSplit sp = split_axis(sa, axis);
      std::vector<double> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i)
            out[static_cast<std::size_t>(o * sp.inner + i)] +=
                a[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)];
      if (op == Op::mean)
        for (double& v : out) v /= static_cast<double>(sp.n);
      return wrap(push(op, attrs, drop_axis(sa, axis), std::move(out), i0, -1));
    }

    case Op::variance: {
      const int axis = checked_axis(sa, attrs.axis, name);
      if (attrs.ddof != 0 && attrs.ddof != 1) throw Error("variance: divisor must be N or N-1");
      const AxisSplit sp = split_axis(sa, axis);
      const std::int64_t div = sp.n - attrs.ddof;
      if (div <= 0)
        throw ShapeError("variance: axis extent " + std::to_string(sp.n) +
                         " too small for divisor N-" + std::to_string(attrs.ddof));
      const std::size_t cols = static_cast<std::size_t>(sp.outer * sp.inner);
      std::vector<double> mu(cols, 0.0), out(cols, 0.0);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i)
            mu[static_cast<std::size_t>(o * sp.inner + i)] +=
                a[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)];
      for (double& v : mu) v /= static_cast<double>(sp.n);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i) {
            const double dv = a[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)] -
                              mu[static_cast<std::size_t>(o * sp.inner + i)];
            out[static_cast<std::size_t>(o * sp.inner + i)] += dv * dv;
          }
      for (double& v : out) v /= static_cast<double>(div);
      return wrap(push(op, attrs, drop_axis(sa, axis), std::move(out), i0, -1));
    }

    case Op::l2norm: {
      const int axis = checked_axis(sa, attrs.axis, name);
      const AxisSplit sp = split_axis(sa, axis);
      std::vector<double> out(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i) {
            const double v = a[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)];
            out[static_cast<std::size_t>(o * sp.inner + i)] += v * v;
          }
      for (double& v : out) v = std::sqrt(v);
      return wrap(push(op, attrs, drop_axis(sa, axis), std::move(out), i0, -1));
    }

    case Op::reshape: {
      if (shape_size(attrs.target) != shape_size(sa))
        throw ShapeError("reshape: cannot view " + shape_str(sa) + " as " + shape_str(attrs.target));
      return wrap(push(op, attrs, attrs.target, a, i0, -1));
    }

    case Op::broadcast: {
      const auto bst = broadcast_strides(sa, attrs.target, name);
      const auto tst = row_strides(attrs.target);
      const std::int64_t n = shape_size(attrs.target);
      std::vector<double> out(static_cast<std::size_t>(n));
      for (std::int64_t idx = 0; idx < n; ++idx) {
        std::int64_t rem = idx, src = 0;
        for (std::size_t dim = 0; dim < attrs.target.size(); ++dim) {
          const std::int64_t c = rem / tst[dim];
          rem -= c * tst[dim];
          src += c * bst[dim];
        }
        out[static_cast<std::size_t>(idx)] = a[static_cast<std::size_t>(src)];
      }
      return wrap(push(op, attrs, attrs.target, std::move(out), i0, -1));
    }

    case Op::leaf:
      break;
  }
  throw Error(std::string("apply: unhandled op ") + name);
}

Tensor Graph::add(const Tensor& a, const Tensor& b) { return apply(Op::add, {{a, b}}); }
Tensor Graph::sub(const Tensor& a, const Tensor& b) { return apply(Op::sub, {{a, b}}); }
Tensor Graph::mul(const Tensor& a, const Tensor& b) { return apply(Op::mul, {{a, b}}); }
Tensor Graph::div(const Tensor& a, const Tensor& b) { return apply(Op::div, {{a, b}}); }

Tensor Graph::matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  Attrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return apply(Op::matmul, {{a, b}}, at);
}

Tensor Graph::conv2d(const Tensor& x, const Tensor& k, std::int64_t stride, std::int64_t pad) {
  Attrs at;
  at.stride = stride;
  at.pad = pad;
  return apply(Op::conv2d, {{x, k}}, at);
}

Tensor Graph::conv_transpose2d(const Tensor& x, const Tensor& k, std::int64_t stride, std::int64_t pad) {
  Attrs at;
  at.stride = stride;
  at.pad = pad;
  return apply(Op::conv_transpose2d, {{x, k}}, at);
}

Tensor Graph::leaky_relu(const Tensor& x, double alpha) {
  Attrs at;
  at.alpha = alpha;
  return apply(Op::leaky_relu, {{x}}, at);
}

Tensor Graph::sigmoid(const Tensor& x) { return apply(Op::sigmoid, {{x}}); }
Tensor Graph::log(const Tensor& x) { return apply(Op::log, {{x}}); }
Tensor Graph::exp(const Tensor& x) { return apply(Op::exp, {{x}}); }
Tensor Graph::sqrt(const Tensor& x) { return apply(Op::sqrt, {{x}}); }
Tensor Graph::square(const Tensor& x) { return apply(Op::square, {{x}}); }
Tensor Graph::abs(const Tensor& x) { return apply(Op::abs, {{x}}); }

Tensor Graph::clamp(const Tensor& x, double lo, double hi) {
  Attrs at;
  at.lo = lo;
  at.hi = hi;
  return apply(Op::clamp, {{x}}, at);
}

Tensor Graph::mean(const Tensor& x, int axis) {
  Attrs at;
  at.axis = axis;
  return apply(Op::mean, {{x}}, at);
}

Tensor Graph::sum(const Tensor& x, int axis) {
  Attrs at;
  at.axis = axis;
  return apply(Op::sum, {{x}}, at);
}

Tensor Graph::variance(const Tensor& x, int axis, int ddof) {
  Attrs at;
  at.axis = axis;
  at.ddof = ddof;
  return apply(Op::variance, {{x}}, at);
}

Tensor Graph::l2norm(const Tensor& x, int axis) {
  Attrs at;
  at.axis = axis;
  return apply(Op::l2norm, {{x}}, at);
}

Tensor Graph::reshape(const Tensor& x, Shape target) {
  Attrs at;
  at.target = std::move(target);
  return apply(Op::reshape, {{x}}, at);
}

Tensor Graph::broadcast(const Tensor& x, Shape target) {
  Attrs at;
  at.target = std::move(target);
  return apply(Op::broadcast, {{x}}, at);
}

Tensor Graph::scale(const Tensor& x, double c) {
  return mul(x, broadcast(constant(c), x.shape()));
}

Tensor Graph::shift(const Tensor& x, double c) {
  return add(x, broadcast(constant(c), x.shape()));
}

void Graph::backward(const Tensor& out) {
  const int root = node_of(out, "backward");
  if (out.size() != 1)
    throw ShapeError("backward: output must be scalar, got " + shape_str(out.shape()));
  if (ran_backward_) throw Error("backward: already ran on this graph");
  for (int i = 0; i <= root; ++i)
    nodes_[static_cast<std::size_t>(i)].grad.assign(nodes_[static_cast<std::size_t>(i)].val->size(), 0.0);
  nodes_[static_cast<std::size_t>(root)].grad[0] = 1.0;
  for (int i = root; i >= 0; --i) backward_node(i);
  ran_backward_ = true;
}

void Graph::backward_node(int ni) {
  Node& n = nodes_[static_cast<std::size_t>(ni)];
  if (n.op == Op::leaf) return;
  const std::vector<double>& g = n.grad;
  const std::vector<double>& a = vals(n.in[0]);
  std::vector<double>& ga = nodes_[static_cast<std::size_t>(n.in[0])].grad;

  switch (n.op) {
    case Op::add: {
      std::vector<double>& gb = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
      return;
    }
    case Op::sub: {
      std::vector<double>& gb = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
      return;
    }
    case Op::mul: {
      const std::vector<double>& b = vals(n.in[1]);
      std::vector<double>& gb = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * b[i];
        gb[i] += g[i] * a[i];
      }
      return;
    }
    case Op::div: {
      const std::vector<double>& b = vals(n.in[1]);
      const std::vector<double>& y = *n.val;
      std::vector<double>& gb = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] / b[i];
        gb[i] -= g[i] * y[i] / b[i];
      }
      return;
    }

    case Op::matmul: {
      const Shape& sa = nodes_[static_cast<std::size_t>(n.in[0])].shape;
      const Shape& sb = nodes_[static_cast<std::size_t>(n.in[1])].shape;
      const std::vector<double>& b = vals(n.in[1]);
      std::vector<double>& gb = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      CRowMap A(a.data(), sa[0], sa[1]);
      CRowMap B(b.data(), sb[0], sb[1]);
      CRowMap G(g.data(), n.shape[0], n.shape[1]);
      RowMap GA(ga.data(), sa[0], sa[1]);
      RowMap GB(gb.data(), sb[0], sb[1]);
      const bool ta = n.attrs.trans_a, tb = n.attrs.trans_b;
      if (!ta)
        GA.noalias() += tb ? (G * B).eval() : (G * B.transpose()).eval();
      else
        GA.noalias() += tb ? (B.transpose() * G.transpose()).eval() : (B * G.transpose()).eval();
      if (!tb)
        GB.noalias() += ta ? (A * G).eval() : (A.transpose() * G).eval();
      else
        GB.noalias() += ta ? (G.transpose() * A.transpose()).eval() : (G.transpose() * A).eval();
      return;
    }

    case Op::conv2d: {
      const Shape& sx = nodes_[static_cast<std::size_t>(n.in[0])].shape;
      const Shape& sk = nodes_[static_cast<std::size_t>(n.in[1])].shape;
      const std::vector<double>& k = vals(n.in[1]);
      std::vector<double>& gk = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      ConvDims d = conv_dims(sx[0], sx[1], sx[2], sx[3], sk[0], sk[2], sk[3], n.attrs.stride,
                             n.attrs.pad, "conv2d");
      std::vector<double> dx(a.size());
      conv_adj(d, g.data(), k.data(), false, dx.data());
      for (std::size_t i = 0; i < dx.size(); ++i) ga[i] += dx[i];
      std::vector<double> dk(k.size());
      conv_kgrad(d, a.data(), g.data(), false, dk.data());
      for (std::size_t i = 0; i < dk.size(); ++i) gk[i] += dk[i];
      return;
    }

    case Op::conv_transpose2d: {
      const Shape& sk = nodes_[static_cast<std::size_t>(n.in[1])].shape;
      const std::vector<double>& k = vals(n.in[1]);
      std::vector<double>& gk = nodes_[static_cast<std::size_t>(n.in[1])].grad;
      // Output shape is the big side, input the small side.
      ConvDims d = conv_dims(n.shape[0], n.shape[1], n.shape[2], n.shape[3], sk[1], sk[2], sk[3],
                             n.attrs.stride, n.attrs.pad, "conv_transpose2d");
      std::vector<double> dx(a.size());
      conv_fwd(d, g.data(), k.data(), true, dx.data());
      for (std::size_t i = 0; i < dx.size(); ++i) ga[i] += dx[i];
      std::vector<double> dk(k.size());
      conv_kgrad(d, g.data(), a.data(), true, dk.data());
      for (std::size_t i = 0; i < dk.size(); ++i) gk[i] += dk[i];
      return;
    }

    case Op::leaky_relu:
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (a[i] >= 0.0 ? 1.0 : n.attrs.alpha);
      return;
    case Op::sigmoid: {
      const std::vector<double>& y = *n.val;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
      return;
    }
    case Op::log:
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[i];
      return;
    case Op::exp: {
      const std::vector<double>& y = *n.val;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      return;
    }
    case Op::sqrt: {
      const std::vector<double>& y = *n.val;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / y[i];
      return;
    }
    case Op::square:
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 2.0 * a[i];
      return;
    case Op::abs:
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += g[i] * (a[i] > 0.0 ? 1.0 : (a[i] < 0.0 ? -1.0 : 0.0));
      return;
    case Op::clamp:
      for (std::size_t i = 0; i < g.size(); ++i)
        ga[i] += (a[i] >= n.attrs.lo && a[i] <= n.attrs.hi) ? g[i] : 0.0;
      return;

    case Op::mean:
    case Op::sum: {
      const Shape& sa = nodes_[static_cast<std::size_t>(n.in[0])].shape;
      if (n.attrs.axis == kAllAxes) {
        const double w = n.op == Op::mean ? g[0] / static_cast<double>(a.size()) : g[0];
        for (std::size_t i = 0; i < a.size(); ++i) ga[i] += w;
        return;
      }
      const AxisSplit sp = split_axis(sa, n.attrs.axis);
      const double scl = n.op == Op::mean ? 1.0 / static_cast<double>(sp.n) : 1.0;
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i)
            ga[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)] +=
                scl * g[static_cast<std::size_t>(o * sp.inner + i)];
      return;
    }

    case Op::variance: {
      const Shape& sa = nodes_[static_cast<std::size_t>(n.in[0])].shape;
      const AxisSplit sp = split_axis(sa, n.attrs.axis);
      const double div = static_cast<double>(sp.n - n.attrs.ddof);
      std::vector<double> mu(static_cast<std::size_t>(sp.outer * sp.inner), 0.0);
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i)
            mu[static_cast<std::size_t>(o * sp.inner + i)] +=
                a[static_cast<std::size_t>((o * sp.n + j) * sp.inner + i)];
      for (double& v : mu) v /= static_cast<double>(sp.n);
      // d var_j / d x_kj = 2 (x_kj - mu_j) / div; the mean term drops out
      // because centered values sum to zero.
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::size_t xi = static_cast<std::size_t>((o * sp.n + j) * sp.inner + i);
            const std::size_t oi = static_cast<std::size_t>(o * sp.inner + i);
            ga[xi] += g[oi] * 2.0 * (a[xi] - mu[oi]) / div;
          }
      return;
    }

    case Op::l2norm: {
      const Shape& sa = nodes_[static_cast<std::size_t>(n.in[0])].shape;
      const AxisSplit sp = split_axis(sa, n.attrs.axis);
      const std::vector<double>& y = *n.val;
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t j = 0; j < sp.n; ++j)
          for (std::int64_t i = 0; i < sp.inner; ++i) {
            const std::size_t xi = static_cast<std::size_t>((o * sp.n + j) * sp.inner + i);
            const std::size_t oi = static_cast<std::size_t>(o * sp.inner + i);
            if (y[oi] > 0.0) ga[xi] += g[oi] * a[xi] / y[oi];
          }
      return;
    }

    case Op::reshape:
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      return;

    case Op::broadcast: {
      const Shape& sa = nodes_[static_cast<std::size_t>(n.in[0])].shape;
      const auto bst = broadcast_strides(sa, n.attrs.target, "broadcast");
      const auto tst = row_strides(n.attrs.target);
      const std::int64_t total = shape_size(n.attrs.target);
      for (std::int64_t idx = 0; idx < total; ++idx) {
        std::int64_t rem = idx, src = 0;
        for (std::size_t dim = 0; dim < n.attrs.target.size(); ++dim) {
          const std::int64_t c = rem / tst[dim];
          rem -= c * tst[dim];
          src += c * bst[dim];
        }
        ga[static_cast<std::size_t>(src)] += g[static_cast<std::size_t>(idx)];
      }
      return;
    }

    case Op::leaf:
      return;
    default:
      throw Error(std::string("backward: unhandled op ") + op_name(n.op));
  }
}

FdReport finite_difference_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                                 const Tensor& x0, double h) {
  const std::vector<double> base(x0.data().begin(), x0.data().end());
  const Shape shape = x0.shape();

  auto eval = [&](const std::vector<double>& v) {
    Graph g;
    Tensor x = g.input(shape, v);
    Tensor y = f(g, x);
    if (y.size() != 1)
      throw ShapeError("finite_difference_check: f produced shape " + shape_str(y.shape()));
    const double out = y.item();
    if (!std::isfinite(out))
      throw DomainError("finite_difference_check: non-finite objective " + std::to_string(out));
    return out;
  };

  Graph g;
  Tensor x = g.input(shape, base);
  Tensor y = f(g, x);
  if (y.size() != 1)
    throw ShapeError("finite_difference_check: f produced shape " + shape_str(y.shape()));
  if (!std::isfinite(y.item()))
    throw DomainError("finite_difference_check: non-finite objective " + std::to_string(y.item()));
  g.backward(y);
  const Eigen::VectorXd ad = x.grad_vec();

  FdReport rep;
  std::vector<double> probe = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    probe[i] = base[i] + h;
    const double fp = eval(probe);
    probe[i] = base[i] - h;
    const double fm = eval(probe);
    probe[i] = base[i];
    const double fd = (fp - fm) / (2.0 * h);
    const double a = ad[static_cast<Eigen::Index>(i)];
    const double abs_err = std::fabs(a - fd);
    const double rel = abs_err / std::max(std::max(std::fabs(a), std::fabs(fd)), 1e-12);
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.argmax = static_cast<std::int64_t>(i);
    }
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
  }
  return rep;
}

}  // namespace lv
