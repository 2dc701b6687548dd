#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace lv {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct DomainError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

enum class Op {
  leaf,
  add,
  sub,
  mul,
  div,
  matmul,
  conv2d,
  conv_transpose2d,
  leaky_relu,
  sigmoid,
  log,
  exp,
  sqrt,
  square,
  abs,
  clamp,
  mean,
  sum,
  variance,
  l2norm,
  reshape,
  broadcast,
};

const char* op_name(Op op);

// Reduce over every axis (mean/sum only).
inline constexpr int kAllAxes = -1;

struct Attrs {
  bool trans_a = false;
  bool trans_b = false;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  double alpha = 0.01;
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();
  int axis = kAllAxes;
  int ddof = 0;
  Shape target;
};

class Graph;

// Shared-storage view of an n-d row-major double array, optionally attached to
// a graph node. Copies alias the same values; detach() drops the graph link
// but keeps the storage shared.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v) { return full({}, v); }
  static Tensor from(Shape s, std::vector<double> v);
  static Tensor from_matrix(const Eigen::MatrixXd& m);
  // Row i of m becomes sample i with the given per-sample shape.
  static Tensor from_rows(const Eigen::MatrixXd& m, const Shape& sample);

  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t size() const;
  bool defined() const { return values_ != nullptr; }

  double item() const;
  std::span<const double> data() const;
  std::span<double> data();
  Eigen::VectorXd vec() const;
  Eigen::MatrixXd mat() const;  // rank 2 only

  bool attached() const { return graph_ != nullptr; }
  Tensor detach() const;

  // Valid after backward() ran on the owning graph.
  bool grad_ready() const;
  std::span<const double> grad() const;
  Eigen::VectorXd grad_vec() const;

 private:
  friend class Graph;
  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

// Append-only tape. Nodes are created in topological order, so reverse-mode
// differentiation is a single reverse sweep with additive fan-out.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Registers a leaf sharing t's storage so parameter updates between steps
  // are visible without copies.
  Tensor input(const Tensor& t);
  Tensor input(Shape s, std::vector<double> v);
  Tensor constant(double v);

  Tensor apply(Op op, std::span<const Tensor> inputs, const Attrs& attrs = {});

  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor div(const Tensor& a, const Tensor& b);
  Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
  Tensor conv2d(const Tensor& x, const Tensor& k, std::int64_t stride, std::int64_t pad);
  Tensor conv_transpose2d(const Tensor& x, const Tensor& k, std::int64_t stride, std::int64_t pad);
  Tensor leaky_relu(const Tensor& x, double alpha);
  Tensor sigmoid(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor exp(const Tensor& x);
  Tensor sqrt(const Tensor& x);
  Tensor square(const Tensor& x);
  Tensor abs(const Tensor& x);
  Tensor clamp(const Tensor& x, double lo, double hi);
  Tensor mean(const Tensor& x, int axis = kAllAxes);
  Tensor sum(const Tensor& x, int axis = kAllAxes);
  Tensor variance(const Tensor& x, int axis, int ddof);
  Tensor l2norm(const Tensor& x, int axis);
  Tensor reshape(const Tensor& x, Shape target);
  Tensor broadcast(const Tensor& x, Shape target);

  // x * c and x + c with c entering as a broadcast constant leaf.
  Tensor scale(const Tensor& x, double c);
  Tensor shift(const Tensor& x, double c);

  void backward(const Tensor& out);
  bool backward_ran() const { return ran_backward_; }

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  friend class Tensor;
  struct Node {
    Op op;
    Attrs attrs;
    Shape shape;
    std::array<int, 2> in{{-1, -1}};
    int n_in = 0;
    std::shared_ptr<std::vector<double>> val;
    std::vector<double> grad;
  };

  int push(Op op, Attrs attrs, Shape shape, std::vector<double> values, int in0, int in1);
  Tensor wrap(int node);
  int node_of(const Tensor& t, const char* op) const;
  void backward_node(int i);
  const std::vector<double>& vals(int node) const { return *nodes_[node].val; }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::int64_t argmax = -1;
};

// Central-difference check of d f / d x at x0. f must build a size-1 output
// from the leaf it is handed. Relative error denominator is clamped at 1e-12.
FdReport finite_difference_check(const std::function<Tensor(Graph&, const Tensor&)>& f,
                                 const Tensor& x0, double h = 1e-5);

}  // namespace lv
