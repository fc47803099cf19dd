#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace setor {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when operand shapes violate an op's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  ShapeError(const std::string& op, const std::string& detail)
      : std::invalid_argument(op + ": " + detail) {}
};

/// Raised for values outside an op's mathematical domain (log of nonpositive, ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the computation graph. Leaves are parameters or constants.
struct Node {
  std::string op;
  Matrix value;
  Matrix grad;  // empty until a backward pass or zero_grad touches it
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  // Reads this->grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward_fn;
};

/// Shared handle to a graph node. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  // Direct write access; only meaningful on leaves (parameters).
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  std::vector<Index> shape() const { return {rows(), cols()}; }
  double item() const;
  const std::string& op() const { return node_->op; }
  const NodePtr& node() const { return node_; }

  void zero_grad();

 private:
  NodePtr node_;
};

/// Builds a graph node. Custom differentiable ops (the fused ODE solve) use this.
Tensor make_op(std::string op, Matrix value, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn);

/// Adds `delta` into the node's gradient buffer, allocating it on first use.
void accumulate_grad(Node& node, const Matrix& delta);

/// Reverse pass from a 1x1 loss. Leaf grads accumulate across calls.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Differentiable ops. Binary elementwise ops broadcast a 1xC row, an Rx1
// column, or a 1x1 scalar right-hand side.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& a, double scale, double shift);
Tensor transpose(const Tensor& a);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

/// Row-wise softmax. Entries where `allowed` is false get exactly zero weight;
/// a row with no allowed entry is an error.
Tensor softmax_rows(const Tensor& a);
Tensor softmax_rows(const Tensor& a, const Mask& allowed);

Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor row_sums(const Tensor& a);

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise normalization followed by per-column gain and bias (each 1xC).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

/// Multiplies by a pre-sampled mask (entries 0 or 1/(1-rate)).
Tensor apply_mask(const Tensor& a, const Matrix& mask);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

/// Dropout with an explicit RNG; identity when not training or rate is zero.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double rate, bool training, std::mt19937_64* rng)
      : rate_(rate), training_(training), rng_(rng) {}

  Tensor operator()(const Tensor& x) const;
  bool active() const { return training_ && rate_ > 0.0 && rng_ != nullptr; }
  double rate() const { return rate_; }

 private:
  double rate_ = 0.0;
  bool training_ = false;
  std::mt19937_64* rng_ = nullptr;
};

/// Central-difference check of every entry of `params`. The return value is
/// max |analytic - fd| / max(1, |analytic|, |fd|) over all entries.
double grad_check(const std::function<Tensor()>& build_scalar_graph,
                  std::span<Tensor> params, double fd_step);

/// Same as grad_check, one error per parameter tensor.
std::vector<double> grad_check_each(const std::function<Tensor()>& build_scalar_graph,
                                    std::span<Tensor> params, double fd_step);

}  // namespace setor
