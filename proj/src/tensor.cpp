#include "setor/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace setor {

namespace {

std::string dims(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

std::string dims_pair(const Matrix& a, const Matrix& b) { return dims(a) + " vs " + dims(b); }

enum class Broadcast { kSame, kRow, kCol, kScalar };

Broadcast broadcast_rule(const std::string& op, const Matrix& a, const Matrix& b) {
  if (a.rows() == b.rows() && a.cols() == b.cols()) return Broadcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Broadcast::kCol;
  throw ShapeError(op, "incompatible operands " + dims_pair(a, b));
}

Matrix expand(const Matrix& b, Broadcast rule, Index rows, Index cols) {
  switch (rule) {
    case Broadcast::kSame:
      return b;
    case Broadcast::kRow:
      return b.replicate(rows, 1);
    case Broadcast::kCol:
      return b.replicate(1, cols);
    case Broadcast::kScalar:
      return Matrix::Constant(rows, cols, b(0, 0));
  }
  return b;
}

Matrix reduce(const Matrix& g, Broadcast rule) {
  switch (rule) {
    case Broadcast::kSame:
      return g;
    case Broadcast::kRow:
      return g.colwise().sum();
    case Broadcast::kCol:
      return g.rowwise().sum();
    case Broadcast::kScalar:
      return Matrix::Constant(1, 1, g.sum());
  }
  return g;
}

bool wants_grad(const NodePtr& n) { return n && n->requires_grad; }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->op = "constant";
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->op = "parameter";
  n->value = std::move(value);
  n->requires_grad = true;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return requires_grad ? parameter(std::move(m)) : constant(std::move(m));
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item", "expected 1x1, got " + dims(value()));
  return value()(0, 0);
}

void Tensor::zero_grad() { node_->grad = Matrix::Zero(rows(), cols()); }

void accumulate_grad(Node& node, const Matrix& delta) {
  if (!node.requires_grad) return;
  if (node.grad.rows() != node.value.rows() || node.grad.cols() != node.value.cols()) {
    node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  }
  node.grad += delta;
}

Tensor make_op(std::string op, Matrix value, std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->op = std::move(op);
  n->value = std::move(value);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const auto& t : inputs) n->inputs.push_back(t.node());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ShapeError("backward", "loss must be 1x1, got " + dims(loss.value()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS yields a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->inputs.empty()) {
      n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    } else if (n->grad.rows() != n->value.rows() || n->grad.cols() != n->value.cols()) {
      n->grad = Matrix::Zero(n->value.rows(), n->value.cols());
    }
  }
  loss.node()->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul", "inner dims " + dims_pair(a.value(), b.value()));
  Matrix out = a.value() * b.value();
  return make_op("matmul", std::move(out), {a, b}, [](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (wants_grad(A)) accumulate_grad(*A, self.grad * B->value.transpose());
    if (wants_grad(B)) accumulate_grad(*B, A->value.transpose() * self.grad);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const Broadcast rule = broadcast_rule("add", a.value(), b.value());
  Matrix out = a.value() + expand(b.value(), rule, a.rows(), a.cols());
  return make_op("add", std::move(out), {a, b}, [rule](Node& self) {
    if (wants_grad(self.inputs[0])) accumulate_grad(*self.inputs[0], self.grad);
    if (wants_grad(self.inputs[1])) accumulate_grad(*self.inputs[1], reduce(self.grad, rule));
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const Broadcast rule = broadcast_rule("sub", a.value(), b.value());
  Matrix out = a.value() - expand(b.value(), rule, a.rows(), a.cols());
  return make_op("sub", std::move(out), {a, b}, [rule](Node& self) {
    if (wants_grad(self.inputs[0])) accumulate_grad(*self.inputs[0], self.grad);
    if (wants_grad(self.inputs[1])) accumulate_grad(*self.inputs[1], -reduce(self.grad, rule));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast rule = broadcast_rule("mul", a.value(), b.value());
  Matrix bx = expand(b.value(), rule, a.rows(), a.cols());
  Matrix out = a.value().cwiseProduct(bx);
  return make_op("mul", std::move(out), {a, b}, [rule, bx = std::move(bx)](Node& self) {
    auto& A = self.inputs[0];
    auto& B = self.inputs[1];
    if (wants_grad(A)) accumulate_grad(*A, self.grad.cwiseProduct(bx));
    if (wants_grad(B)) accumulate_grad(*B, reduce(self.grad.cwiseProduct(A->value), rule));
  });
}

Tensor affine(const Tensor& a, double scale, double shift) {
  Matrix out = (a.value().array() * scale + shift).matrix();
  return make_op("affine", std::move(out), {a}, [scale](Node& self) {
    accumulate_grad(*self.inputs[0], self.grad * scale);
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return make_op("transpose", std::move(out), {a}, [](Node& self) {
    accumulate_grad(*self.inputs[0], self.grad.transpose());
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor tanh(const Tensor& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_op("tanh", std::move(out), {a}, [](Node& self) {
    Matrix d = (1.0 - self.value.array().square()).matrix();
    accumulate_grad(*self.inputs[0], self.grad.cwiseProduct(d));
  });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make_op("relu", std::move(out), {a}, [](Node& self) {
    Matrix d = (self.inputs[0]->value.array() > 0.0).cast<double>().matrix();
    accumulate_grad(*self.inputs[0], self.grad.cwiseProduct(d));
  });
}

Tensor sigmoid(const Tensor& a) {
  Matrix out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_op("sigmoid", std::move(out), {a}, [](Node& self) {
    Matrix d = (self.value.array() * (1.0 - self.value.array())).matrix();
    accumulate_grad(*self.inputs[0], self.grad.cwiseProduct(d));
  });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp().matrix();
  return make_op("exp", std::move(out), {a}, [](Node& self) {
    accumulate_grad(*self.inputs[0], self.grad.cwiseProduct(self.value));
  });
}

Tensor log(const Tensor& a) {
  if ((a.value().array() <= 0.0).any()) throw DomainError("log: nonpositive input");
  Matrix out = a.value().array().log().matrix();
  return make_op("log", std::move(out), {a}, [](Node& self) {
    accumulate_grad(*self.inputs[0], self.grad.cwiseQuotient(self.inputs[0]->value));
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return make_op("clamp", std::move(out), {a}, [lo, hi](Node& self) {
    const auto& x = self.inputs[0]->value.array();
    Matrix pass = ((x >= lo) && (x <= hi)).cast<double>().matrix();
    accumulate_grad(*self.inputs[0], self.grad.cwiseProduct(pass));
  });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_impl(const Tensor& a, const Mask* allowed) {
  const Matrix& x = a.value();
  if (allowed && (allowed->rows() != x.rows() || allowed->cols() != x.cols())) {
    throw ShapeError("softmax_rows", "mask " + std::to_string(allowed->rows()) + "x" +
                                         std::to_string(allowed->cols()) + " vs input " + dims(x));
  }
  Matrix out = Matrix::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < x.cols(); ++c) {
      if (!allowed || (*allowed)(r, c)) mx = std::max(mx, x(r, c));
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ShapeError("softmax_rows", "row " + std::to_string(r) + " has no unmasked entry");
    }
    double total = 0.0;
    for (Index c = 0; c < x.cols(); ++c) {
      if (!allowed || (*allowed)(r, c)) {
        out(r, c) = std::exp(x(r, c) - mx);
        total += out(r, c);
      }
    }
    out.row(r) /= total;
  }
  return make_op("softmax_rows", std::move(out), {a}, [](Node& self) {
    const Matrix& y = self.value;
    Matrix gy = self.grad.cwiseProduct(y);
    Eigen::VectorXd dot = gy.rowwise().sum();
    Matrix dx = gy - y.cwiseProduct(dot.replicate(1, y.cols()));
    accumulate_grad(*self.inputs[0], dx);
  });
}

}  // namespace

Tensor softmax_rows(const Tensor& a) { return softmax_impl(a, nullptr); }
Tensor softmax_rows(const Tensor& a, const Mask& allowed) { return softmax_impl(a, &allowed); }

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols", "no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols", "row mismatch " + dims_pair(parts.front().value(), p.value()));
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat_cols", std::move(out), std::move(inputs), [offsets](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = self.inputs[i];
      if (wants_grad(in)) accumulate_grad(*in, self.grad.middleCols(offsets[i], in->value.cols()));
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows", "no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows", "col mismatch " + dims_pair(parts.front().value(), p.value()));
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Index> offsets;
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    offsets.push_back(at);
    at += p.rows();
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_op("concat_rows", std::move(out), std::move(inputs), [offsets](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = self.inputs[i];
      if (wants_grad(in)) accumulate_grad(*in, self.grad.middleRows(offsets[i], in->value.rows()));
    }
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw ShapeError("slice_cols", "range [" + std::to_string(start) + "," + std::to_string(start + count) +
                                       ") outside " + dims(a.value()));
  }
  Matrix out = a.value().middleCols(start, count);
  return make_op("slice_cols", std::move(out), {a}, [start](Node& self) {
    auto& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    g.middleCols(start, self.value.cols()) = self.grad;
    accumulate_grad(in, g);
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw ShapeError("slice_rows", "range [" + std::to_string(start) + "," + std::to_string(start + count) +
                                       ") outside " + dims(a.value()));
  }
  Matrix out = a.value().middleRows(start, count);
  return make_op("slice_rows", std::move(out), {a}, [start](Node& self) {
    auto& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    g.middleRows(start, self.value.rows()) = self.grad;
    accumulate_grad(in, g);
  });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  Matrix out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw ShapeError("gather_rows", "id " + std::to_string(ids[i]) + " outside table of " +
                                          std::to_string(table.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_op("gather_rows", std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    auto& in = *self.inputs[0];
    if (in.grad.rows() != in.value.rows() || in.grad.cols() != in.value.cols()) {
      in.grad = Matrix::Zero(in.value.rows(), in.value.cols());
    }
    for (std::size_t i = 0; i < idx.size(); ++i) in.grad.row(idx[i]) += self.grad.row(static_cast<Index>(i));
  });
}

Tensor sum(const Tensor& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make_op("sum", std::move(out), {a}, [](Node& self) {
    auto& in = *self.inputs[0];
    accumulate_grad(in, Matrix::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  if (a.value().size() == 0) throw ShapeError("mean", "empty input");
  return affine(sum(a), 1.0 / static_cast<double>(a.value().size()), 0.0);
}

Tensor row_sums(const Tensor& a) {
  Matrix out = a.value().rowwise().sum();
  return make_op("row_sums", std::move(out), {a}, [](Node& self) {
    auto& in = *self.inputs[0];
    accumulate_grad(in, self.grad.replicate(1, in.value.cols()));
  });
}

// ---------------------------------------------------------------------------
// Normalization / dropout
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index rows = x.rows();
  const Index cols = x.cols();
  if (gain.rows() != 1 || gain.cols() != cols || bias.rows() != 1 || bias.cols() != cols) {
    throw ShapeError("layer_norm", "gain/bias must be 1x" + std::to_string(cols) + ", got " +
                                       dims_pair(gain.value(), bias.value()));
  }
  Matrix xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const double mu = x.value().row(r).mean();
    const double var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat.cwiseProduct(gain.value().replicate(rows, 1)) + bias.value().replicate(rows, 1);
  return make_op("layer_norm", std::move(out), {x, gain, bias},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    auto& X = self.inputs[0];
    auto& G = self.inputs[1];
    auto& B = self.inputs[2];
    const Index cols = xhat.cols();
    if (wants_grad(G)) accumulate_grad(*G, self.grad.cwiseProduct(xhat).colwise().sum());
    if (wants_grad(B)) accumulate_grad(*B, self.grad.colwise().sum());
    if (wants_grad(X)) {
      Matrix dxhat = self.grad.cwiseProduct(G->value.replicate(xhat.rows(), 1));
      Matrix dx(xhat.rows(), cols);
      for (Index r = 0; r < xhat.rows(); ++r) {
        const double m1 = dxhat.row(r).mean();
        const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      accumulate_grad(*X, dx);
    }
  });
}

Tensor apply_mask(const Tensor& a, const Matrix& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
    throw ShapeError("apply_mask", dims_pair(a.value(), mask));
  }
  Matrix out = a.value().cwiseProduct(mask);
  return make_op("apply_mask", std::move(out), {a}, [mask](Node& self) {
    accumulate_grad(*self.inputs[0], self.grad.cwiseProduct(mask));
  });
}

Tensor Dropout::operator()(const Tensor& x) const {
  if (!active()) return x;
  std::bernoulli_distribution keep(1.0 - rate_);
  const double scale = 1.0 / (1.0 - rate_);
  Matrix mask(x.rows(), x.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng_) ? scale : 0.0;
  return apply_mask(x, mask);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

std::vector<double> grad_check_each(const std::function<Tensor()>& build_scalar_graph,
                                    std::span<Tensor> params, double fd_step) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = build_scalar_graph();
  backward(loss);

  std::vector<double> errors;
  errors.reserve(params.size());
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    const Matrix analytic = p.has_grad() ? p.grad() : Matrix::Zero(p.rows(), p.cols());
    double worst = 0.0;
    for (Index i = 0; i < p.value().size(); ++i) {
      double& slot = p.mutable_value().data()[i];
      const double saved = slot;
      slot = saved + fd_step;
      const double up = build_scalar_graph().item();
      slot = saved - fd_step;
      const double down = build_scalar_graph().item();
      slot = saved;
      const double fd = (up - down) / (2.0 * fd_step);
      const double an = analytic.data()[i];
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(an)) {
        throw DomainError("grad_check: non-finite value at parameter " + std::to_string(pi) +
                          " entry " + std::to_string(i));
      }
      const double denom = std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, std::abs(an - fd) / denom);
    }
    errors.push_back(worst);
  }
  return errors;
}

double grad_check(const std::function<Tensor()>& build_scalar_graph, std::span<Tensor> params,
                  double fd_step) {
  const auto errors = grad_check_each(build_scalar_graph, params, fd_step);
  double worst = 0.0;
  for (double e : errors) worst = std::max(worst, e);
  return worst;
}

}  // namespace setor
