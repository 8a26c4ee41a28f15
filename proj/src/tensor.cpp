// SPDX-License-Identifier: Apache-2.0
#include "vitro/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "vitro/error.hpp"

namespace vitro {

namespace {

std::atomic<std::uint64_t> next_tape_id{1};

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->tape_id = next_tape_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Wraps a forward result. History is only kept when some input needs a
// gradient; otherwise the result is a plain constant.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  bool needs = false;
  for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->parents.push_back(t->node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = new_node(std::move(shape), std::move(data));
  bool needs = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
  }
}

bool is_row_vector(const Tensor& b, std::size_t cols) {
  return (b.rank() == 1 && b.shape()[0] == cols) || (b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == cols);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor() : node_(new_node({}, {0.0})) {}

Tensor Tensor::zeros(Shape shape, bool trainable) { return full(std::move(shape), 0.0, trainable); }

Tensor Tensor::full(Shape shape, double value, bool trainable) {
  std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), trainable);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool trainable) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  Tensor t(new_node(std::move(shape), std::move(values)));
  t.set_trainable(trainable);
  return t;
}

Tensor Tensor::scalar(double value, bool trainable) { return from({}, {value}, trainable); }

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() == 2) return shape()[0];
  throw DimensionError("rows(): expected rank 1 or 2, got " + shape_str(shape()));
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape()[0];
  if (rank() == 2) return shape()[1];
  throw DimensionError("cols(): expected rank 1 or 2, got " + shape_str(shape()));
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::set_trainable(bool trainable) {
  if (!node_->is_leaf()) throw ContractError("set_trainable() on a non-leaf tensor");
  node_->trainable = trainable;
  node_->requires_grad = trainable;
  if (!trainable) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, node_->data)); }

Tensor Tensor::clone() const {
  Tensor t(new_node(node_->shape, node_->data));
  t.set_trainable(node_->trainable);
  return t;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS yields a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  for (Node* node : order) {
    if (node->is_leaf()) continue;
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->backward = nullptr;
    node->parents.clear();
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dims differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<double> out(m * p, 0.0);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = A[i * k + kk];
      if (av == 0.0) continue;
      const double* brow = B + kk * p;
      for (std::size_t j = 0; j < p; ++j) row[j] += av * brow[j];
    }
  }
  return make_result({m, p}, std::move(out), {&a, &b}, [m, k, p](Node& self) {
    const double* G = self.grad.data();
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      const double* B = nb.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (std::size_t j = 0; j < p; ++j) acc += G[i * p + j] * B[kk * p + j];
          ga[i * k + kk] += acc;
        }
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      const double* A = na.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const double av = A[i * k + kk];
          if (av == 0.0) continue;
          double* grow = gb.data() + kk * p;
          for (std::size_t j = 0; j < p; ++j) grow[j] += av * G[i * p + j];
        }
      }
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: inner dims differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) +
                         "^T");
  }
  std::vector<double> out(m * p);
  const double* A = a.data().data();
  const double* B = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += A[i * k + kk] * B[j * k + kk];
      out[i * p + j] = acc;
    }
  }
  return make_result({m, p}, std::move(out), {&a, &b}, [m, k, p](Node& self) {
    const double* G = self.grad.data();
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      const double* B = nb.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
          const double g = G[i * p + j];
          if (g == 0.0) continue;
          for (std::size_t kk = 0; kk < k; ++kk) ga[i * k + kk] += g * B[j * k + kk];
        }
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      const double* A = na.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < p; ++j) {
          const double g = G[i * p + j];
          if (g == 0.0) continue;
          for (std::size_t kk = 0; kk < k; ++kk) gb[j * k + kk] += g * A[i * k + kk];
        }
      }
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank2(weight, "linear");
  const std::size_t out_dim = weight.shape()[0], in_dim = weight.shape()[1];
  if (x.rank() != 1 && x.rank() != 2) throw DimensionError("linear: input must be rank 1 or 2");
  if (x.cols() != in_dim) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  if (bias.numel() != out_dim || bias.rank() > 2) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t m = x.rows();
  std::vector<double> out(m * out_dim);
  const double* X = x.data().data();
  const double* W = weight.data().data();
  const double* B = bias.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = B[o];
      for (std::size_t j = 0; j < in_dim; ++j) acc += X[i * in_dim + j] * W[o * in_dim + j];
      out[i * out_dim + o] = acc;
    }
  }
  Shape shape = x.rank() == 1 ? Shape{out_dim} : Shape{m, out_dim};
  return make_result(std::move(shape), std::move(out), {&x, &weight, &bias}, [m, in_dim, out_dim](Node& self) {
    const double* G = self.grad.data();
    Node& nx = *self.parents[0];
    Node& nw = *self.parents[1];
    Node& nb = *self.parents[2];
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double g = G[i * out_dim + o];
          if (g == 0.0) continue;
          const double* wrow = nw.data.data() + o * in_dim;
          for (std::size_t j = 0; j < in_dim; ++j) gx[i * in_dim + j] += g * wrow[j];
        }
      }
    }
    if (nw.requires_grad) {
      auto& gw = nw.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double* xrow = nx.data.data() + i * in_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double g = G[i * out_dim + o];
          if (g == 0.0) continue;
          for (std::size_t j = 0; j < in_dim; ++j) gw[o * in_dim + j] += g * xrow[j];
        }
      }
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t o = 0; o < out_dim; ++o) gb[o] += G[i * out_dim + o];
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return make_result({n, m}, std::move(out), {&a}, [m, n](Node& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

namespace {

// Shared by add/sub: out = a + sign * b, with optional row broadcast of b.
Tensor add_signed(const Tensor& a, const Tensor& b, double sign, const char* op) {
  const bool same = a.shape() == b.shape();
  const bool broadcast = !same && (a.rank() == 2) && is_row_vector(b, a.shape()[1]);
  if (!same && !broadcast) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  const std::size_t width = b.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] + sign * b.data()[same ? i : i % width];
  return make_result(a.shape(), std::move(out), {&a, &b}, [n, width, same, sign](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gb[same ? i : i % width] += sign * self.grad[i];
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return add_signed(a, b, 1.0, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return add_signed(a, b, -1.0, "sub"); }

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * nb.data[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gb[i] += self.grad[i] * na.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * factor;
  return make_result(a.shape(), std::move(out), {&a}, [n, factor](Node& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i] * factor;
  });
}

Tensor add_per_row(const Tensor& a, const Tensor& b) {
  require_rank2(a, "add_per_row");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (b.numel() != m || b.rank() > 2) {
    throw DimensionError("add_per_row: bias " + shape_str(b.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [m, n](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    if (na.requires_grad) {
      auto& ga = na.ensure_grad();
      for (std::size_t i = 0; i < m * n; ++i) ga[i] += self.grad[i];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[i] += self.grad[i * n + j];
    }
  });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
  }
  return make_result(a.shape(), std::move(out), {&a}, [n](Node& self) {
    Node& na = *self.parents[0];
    auto& ga = na.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = na.data[i];
      const double u = c * (x + 0.044715 * x * x * x);
      const double t = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
      ga[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* x = a.data().data() + i * n;
    double* y = out.data() + i * n;
    const double mx = *std::max_element(x, x + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make_result(a.shape(), std::move(out), {&a}, [m, n](Node& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = self.data.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[j] * (g[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t m = x.rows(), d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " do not match last dim of " + shape_str(x.shape()));
  }
  std::vector<double> out(m * d);
  auto xhat = std::make_shared<std::vector<double>>(m * d);
  auto rstd = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * r;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gain, &bias}, [m, d, xhat, rstd](Node& self) {
    Node& nx = *self.parents[0];
    Node& ng = *self.parents[1];
    Node& nb = *self.parents[2];
    const double* G = self.grad.data();
    if (ng.requires_grad) {
      auto& gg = ng.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += G[i * d + j] * (*xhat)[i * d + j];
    }
    if (nb.requires_grad) {
      auto& gb = nb.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += G[i * d + j];
    }
    if (nx.requires_grad) {
      auto& gx = nx.ensure_grad();
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t i = 0; i < m; ++i) {
        double mean_g = 0.0, mean_gx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = G[i * d + j] * ng.data[j];
          mean_g += dh;
          mean_gx += dh * (*xhat)[i * d + j];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double dh = G[i * d + j] * ng.data[j];
          gx[i * d + j] += (*rstd)[i] * (dh - mean_g - (*xhat)[i * d + j] * mean_gx);
        }
      }
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  for (const Tensor& p : parts) {
    if (p.rank() != 1 && p.rank() != 2) throw DimensionError("concat: inputs must be rank 1 or 2");
  }
  std::vector<std::size_t> offsets;  // rows (axis 0) or columns (axis 1) before each part
  std::size_t rows = 0, cols = 0;
  if (axis == 0) {
    cols = parts[0].cols();
    for (const Tensor& p : parts) {
      if (p.cols() != cols) {
        throw DimensionError("concat(axis=0): column mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
      }
      offsets.push_back(rows);
      rows += p.rows();
    }
  } else {
    rows = parts[0].rows();
    for (const Tensor& p : parts) {
      if (p.rows() != rows) {
        throw DimensionError("concat(axis=1): row mismatch " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
      }
      offsets.push_back(cols);
      cols += p.cols();
    }
  }
  std::vector<double> out(rows * cols);
  for (std::size_t idx = 0; idx < parts.size(); ++idx) {
    const Tensor& p = parts[idx];
    const std::size_t pr = p.rows(), pc = p.cols();
    for (std::size_t i = 0; i < pr; ++i) {
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t r = axis == 0 ? offsets[idx] + i : i;
        const std::size_t c = axis == 0 ? j : offsets[idx] + j;
        out[r * cols + c] = p.data()[i * pc + j];
      }
    }
  }
  return make_result({rows, cols}, std::move(out), parts, [offsets, axis, cols](Node& self) {
    for (std::size_t idx = 0; idx < self.parents.size(); ++idx) {
      Node& np = *self.parents[idx];
      if (!np.requires_grad) continue;
      auto& gp = np.ensure_grad();
      const std::size_t pr = np.shape.size() == 1 ? 1 : np.shape[0];
      const std::size_t pc = np.shape.back();
      for (std::size_t i = 0; i < pr; ++i) {
        for (std::size_t j = 0; j < pc; ++j) {
          const std::size_t r = axis == 0 ? offsets[idx] + i : i;
          const std::size_t c = axis == 0 ? j : offsets[idx] + j;
          gp[i * pc + j] += self.grad[r * cols + c];
        }
      }
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  const std::size_t n = a.shape()[1];
  if (begin > end || end > a.shape()[0]) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_result({end - begin, n}, std::move(out), {&a}, [begin, n](Node& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[begin * n + i] += self.grad[i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_rank2(table, "gather_rows");
  const std::size_t rows = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw LookupError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " +
                        shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d, out.begin() +
                static_cast<std::ptrdiff_t>(i * d));
  }
  const std::size_t count = idx.size();
  return make_result({count, d}, std::move(out), {&table}, [idx = std::move(idx), d](Node& self) {
    auto& gt = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[idx[i] * d + j] += self.grad[i * d + j];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {&a}, [](Node& self) {
    auto& ga = self.parents[0]->ensure_grad();
    for (double& g : ga) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  if (pred.numel() != target.numel()) {
    throw DimensionError("mse_loss: length mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  const std::size_t n = pred.numel();
  if (n == 0) throw DimensionError("mse_loss: empty input");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred.data()[i] - target.data()[i];
    acc += e * e;
  }
  return make_result({}, {acc / static_cast<double>(n)}, {&pred, &target}, [n](Node& self) {
    Node& np = *self.parents[0];
    Node& nt = *self.parents[1];
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    if (np.requires_grad) {
      auto& gp = np.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gp[i] += k * (np.data[i] - nt.data[i]);
    }
    if (nt.requires_grad) {
      auto& gt = nt.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) gt[i] -= k * (np.data[i] - nt.data[i]);
    }
  });
}

AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                     const AttentionMask& mask) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t lq = q.shape()[0], lk = k.shape()[0], dim = q.shape()[1];
  if (k.shape()[1] != dim || v.shape()[1] != dim || v.shape()[0] != lk) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                         shape_str(v.shape()) + " are inconsistent");
  }
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(dim));
  }
  const std::size_t dh = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  auto weights = std::make_shared<std::vector<double>>(heads * lq * lk, 0.0);
  std::vector<double> out(lq * dim, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  std::vector<double> scores(lk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < lq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.allows(i, j)) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * dim + off + c] * K[j * dim + off + c];
        scores[j] = s * inv_sqrt;
        mx = std::max(mx, scores[j]);
      }
      double* w = weights->data() + (h * lq + i) * lk;
      double z = 0.0;
      for (std::size_t j = 0; j < lk; ++j) {
        if (!mask.allows(i, j)) continue;
        w[j] = std::exp(scores[j] - mx);
        z += w[j];
      }
      if (z == 0.0) continue;
      for (std::size_t j = 0; j < lk; ++j) w[j] /= z;
      double* o = out.data() + i * dim + off;
      for (std::size_t j = 0; j < lk; ++j) {
        if (w[j] == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) o[c] += w[j] * V[j * dim + off + c];
      }
    }
  }
  Tensor output = make_result({lq, dim}, std::move(out), {&q, &k, &v}, [=](Node& self) {
    Node& nq = *self.parents[0];
    Node& nk = *self.parents[1];
    Node& nv = *self.parents[2];
    const double* G = self.grad.data();
    std::vector<double> dw(lk);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t i = 0; i < lq; ++i) {
        const double* w = weights->data() + (h * lq + i) * lk;
        const double* g = G + i * dim + off;
        double dot = 0.0;
        for (std::size_t j = 0; j < lk; ++j) {
          double acc = 0.0;
          if (w[j] != 0.0)
            for (std::size_t c = 0; c < dh; ++c) acc += g[c] * nv.data[j * dim + off + c];
          dw[j] = acc;
          dot += w[j] * acc;
        }
        if (nv.requires_grad) {
          auto& gv = nv.ensure_grad();
          for (std::size_t j = 0; j < lk; ++j) {
            if (w[j] == 0.0) continue;
            for (std::size_t c = 0; c < dh; ++c) gv[j * dim + off + c] += w[j] * g[c];
          }
        }
        for (std::size_t j = 0; j < lk; ++j) {
          const double ds = w[j] * (dw[j] - dot) * inv_sqrt;
          if (ds == 0.0) continue;
          if (nq.requires_grad) {
            auto& gq = nq.ensure_grad();
            for (std::size_t c = 0; c < dh; ++c) gq[i * dim + off + c] += ds * nk.data[j * dim + off + c];
          }
          if (nk.requires_grad) {
            auto& gk = nk.ensure_grad();
            for (std::size_t c = 0; c < dh; ++c) gk[j * dim + off + c] += ds * nq.data[i * dim + off + c];
          }
        }
      }
    }
  });
  return {std::move(output), *weights};
}

}  // namespace vitro
