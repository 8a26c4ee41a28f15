// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with a define-by-run reverse-mode gradient tape.
//
// Every op returns a fresh node; inputs are never mutated. A node records its
// parents and a backward closure only when at least one parent requires a
// gradient, so graphs built purely from frozen tensors cost nothing extra.
// Leaves created with trainable=true are the only nodes whose gradients
// survive a backward() call.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vitro {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows in
  bool trainable = false;
  bool requires_grad = false;
  std::uint64_t tape_id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
  bool is_leaf() const { return parents.empty() && !backward; }
};

}  // namespace detail

class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool trainable = false);
  static Tensor full(Shape shape, double value, bool trainable = false);
  static Tensor from(Shape shape, std::vector<double> values, bool trainable = false);
  static Tensor scalar(double value, bool trainable = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  // Row/column view of a rank-1 or rank-2 tensor; rank-1 is one row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  // Writable access for initialisation and optimizer updates on leaves.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();

  bool trainable() const { return node_->trainable; }
  void set_trainable(bool trainable);
  bool requires_grad() const { return node_->requires_grad; }
  std::uint64_t tape_id() const { return node_->tape_id; }

  // Copy of the values as a new frozen leaf, detached from any tape.
  Tensor detach() const;
  // Deep copy preserving the trainable flag, without gradient or history.
  Tensor clone() const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Reverse pass from a scalar. Gradients accumulate into trainable leaves;
// intermediate gradients and the recorded history are released afterwards.
void backward(const Tensor& loss);

// [m x k] * [k x p]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m x k] * [p x k]^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x * W^T + b for W [out x in], b [out]; x is [m x in] or a rank-1 [in].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor transpose(const Tensor& a);

// Same shape, or b a row vector ([n] or [1 x n]) broadcast over rows of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// Adds b[i] to every entry of row i of a [m x n], b [m].
Tensor add_per_row(const Tensor& a, const Tensor& b);

Tensor gelu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Rank-2 concat along axis 0 (rows) or 1 (cols). Rank-1 parts count as one row.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);
// Row lookup; backward scatter-adds so repeated indices accumulate.
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// Which keys a query may attend to. Default: every key (no mask).
struct AttentionMask {
  bool causal = false;
  // Keys flagged here are visible to every query even under causal masking.
  std::vector<bool> always_visible;

  bool allows(std::size_t query, std::size_t key) const {
    if (!causal || key <= query) return true;
    return key < always_visible.size() && always_visible[key];
  }
};

struct AttentionResult {
  Tensor output;                 // [Lq x D]
  std::vector<double> weights;   // [heads x Lq x Lk], detached
};

// Scaled dot-product attention with `heads` column blocks of width D/heads:
// softmax(Q_h K_h^T / sqrt(D/heads)) V_h, blocks concatenated back to D.
AttentionResult multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, const AttentionMask& mask = {});

}  // namespace vitro
