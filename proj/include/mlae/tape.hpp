#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mlae/matrix.hpp"

namespace mlae {

class Tape;

/// Handle to a node on a Tape.
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Result of one backward pass. A leaf that the reverse sweep never
/// reached reports an exact-zero gradient of the leaf's shape.
class Gradients {
 public:
  const Matrix& get(Value leaf) const;
  bool reached(Value leaf) const;

 private:
  friend class Tape;
  Gradients(const Tape* tape, std::vector<std::optional<Matrix>> grads);
  const Tape* tape_;
  std::vector<std::optional<Matrix>> grads_;
  mutable std::vector<std::optional<Matrix>> zero_cache_;
};

/// Reverse-mode gradient tape over Matrix values.
///
/// Nodes are recorded in construction order, which is a valid topological
/// order, so backward() is a single reverse sweep. Single-threaded by
/// contract; values are immutable once recorded.
class Tape {
 public:
  // Trainable leaf. Exactly one gradient accumulator per leaf per backward.
  Value param(Matrix m);
  // Frozen leaf; never receives a gradient and never requires one.
  Value constant(Matrix m);

  const Matrix& value(Value v) const;
  bool is_trainable_leaf(Value v) const;
  bool requires_grad(Value v) const;

  Value matmul(Value a, Value b);
  Value add(Value a, Value b);
  // bias is 1 x cols, added to every row of x.
  Value add_row(Value x, Value bias);
  Value scale(Value x, double s);
  // s is a 1x1 node; y = s * x.
  Value scale_by(Value x, Value s);
  // coeffs is 1 x rows(x); row r of the result is coeffs[r] * x[r, :].
  Value row_scale(Value x, Value coeffs);
  // Elementwise product with a frozen matrix (dropout masks and the like).
  Value hadamard_const(Value x, const Matrix& m);
  Value gelu(Value x);
  // Row-wise layer norm with frozen affine parameters (1 x cols each).
  Value layer_norm(Value x, const Matrix& gamma, const Matrix& beta);
  // Fused multi-head self attention. qkv is (batch*tokens) x 3d, packed
  // [Q | K | V] with d the model width; output is (batch*tokens) x d.
  Value attention(Value qkv, int heads, int tokens);
  // (batch*tokens) x d -> batch x d, mean over each sample's tokens.
  Value mean_pool(Value x, int tokens);
  Value softmax_rows(Value x);
  // Mean cross-entropy of row-wise softmax(logits) against labels; 1x1.
  Value cross_entropy_mean(Value logits, const std::vector<int>& labels);
  // Sum of all entries; 1x1.
  Value sum(Value x);

  // Reverse sweep from a scalar loss node. Throws ContractError if the
  // loss is not 1x1.
  Gradients backward(Value loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  friend class Gradients;

  using GradSink = std::vector<std::optional<Matrix>>;
  struct Node {
    Matrix value;
    bool trainable_leaf = false;
    bool requires_grad = false;
    // Accumulates into parent slots of `sink`; null for leaves and for
    // nodes whose inputs are all frozen.
    std::function<void(const Matrix& gout, GradSink& sink, const Tape& tape)> backward;
  };

  Value push(Node node);
  const Node& node(Value v) const;
  void accumulate(GradSink& sink, int id, const Matrix& g) const;
  void accumulate_scaled(GradSink& sink, int id, const Matrix& g, double s) const;

  std::vector<Node> nodes_;
};

}  // namespace mlae
