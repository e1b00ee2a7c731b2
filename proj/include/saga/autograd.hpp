#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "saga/tensor.hpp"

namespace saga {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Graph;

// Handle to a node recorded on a Graph.
struct Var {
  Graph* graph = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Tape of recorded operations. Nodes are appended in execution order, so the
// tape order is a topological order and backward walks it in reverse.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self, const Tensor& out_grad)>;

  // With recording disabled no backward closures are kept (inference).
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // A leaf that aliases an external tensor (parameters, corpus data). The
  // tensor must outlive the graph. requires_grad follows the tensor's flag.
  // Repeated calls with the same tensor return the same node.
  Var leaf(const Tensor& t);
  // A leaf owning its value.
  Var input(Tensor t, bool requires_grad = false);
  Var constant(Tensor t) { return input(std::move(t), false); }

  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // Gradient buffer of a node, allocated as zeros on first access.
  Tensor& grad_buffer(Var v);
  // Accumulate into an input's gradient if that input requires grad.
  void accumulate(Var v, const Tensor& g);

  // Reverse-mode pass from a scalar loss.
  void backward(Var loss);
  // Vector-Jacobian pass from an arbitrary output seeded with `seed`.
  void backward(Var output, const Tensor& seed);

  // Gradient of a node (after backward). Throws if the node has none.
  const Tensor& grad(Var v) const;
  // Gradient of an aliased leaf, or nullptr if it was not reached.
  const Tensor* grad_of(const Tensor& leaf_tensor) const;

  void reset_gradients();

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    bool requires_grad = false;
    std::optional<Tensor> grad;
    BackwardFn backward;
  };

  void run_backward(std::uint32_t start);

  bool recording_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;  // deque: value references stay valid while recording
  std::unordered_map<const Tensor*, std::uint32_t> leaf_index_;
};

// Differentiable operations. Shapes are checked eagerly; every failure is a
// DimensionError naming the offending shapes.
namespace ops {

Var matmul(Var a, Var b);     // [m×k]·[k×n]
Var matmul_nt(Var a, Var b);  // [m×k]·[n×k]ᵀ
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var bias);  // [m×n] + [n]
Var sum(Var a);                // scalar
Var mean(Var a);               // scalar
Var mean_rows(Var a);          // [m×n] -> [1×n]
Var reshape(Var a, Shape shape);
Var concat_rows(Var a, Var b);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var gather(Var a, std::vector<std::size_t> flat_indices);  // -> [len]
Var relu(Var a);
Var quick_gelu(Var a);
Var square(Var a);

Var softmax(Var a, std::size_t axis);
Var log_softmax(Var a);  // along the last axis of a rank-2 tensor
Var layer_norm(Var x, Var gamma, Var beta, double eps = kLayerNormEps);
// Row-wise unit normalization (rank-1: the whole vector).
Var l2_normalize(Var x, double eps = kNormEps);
// x / sum(x); degenerate when the sum is not positive.
Var normalize_sum(Var x);

struct MaxResult {
  Var values;
  std::vector<std::size_t> indices;
};
// Max along `axis`; ties resolve to the lowest index, which also receives
// the whole gradient.
MaxResult reduce_max_with_index(Var x, std::size_t axis);

// Feature-wise batch normalization using batch statistics (biased variance).
struct BatchNormResult {
  Var out;
  Tensor batch_mean;
  Tensor batch_var_unbiased;
};
BatchNormResult batch_norm_train(Var x, Var gamma, Var beta, double eps = kLayerNormEps);

// Scaled dot-product attention over `heads` column groups of q [n×D] and
// k, v [m×D]; `mask` [n×m] is added to the logits. Returns the concatenated
// head outputs [n×D], followed by the head-mean attention [n×m] as extra
// columns when keep_attention is set.
Var attention_heads(Var q, Var k, Var v, std::size_t heads, const Tensor* mask,
                    bool keep_attention);

// Pairwise Euclidean distances of rows; zero distance gets zero gradient.
Var pairwise_distances(Var x);

}  // namespace ops

}  // namespace saga
