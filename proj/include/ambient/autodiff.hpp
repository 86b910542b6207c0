#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ambient/tensor.hpp"

namespace ambient {

class Graph;

/// Handle to a node on a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

using GradientMap = std::map<std::string, Tensor>;

/// Ordered tape of primitive ops. Forward ops append nodes; backward() replays
/// them in exact reverse order and may be called once per graph.
class Graph {
 public:
  /// Receives the gradient flowing into the node's output; adds into its
  /// inputs' gradient buffers via Graph::grad().
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  explicit Graph(bool tracing = true) : tracing_(tracing) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool tracing() const noexcept { return tracing_; }

  Var constant(Tensor value);
  /// Leaf whose gradient is reported under `name` by backward().
  Var parameter(std::string name, Tensor value);

  /// Appends an op result. Rejects non-finite outputs.
  Var record(Tensor value, BackwardFn backward, const char* op_name);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  /// Gradient buffer of node `id`, zero-initialised on first access.
  Tensor& grad(std::size_t id);

  std::size_t size() const noexcept { return nodes_.size(); }

  GradientMap backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, std::size_t>> parameters_;
  bool tracing_;
  bool consumed_ = false;
};

enum class NormMode { train, eval };

/// Running statistics of a batch-norm layer. Updated in train mode.
struct BatchNormStats {
  Tensor mean;
  Tensor var;
};

namespace ops {

Var matmul(Var a, Var b);
Var add(Var a, Var b);
/// x[N x M] + bias[M] added to every row.
Var add_bias(Var x, Var bias);
/// x[(B*T) x C] + table[T x C], the table repeated for every sequence.
Var add_positional(Var x, Var table, std::size_t frames);
Var scale(Var x, double factor);
Var sigmoid(Var x);
Var swish(Var x);
/// x[N x 2C] -> first half * sigmoid(second half).
Var glu(Var x);
Var sum(Var x);
/// sum(x * weights) for a constant weight tensor of the same shape.
Var weighted_sum(Var x, const Tensor& weights);

/// Softmax along `axis` (0 or 1) of a 2-D tensor.
Var softmax(Var x, std::size_t axis);

/// Normalises each row over `groups` contiguous channel groups, then applies
/// the per-channel affine. Rows are timesteps.
Var group_norm(Var x, std::size_t groups, Var gamma, Var beta, double eps = 1e-5);
/// group_norm with a single group.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Per-channel normalisation over all rows. In train mode `stats` is updated
/// as stats = (1 - momentum) * stats + momentum * batch_stats (biased variance).
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, NormMode mode,
               double momentum = 0.1, double eps = 1e-5);

/// Depthwise 1-D convolution over time with zero same-padding. `x` stacks
/// sequences of `frames` rows; the kernel is [K x C] with K odd.
Var conv1d_depthwise(Var x, Var kernel, std::size_t frames);
Var conv1d_depthwise(Var x, Var kernel);

/// Scaled dot-product attention over `heads` equal column slices of q/k/v,
/// independently for each sequence of `frames` rows.
Var attention(Var q, Var k, Var v, std::size_t frames, std::size_t heads);

/// Mean over time of each sequence: [(B*T) x C] -> [B x C].
Var mean_pool(Var x, std::size_t frames);

/// Mean cross-entropy of logits[B x K] against integer labels.
Var cross_entropy(Var logits, std::span<const int> labels);

}  // namespace ops

/// Forward-only evaluation of the scalar cross-entropy per row, used by
/// evaluation code that never differentiates.
std::vector<double> per_row_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Raw matrix product without tracing, C = A * B.
Tensor matmul_values(const Tensor& a, const Tensor& b);

}  // namespace ambient
