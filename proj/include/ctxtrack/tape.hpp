#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctxtrack/tensor.hpp"

namespace ctxtrack {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode recorder over whole tensors.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// backward() walks them once from the back. Gradients accumulate additively
/// when a value fans out to several consumers. One tape belongs to one
/// training step; it is not thread-safe.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf bound to a named parameter; its gradient is reported by parameter_gradients().
  Var parameter(const std::string& name, const Tensor& value);

  /// Append a derived node. `backward` receives the node's output gradient and
  /// must accumulate into the parents through accumulate().
  Var record(Tensor value, std::vector<std::size_t> parents, Backward backward);

  void backward(Var loss);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  void accumulate(std::size_t id, const Tensor& g);
  /// Accumulate `g * scale` into a parent without a temporary.
  void accumulate_scaled(std::size_t id, const Tensor& g, double scale);

  /// Gradient of the last backward() target with respect to `v` (zeros if unreached).
  Tensor grad(Var v) const;
  std::map<std::string, Tensor> parameter_gradients() const;

  std::size_t size() const { return nodes_.size(); }
  /// Number of backward rules executed by the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  std::size_t last_visits_ = 0;
};

/// Differentiable operations. All shapes are validated; mismatches throw ConfigError.
namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// a[n x d] + bias[d] broadcast over rows.
Var add_row(Var a, Var bias);
/// a[n x d] * gain[d] broadcast over rows.
Var mul_row(Var a, Var gain);
Var matmul(Var a, Var b);
/// a * b^T.
Var matmul_nt(Var a, Var b);
Var relu(Var a);
Var softmax_rows(Var a);
/// Per-row normalisation to zero mean and unit variance, then gain and bias.
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
/// Unit-L2 rows; zero rows stay zero.
Var normalize_rows(Var a);
Var concat_cols(Var a, Var b);
/// Stack row blocks of equal width.
Var concat_rows(const std::vector<Var>& parts);
/// Rows of `a` at `index`, in that order.
Var gather_rows(Var a, const std::vector<std::size_t>& index);
Var reshape(Var a, Shape shape);
/// Same-size zero-padded correlation of an H x W (x C) map with a k x k kernel.
Var conv2d_same(Var input, Var kernel);
Var sum(Var a);

/// Mean binary cross-entropy of probabilities `pred` against `target`.
Var bce_mean(Var pred, const Tensor& target);
/// 1 - (2 sum(p g) + 1) / (sum p + sum g + 1).
Var dice(Var pred, const Tensor& target);
/// -log softmax(logits)[label] for a single row of logits.
Var cross_entropy(Var logits, std::size_t label);

/// Anchor/positive/negative specification over a similarity matrix.
struct ContrastiveTerm {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives;
};

/// Sum over terms of log(1 + sum_{p,q} exp(S[a,q] - S[a,p])), evaluated stably
/// as softplus(LSE_q S[a,q] + LSE_p -S[a,p]). Terms with no positives contribute 0.
Var contrastive_sum(Var similarity, const std::vector<ContrastiveTerm>& terms);

}  // namespace ops
}  // namespace ctxtrack
