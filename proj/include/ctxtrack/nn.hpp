#pragma once

#include <map>
#include <string>
#include <vector>

#include "ctxtrack/rng.hpp"
#include "ctxtrack/tape.hpp"
#include "ctxtrack/tensor.hpp"

namespace ctxtrack {

/// Named trainable tensors, iterated in name order.
class ParameterSet {
 public:
  void set(const std::string& name, Tensor value) { values_[name] = std::move(value); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  std::size_t size() const { return values_.size(); }
  const std::map<std::string, Tensor>& items() const { return values_; }

  /// Copy every entry of `other` under `prefix + name`.
  void merge(const ParameterSet& other, const std::string& prefix = "");
  /// Entries whose name starts with `prefix`, with the prefix stripped.
  ParameterSet subset(const std::string& prefix) const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::map<std::string, Tensor> values_;
};

/// ParameterSet entries placed on a tape, either as trainable leaves or constants.
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParameterSet& params, bool trainable,
              const std::string& prefix = "");
  /// Values already on `tape`, looked up by name.
  BoundParams(Tape& tape, std::map<std::string, Var> vars) : tape_(&tape), vars_(std::move(vars)) {}
  Var operator[](const std::string& name) const;
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

/// Fully connected stack; every layer is followed by ReLU except, optionally, the last.
struct MlpShape {
  std::vector<std::size_t> widths;  // D_in, hidden..., D_out
  bool final_relu = true;
  std::size_t layers() const { return widths.empty() ? 0 : widths.size() - 1; }
};

/// Kaiming-uniform weights (w{i}: D_i x D_{i+1}) and zero biases (b{i}).
ParameterSet init_mlp(const MlpShape& shape, CounterRng& rng);
/// Exact identity-style weights: w{i}[j][j] = 1 on the leading diagonal, zero biases.
ParameterSet identity_mlp(const MlpShape& shape);

/// Layers are looked up as `prefix + "w{i}"` and `prefix + "b{i}"`.
Var mlp_forward(const BoundParams& params, const MlpShape& shape, Var input,
                const std::string& prefix = "");
/// Tape-free convenience wrapper.
Tensor mlp_forward(const ParameterSet& params, const MlpShape& shape, const Tensor& input);

struct AdamWConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-2;
};

/// Adam with decoupled weight decay. Decay applies to rank-2 tensors only.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}
  void step(ParameterSet& params, const std::map<std::string, Tensor>& grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  AdamWConfig config_;
  std::map<std::string, Tensor> m_, v_;
  std::size_t t_ = 0;
};

/// Step-down schedule: `base` until 70% of `total` steps, then `base * 0.1`.
double step_down_lr(double base, std::size_t step, std::size_t total);

}  // namespace ctxtrack
