#include "ctxtrack/nn.hpp"

#include <cmath>

namespace ctxtrack {

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("missing parameter '" + name + "'");
  return it->second;
}

void ParameterSet::merge(const ParameterSet& other, const std::string& prefix) {
  for (const auto& [name, t] : other.items()) values_[prefix + name] = t;
}

ParameterSet ParameterSet::subset(const std::string& prefix) const {
  ParameterSet out;
  for (const auto& [name, t] : values_)
    if (name.compare(0, prefix.size(), prefix) == 0) out.set(name.substr(prefix.size()), t);
  return out;
}

BoundParams::BoundParams(Tape& tape, const ParameterSet& params, bool trainable,
                         const std::string& prefix)
    : tape_(&tape) {
  for (const auto& [name, t] : params.items())
    vars_[name] = trainable ? tape.parameter(prefix + name, t) : tape.constant(t);
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("parameter '" + name + "' not bound");
  return it->second;
}

namespace {
std::string wname(std::size_t i) { return "w" + std::to_string(i); }
std::string bname(std::size_t i) { return "b" + std::to_string(i); }
}  // namespace

ParameterSet init_mlp(const MlpShape& shape, CounterRng& rng) {
  ParameterSet p;
  for (std::size_t i = 0; i < shape.layers(); ++i) {
    const std::size_t din = shape.widths[i], dout = shape.widths[i + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(din));
    Tensor w({din, dout});
    for (auto& v : w.storage()) v = rng.uniform(-bound, bound);
    p.set(wname(i), std::move(w));
    p.set(bname(i), Tensor({dout}, 0.0));
  }
  return p;
}

ParameterSet identity_mlp(const MlpShape& shape) {
  ParameterSet p;
  for (std::size_t i = 0; i < shape.layers(); ++i) {
    const std::size_t din = shape.widths[i], dout = shape.widths[i + 1];
    Tensor w({din, dout}, 0.0);
    for (std::size_t j = 0; j < std::min(din, dout); ++j) w.at(j, j) = 1.0;
    p.set(wname(i), std::move(w));
    p.set(bname(i), Tensor({dout}, 0.0));
  }
  return p;
}

Var mlp_forward(const BoundParams& params, const MlpShape& shape, Var input,
                const std::string& prefix) {
  if (shape.layers() == 0) throw ConfigError("mlp has no layers");
  if (input.value().cols() != shape.widths.front()) {
    throw ConfigError("mlp input width " + std::to_string(input.value().cols()) +
                      " does not match " + std::to_string(shape.widths.front()));
  }
  Var h = input;
  for (std::size_t i = 0; i < shape.layers(); ++i) {
    Var w = params[prefix + wname(i)];
    Var b = params[prefix + bname(i)];
    const auto& ws = w.value().shape();
    if (ws.size() != 2 || ws[0] != shape.widths[i] || ws[1] != shape.widths[i + 1] ||
        b.value().size() != shape.widths[i + 1]) {
      throw ConfigError("mlp layer " + std::to_string(i) + " has shape " + shape_string(ws) +
                        ", expected " + std::to_string(shape.widths[i]) + "x" +
                        std::to_string(shape.widths[i + 1]));
    }
    h = ops::add_row(ops::matmul(h, w), b);
    if (i + 1 < shape.layers() || shape.final_relu) h = ops::relu(h);
  }
  return h;
}

Tensor mlp_forward(const ParameterSet& params, const MlpShape& shape, const Tensor& input) {
  Tape tape;
  BoundParams bound(tape, params, false);
  const Tensor x = input.rank() == 1 ? input.reshaped({1, input.size()}) : input;
  return mlp_forward(bound, shape, tape.constant(x)).value();
}

void AdamW::step(ParameterSet& params, const std::map<std::string, Tensor>& grads, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) continue;
    Tensor& w = params.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() != w.size()) {
      m = Tensor(w.shape(), 0.0);
      v = Tensor(w.shape(), 0.0);
    }
    const bool decay = w.rank() == 2;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (decay) w[i] -= lr * config_.weight_decay * w[i];
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
    }
  }
}

double step_down_lr(double base, std::size_t step, std::size_t total) {
  const auto boundary = static_cast<std::size_t>(0.7 * static_cast<double>(total));
  return step < boundary ? base : base * 0.1;
}

}  // namespace ctxtrack
