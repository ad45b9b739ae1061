#include "ctxtrack/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ctxtrack/kernels.hpp"

namespace ctxtrack {

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, {}, false});
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back({std::move(value), {}, {}, {}, true});
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
  if (params_.count(name)) throw ContractViolation("parameter '" + name + "' registered twice");
  auto v = variable(value);
  params_[name] = v.id;
  return v;
}

Var Tape::record(Tensor value, std::vector<std::size_t> parents, Backward backward) {
  bool rg = false;
  for (auto p : parents) rg = rg || nodes_.at(p).requires_grad;
  if (!rg) backward = nullptr;
  nodes_.push_back({std::move(value), {}, std::move(parents), std::move(backward), rg});
  return {this, nodes_.size() - 1};
}

void Tape::accumulate(std::size_t id, const Tensor& g) { accumulate_scaled(id, g, 1.0); }

void Tape::accumulate_scaled(std::size_t id, const Tensor& g, double scale) {
  auto& node = nodes_.at(id);
  if (!node.requires_grad) return;
  if (g.size() != node.value.size()) {
    throw ContractViolation("gradient size " + shape_string(g.shape()) +
                            " does not match value " + shape_string(node.value.shape()));
  }
  if (node.grad.size() != node.value.size()) node.grad = Tensor(node.value.shape(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) node.grad[i] += scale * g[i];
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractViolation("loss recorded on a different tape");
  if (value(loss.id).size() != 1) {
    throw ContractViolation("backward requires a scalar loss, got shape " +
                            shape_string(value(loss.id).shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  last_visits_ = 0;
  auto& root = nodes_[loss.id];
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.backward || n.grad.empty()) continue;
    // Rules only touch parents (lower ids), so n.grad stays put.
    n.backward(*this, n.grad);
    ++last_visits_;
  }
}

Tensor Tape::grad(Var v) const {
  const auto& n = nodes_.at(v.id);
  if (n.grad.size() == n.value.size()) return n.grad;
  return Tensor(n.value.shape(), 0.0);
}

std::map<std::string, Tensor> Tape::parameter_gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : params_) out[name] = grad({const_cast<Tape*>(this), id});
  return out;
}

namespace ops {
namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || a.tape == nullptr) throw ContractViolation("vars from different tapes");
  return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  }
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kProbClamp = 1e-12;

}  // namespace

Var add(Var a, Var b) {
  auto& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  auto& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate_scaled(b, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  auto& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor ga = g;
      const auto& bv = tp.value(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= bv[i];
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(b)) {
      Tensor gb = g;
      const auto& av = tp.value(a);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] *= av[i];
      tp.accumulate(b, gb);
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  return a.tape->record(std::move(out), {a.id},
                        [a = a.id, s](Tape& tp, const Tensor& g) { tp.accumulate_scaled(a, g, s); });
}

Var add_row(Var a, Var bias) {
  auto& t = same_tape(a, bias);
  const std::size_t n = a.value().rows(), d = a.value().cols();
  if (bias.value().size() != d) {
    throw ConfigError("add_row: bias length " + std::to_string(bias.value().size()) +
                      " does not match width " + std::to_string(d));
  }
  Tensor out = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bias.value()[c];
  return t.record(std::move(out), {a.id, bias.id},
                  [a = a.id, b = bias.id, n, d](Tape& tp, const Tensor& g) {
                    tp.accumulate(a, g);
                    if (tp.requires_grad(b)) {
                      Tensor gb(tp.value(b).shape(), 0.0);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                      tp.accumulate(b, gb);
                    }
                  });
}

Var mul_row(Var a, Var gain) {
  auto& t = same_tape(a, gain);
  const std::size_t n = a.value().rows(), d = a.value().cols();
  if (gain.value().size() != d) {
    throw ConfigError("mul_row: gain length does not match width " + std::to_string(d));
  }
  Tensor out = a.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] *= gain.value()[c];
  return t.record(std::move(out), {a.id, gain.id},
                  [a = a.id, gn = gain.id, n, d](Tape& tp, const Tensor& g) {
                    const auto& av = tp.value(a);
                    const auto& gv = tp.value(gn);
                    if (tp.requires_grad(a)) {
                      Tensor ga = g;
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) ga[r * d + c] *= gv[c];
                      tp.accumulate(a, ga);
                    }
                    if (tp.requires_grad(gn)) {
                      Tensor gg(gv.shape(), 0.0);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * av[r * d + c];
                      tp.accumulate(gn, gg);
                    }
                  });
}

Var matmul(Var a, Var b) {
  auto& t = same_tape(a, b);
  Tensor out = ctxtrack::matmul(a.value(), b.value());
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    if (tp.requires_grad(a)) tp.accumulate(a, ctxtrack::matmul_nt(g, bv).reshaped(av.shape()));
    if (tp.requires_grad(b)) tp.accumulate(b, ctxtrack::matmul_tn(av, g).reshaped(bv.shape()));
  });
}

Var matmul_nt(Var a, Var b) {
  auto& t = same_tape(a, b);
  Tensor out = ctxtrack::matmul_nt(a.value(), b.value());
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, const Tensor& g) {
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    // out = A B^T: dA = G B, dB = G^T A
    if (tp.requires_grad(a)) tp.accumulate(a, ctxtrack::matmul(g, bv).reshaped(av.shape()));
    if (tp.requires_grad(b)) tp.accumulate(b, ctxtrack::matmul_tn(g, av).reshaped(bv.shape()));
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return a.tape->record(std::move(out), {a.id}, [a = a.id](Tape& tp, const Tensor& g) {
    Tensor ga = g;
    const auto& av = tp.value(a);
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (!(av[i] > 0.0)) ga[i] = 0.0;
    tp.accumulate(a, ga);
  });
}

Var softmax_rows(Var a) {
  Tensor out = ctxtrack::softmax_rows(a.value());
  auto& t = *a.tape;
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.id}, [a = a.id, self](Tape& tp, const Tensor& g) {
    const auto& y = tp.value(self);
    Tensor ga(y.shape());
    const std::size_t n = y.rows(), d = y.cols();
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
      for (std::size_t c = 0; c < d; ++c) ga[r * d + c] = y[r * d + c] * (g[r * d + c] - dot);
    }
    tp.accumulate(a, ga);
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  auto& t = same_tape(x, gain);
  same_tape(x, bias);
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ConfigError("layer_norm_rows: gain/bias length must equal width " + std::to_string(d));
  }
  Tensor normed(x.value().shape());
  std::vector<double> inv_std(n);
  Tensor out(x.value().shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = x.value().row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      normed[r * d + c] = (row[c] - mean) * inv_std[r];
      out[r * d + c] = normed[r * d + c] * gain.value()[c] + bias.value()[c];
    }
  }
  return t.record(
      std::move(out), {x.id, gain.id, bias.id},
      [x = x.id, gn = gain.id, b = bias.id, normed = std::move(normed), inv_std = std::move(inv_std), n,
       d](Tape& tp, const Tensor& g) {
        const auto& gv = tp.value(gn);
        if (tp.requires_grad(x)) {
          Tensor gx(tp.value(x).shape());
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dy = 0.0, mean_dy_y = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dy = g[r * d + c] * gv[c];
              mean_dy += dy;
              mean_dy_y += dy * normed[r * d + c];
            }
            mean_dy /= static_cast<double>(d);
            mean_dy_y /= static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              const double dy = g[r * d + c] * gv[c];
              gx[r * d + c] = inv_std[r] * (dy - mean_dy - normed[r * d + c] * mean_dy_y);
            }
          }
          tp.accumulate(x, gx);
        }
        if (tp.requires_grad(gn) || tp.requires_grad(b)) {
          Tensor gg(gv.shape(), 0.0), gb(gv.shape(), 0.0);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += g[r * d + c] * normed[r * d + c];
              gb[c] += g[r * d + c];
            }
          tp.accumulate(gn, gg);
          tp.accumulate(b, gb);
        }
      });
}

Var normalize_rows(Var a) {
  const std::size_t n = a.value().rows(), d = a.value().cols();
  Tensor out(a.value().shape(), 0.0);
  std::vector<double> norms(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (double v : a.value().row(r)) s += v * v;
    norms[r] = std::sqrt(s);
    if (norms[r] > 0.0)
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] = a.value()[r * d + c] / norms[r];
  }
  auto& t = *a.tape;
  const std::size_t self = t.size();
  return t.record(std::move(out), {a.id},
                  [a = a.id, self, norms = std::move(norms), n, d](Tape& tp, const Tensor& g) {
                    const auto& u = tp.value(self);
                    Tensor ga(u.shape(), 0.0);
                    for (std::size_t r = 0; r < n; ++r) {
                      if (norms[r] == 0.0) continue;
                      double dot = 0.0;
                      for (std::size_t c = 0; c < d; ++c) dot += u[r * d + c] * g[r * d + c];
                      for (std::size_t c = 0; c < d; ++c)
                        ga[r * d + c] = (g[r * d + c] - u[r * d + c] * dot) / norms[r];
                    }
                    tp.accumulate(a, ga);
                  });
}

Var concat_cols(Var a, Var b) {
  auto& t = same_tape(a, b);
  const std::size_t n = a.value().rows();
  if (b.value().rows() != n) {
    throw ConfigError("concat_cols: row count mismatch " + shape_string(a.value().shape()) + " vs " +
                      shape_string(b.value().shape()));
  }
  const std::size_t da = a.value().cols(), db = b.value().cols();
  Tensor out({n, da + db});
  for (std::size_t r = 0; r < n; ++r) {
    std::copy_n(a.value().row(r).begin(), da, out.row(r).begin());
    std::copy_n(b.value().row(r).begin(), db, out.row(r).begin() + static_cast<std::ptrdiff_t>(da));
  }
  return t.record(std::move(out), {a.id, b.id},
                  [a = a.id, b = b.id, n, da, db](Tape& tp, const Tensor& g) {
                    Tensor ga({n, da}), gb({n, db});
                    for (std::size_t r = 0; r < n; ++r) {
                      for (std::size_t c = 0; c < da; ++c) ga[r * da + c] = g[r * (da + db) + c];
                      for (std::size_t c = 0; c < db; ++c) gb[r * db + c] = g[r * (da + db) + da + c];
                    }
                    tp.accumulate(a, ga.reshaped(tp.value(a).shape()));
                    tp.accumulate(b, gb.reshaped(tp.value(b).shape()));
                  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t d = parts.front().value().cols();
  std::vector<double> data;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    if (p.tape != &t) throw ContractViolation("vars from different tapes");
    if (p.value().cols() != d && p.value().size() != 0)
      throw ConfigError("concat_rows: width mismatch " + shape_string(p.value().shape()));
    ids.push_back(p.id);
    offsets.push_back(data.size());
    data.insert(data.end(), p.value().storage().begin(), p.value().storage().end());
  }
  const std::size_t n = data.size() / std::max<std::size_t>(d, 1);
  return t.record(Tensor({n, d}, std::move(data)), ids, [ids, offsets](Tape& tp, const Tensor& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!tp.requires_grad(ids[i])) continue;
      const auto& v = tp.value(ids[i]);
      std::vector<double> part(g.storage().begin() + static_cast<std::ptrdiff_t>(offsets[i]),
                               g.storage().begin() + static_cast<std::ptrdiff_t>(offsets[i] + v.size()));
      tp.accumulate(ids[i], Tensor(v.shape(), std::move(part)));
    }
  });
}

Var gather_rows(Var a, const std::vector<std::size_t>& index) {
  const std::size_t n = a.value().rows(), d = a.value().cols();
  Tensor out({index.size(), d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ConfigError("gather_rows: index out of range");
    std::copy_n(a.value().row(index[i]).begin(), d, out.row(i).begin());
  }
  return a.tape->record(std::move(out), {a.id}, [a = a.id, index, d](Tape& tp, const Tensor& g) {
    Tensor ga(tp.value(a).shape(), 0.0);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) ga[index[i] * d + c] += g[i * d + c];
    tp.accumulate(a, ga);
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record(std::move(out), {a.id}, [a = a.id](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g.reshaped(tp.value(a).shape()));
  });
}

Var conv2d_same(Var input, Var kernel) {
  auto& t = same_tape(input, kernel);
  Tensor out = ctxtrack::conv2d_same(input.value(), kernel.value());
  return t.record(std::move(out), {input.id, kernel.id},
                  [in = input.id, k = kernel.id](Tape& tp, const Tensor& g) {
                    const auto& iv = tp.value(in);
                    const auto& kv = tp.value(k);
                    if (tp.requires_grad(in))
                      tp.accumulate(in, conv2d_same_input_grad(g, kv, iv.shape()));
                    if (tp.requires_grad(k))
                      tp.accumulate(k, conv2d_same_kernel_grad(iv, g, kv.dim(0)));
                  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().storage()) s += v;
  return a.tape->record(Tensor::scalar(s), {a.id}, [a = a.id](Tape& tp, const Tensor& g) {
    tp.accumulate(a, Tensor(tp.value(a).shape(), g[0]));
  });
}

Var bce_mean(Var pred, const Tensor& target) {
  require_same_shape(pred.value().reshaped({pred.value().size()}),
                     target.reshaped({target.size()}), "bce_mean");
  const auto& p = pred.value();
  const double n = static_cast<double>(p.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], kProbClamp, 1.0 - kProbClamp);
    if (target[i] != 0.0) loss -= target[i] * std::log(q);
    if (target[i] != 1.0) loss -= (1.0 - target[i]) * std::log(1.0 - q);
  }
  loss /= n;
  return pred.tape->record(Tensor::scalar(loss), {pred.id},
                           [pr = pred.id, target, n](Tape& tp, const Tensor& g) {
                             const auto& p = tp.value(pr);
                             Tensor gp(p.shape(), 0.0);
                             for (std::size_t i = 0; i < p.size(); ++i) {
                               if (p[i] < kProbClamp || p[i] > 1.0 - kProbClamp) continue;
                               gp[i] = g[0] * (-(target[i] / p[i]) + (1.0 - target[i]) / (1.0 - p[i])) / n;
                             }
                             tp.accumulate(pr, gp);
                           });
}

Var dice(Var pred, const Tensor& target) {
  const auto& p = pred.value();
  if (p.size() != target.size()) throw ConfigError("dice: size mismatch");
  double inter = 0.0, ps = 0.0, gs = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * target[i];
    ps += p[i];
    gs += target[i];
  }
  const double den = ps + gs + 1.0;
  const double num = 2.0 * inter + 1.0;
  return pred.tape->record(Tensor::scalar(1.0 - num / den), {pred.id},
                           [pr = pred.id, target, num, den](Tape& tp, const Tensor& g) {
                             const auto& p = tp.value(pr);
                             Tensor gp(p.shape());
                             for (std::size_t i = 0; i < p.size(); ++i)
                               gp[i] = -g[0] * (2.0 * target[i] * den - num) / (den * den);
                             tp.accumulate(pr, gp);
                           });
}

Var cross_entropy(Var logits, std::size_t label) {
  const auto& z = logits.value();
  if (label >= z.size()) throw ConfigError("cross_entropy: label out of range");
  const double lse = log_sum_exp(z.data());
  return logits.tape->record(Tensor::scalar(lse - z[label]), {logits.id},
                             [lg = logits.id, label, lse](Tape& tp, const Tensor& g) {
                               const auto& z = tp.value(lg);
                               Tensor gz(z.shape());
                               for (std::size_t i = 0; i < z.size(); ++i)
                                 gz[i] = g[0] * (std::exp(z[i] - lse) - (i == label ? 1.0 : 0.0));
                               tp.accumulate(lg, gz);
                             });
}

Var contrastive_sum(Var similarity, const std::vector<ContrastiveTerm>& terms) {
  const auto& s = similarity.value();
  const std::size_t m = s.cols();
  double total = 0.0;
  std::vector<double> pre(terms.size(), -std::numeric_limits<double>::infinity());
  std::vector<double> buf;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const auto& term = terms[i];
    if (term.positives.empty() || term.negatives.empty()) continue;
    buf.clear();
    for (auto q : term.negatives) buf.push_back(s[term.anchor * m + q]);
    const double lse_neg = log_sum_exp(buf);
    buf.clear();
    for (auto p : term.positives) buf.push_back(-s[term.anchor * m + p]);
    const double lse_pos = log_sum_exp(buf);
    pre[i] = lse_neg + lse_pos;
    total += softplus(pre[i]);
  }
  return similarity.tape->record(
      Tensor::scalar(total), {similarity.id},
      [sid = similarity.id, terms, pre = std::move(pre), m](Tape& tp, const Tensor& g) {
        const auto& s = tp.value(sid);
        Tensor gs(s.shape(), 0.0);
        std::vector<double> buf;
        for (std::size_t i = 0; i < terms.size(); ++i) {
          if (!std::isfinite(pre[i])) continue;
          const auto& term = terms[i];
          const double w = g[0] * sigmoid(pre[i]);
          const std::size_t base = term.anchor * m;
          buf.clear();
          for (auto q : term.negatives) buf.push_back(s[base + q]);
          const double lse_neg = log_sum_exp(buf);
          for (auto q : term.negatives) gs[base + q] += w * std::exp(s[base + q] - lse_neg);
          buf.clear();
          for (auto p : term.positives) buf.push_back(-s[base + p]);
          const double lse_pos = log_sum_exp(buf);
          for (auto p : term.positives) gs[base + p] -= w * std::exp(-s[base + p] - lse_pos);
        }
        tp.accumulate(sid, gs);
      });
}

}  // namespace ops
}  // namespace ctxtrack
