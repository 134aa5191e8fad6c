#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "coplms/numerics.hpp"

namespace coplms {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_mat(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
MatMap as_mat(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw std::invalid_argument(std::string(op) + ": operands on different tapes");
  }
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

double Var::item() const {
  const Tensor& t = value();
  if (t.size() != 1) throw std::logic_error("item() on non-scalar tensor " + t.shape_string());
  return t[0];
}

Var Tape::constant(Tensor t) { return push(std::move(t), false, nullptr); }

Var Tape::param(Parameter& p) {
  if (!p.trainable) return constant(p.value);
  Var v = push(p.value, true, nullptr);
  nodes_[v.id].param = &p;
  return v;
}

Var Tape::push(Tensor value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_slot(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  if (!nodes_[v.id].requires_grad) return;
  Tensor& slot = grad_slot(v);
  for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
}

void Tape::backward(Var loss, double seed) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to another tape");
  if (nodes_[loss.id].value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  if (!nodes_[loss.id].requires_grad) return;
  grad_slot(loss)[0] += seed;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.param != nullptr) {
      Parameter& p = *n.param;
      if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape(), 0.0);
      for (std::size_t j = 0; j < n.grad.size(); ++j) p.grad[j] += n.grad[j];
    } else if (n.backward) {
      // Copy out: the closure may push into nodes_ indirectly only through
      // accumulate(), which never reallocates.
      const Tensor g = n.grad;
      n.backward(*this, g);
    }
  }
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + av.shape_string() + " x " +
                                bv.shape_string());
  }
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      as_mat(ga).noalias() += as_mat(g) * as_mat(bv).transpose();
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      as_mat(gb).noalias() += as_mat(av).transpose() * as_mat(g);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b, "matmul_nt");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw std::invalid_argument("matmul_nt: shape mismatch " + av.shape_string() + " x " +
                                bv.shape_string() + "^T");
  }
  Tensor out({av.rows(), bv.rows()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_slot(a);
      as_mat(ga).noalias() += as_mat(g) * as_mat(bv);
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_slot(b);
      as_mat(gb).noalias() += as_mat(g).transpose() * as_mat(av);
    }
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b, "add");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.size() != bv.size()) {
    throw std::invalid_argument("add: shape mismatch " + av.shape_string() + " vs " +
                                bv.shape_string());
  }
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(std::move(out), rg, [a, b](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var add_bias(Var a, Var bias) {
  require_same_tape(a, bias, "add_bias");
  Tape& t = *a.tape;
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.cols()) {
    throw std::invalid_argument("add_bias: bias " + bv.shape_string() + " vs input " +
                                av.shape_string());
  }
  Tensor out = av;
  const std::size_t n = av.rows(), m = av.cols();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) out[r * m + c] += bv[c];
  const bool rg = t.requires_grad(a) || t.requires_grad(bias);
  return t.push(std::move(out), rg, [a, bias, n, m](Tape& tp, const Tensor& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad_slot(bias);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) gb[c] += g[r * m + c];
    }
  });
}

Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  return t.push(std::move(out), t.requires_grad(a), [a, c](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

Var gelu(Var a) {
  Tape& t = *a.tape;
  Tensor out = a.value();
  for (double& v : out.values()) v = gelu_value(v);
  return t.push(std::move(out), t.requires_grad(a), [a](Tape& tp, const Tensor& g) {
    const Tensor& x = tp.value(a);
    Tensor& ga = tp.grad_slot(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(x[i]);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma, "layer_norm");
  require_same_tape(x, beta, "layer_norm");
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  const std::size_t n = xv.rows(), m = xv.cols();
  if (gv.size() != m || bv.size() != m) throw std::invalid_argument("layer_norm: affine size mismatch");

  Tensor out({n, m});
  Tensor xhat({n, m});
  std::vector<double> inv_std(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < m; ++c) mean += xv[r * m + c];
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      const double d = xv[r * m + c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < m; ++c) {
      xhat[r * m + c] = (xv[r * m + c] - mean) * inv_std[r];
      out[r * m + c] = xhat[r * m + c] * gv[c] + bv[c];
    }
  }
  const bool rg = t.requires_grad(x) || t.requires_grad(gamma) || t.requires_grad(beta);
  return t.push(std::move(out), rg,
                [x, gamma, beta, n, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                    Tape& tp, const Tensor& g) {
                  const Tensor& gv = tp.value(gamma);
                  if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
                    Tensor dgamma({m}), dbeta({m});
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < m; ++c) {
                        dgamma[c] += g[r * m + c] * xhat[r * m + c];
                        dbeta[c] += g[r * m + c];
                      }
                    tp.accumulate(gamma, dgamma);
                    tp.accumulate(beta, dbeta);
                  }
                  if (!tp.requires_grad(x)) return;
                  Tensor& gx = tp.grad_slot(x);
                  const double inv_m = 1.0 / static_cast<double>(m);
                  for (std::size_t r = 0; r < n; ++r) {
                    double sum_d = 0.0, sum_dx = 0.0;
                    for (std::size_t c = 0; c < m; ++c) {
                      const double d = g[r * m + c] * gv[c];
                      sum_d += d;
                      sum_dx += d * xhat[r * m + c];
                    }
                    for (std::size_t c = 0; c < m; ++c) {
                      const double d = g[r * m + c] * gv[c];
                      gx[r * m + c] +=
                          inv_std[r] * (d - inv_m * sum_d - xhat[r * m + c] * inv_m * sum_dx);
                    }
                  }
                });
}

Var embedding(Var table, std::span<const int> ids) {
  Tape& t = *table.tape;
  const Tensor& tv = table.value();
  const std::size_t vocab = tv.rows(), d = tv.cols();
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return t.push(std::move(out), t.requires_grad(table),
                [table, d, idv = std::move(idv)](Tape& tp, const Tensor& g) {
                  Tensor& gt = tp.grad_slot(table);
                  for (std::size_t i = 0; i < idv.size(); ++i) {
                    double* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                    for (std::size_t c = 0; c < d; ++c) dst[c] += g[i * d + c];
                  }
                });
}

Var causal_attention(Var q, Var k, Var v, std::size_t heads) {
  require_same_tape(q, k, "causal_attention");
  require_same_tape(q, v, "causal_attention");
  Tape& t = *q.tape;
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t S = qv.rows(), d = qv.cols();
  if (heads == 0 || d % heads != 0) throw std::invalid_argument("causal_attention: bad head count");
  if (!kv.same_shape(qv) || !vv.same_shape(qv)) throw std::invalid_argument("causal_attention: q/k/v shapes differ");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[h][i][j], j <= i
  std::vector<double> probs(heads * S * S, 0.0);
  Tensor out({S, d});
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < S; ++i) {
      double* p = probs.data() + (h * S + i) * S;
      double mx = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qv[i * d + off + c] * kv[j * d + off + c];
        p[j] = s * inv_sqrt;
        mx = std::max(mx, p[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        p[j] /= sum;
        for (std::size_t c = 0; c < dh; ++c) out[i * d + off + c] += p[j] * vv[j * d + off + c];
      }
    }
  }
  const bool rg = t.requires_grad(q) || t.requires_grad(k) || t.requires_grad(v);
  return t.push(
      std::move(out), rg,
      [q, k, v, heads, S, d, dh, inv_sqrt, probs = std::move(probs)](Tape& tp, const Tensor& g) {
        const Tensor& qv = tp.value(q);
        const Tensor& kv = tp.value(k);
        const Tensor& vv = tp.value(v);
        Tensor gq({S, d}), gk({S, d}), gv({S, d});
        std::vector<double> dp(S);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          for (std::size_t i = 0; i < S; ++i) {
            const double* p = probs.data() + (h * S + i) * S;
            double dot = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
              double s = 0.0;
              for (std::size_t c = 0; c < dh; ++c) {
                s += g[i * d + off + c] * vv[j * d + off + c];
                gv[j * d + off + c] += p[j] * g[i * d + off + c];
              }
              dp[j] = s;
              dot += p[j] * s;
            }
            for (std::size_t j = 0; j <= i; ++j) {
              const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
              if (ds == 0.0) continue;
              for (std::size_t c = 0; c < dh; ++c) {
                gq[i * d + off + c] += ds * kv[j * d + off + c];
                gk[j * d + off + c] += ds * qv[i * d + off + c];
              }
            }
          }
        }
        tp.accumulate(q, gq);
        tp.accumulate(k, gk);
        tp.accumulate(v, gv);
      });
}

Var cross_entropy(Var logits, std::span<const std::size_t> rows, std::span<const int> targets) {
  Tape& t = *logits.tape;
  const Tensor& lv = logits.value();
  if (rows.size() != targets.size()) throw std::invalid_argument("cross_entropy: rows/targets length mismatch");
  if (rows.empty()) throw std::invalid_argument("cross_entropy: no target positions");
  const std::size_t V = lv.cols();
  const double inv_n = 1.0 / static_cast<double>(rows.size());
  double loss = 0.0;
  std::vector<std::vector<double>> probs;
  probs.reserve(rows.size());
  for (std::size_t n = 0; n < rows.size(); ++n) {
    if (rows[n] >= lv.rows()) throw std::out_of_range("cross_entropy: row out of range");
    if (targets[n] < 0 || static_cast<std::size_t>(targets[n]) >= V) {
      throw std::out_of_range("cross_entropy: target id out of range");
    }
    std::vector<double> ls = log_softmax(lv.row(rows[n]));
    loss -= ls[static_cast<std::size_t>(targets[n])];
    for (double& x : ls) x = std::exp(x);
    probs.push_back(std::move(ls));
  }
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  std::vector<int> tv(targets.begin(), targets.end());
  return t.push(Tensor::scalar(loss * inv_n), t.requires_grad(logits),
                [logits, V, inv_n, rv = std::move(rv), tv = std::move(tv),
                 probs = std::move(probs)](Tape& tp, const Tensor& g) {
                  Tensor& gl = tp.grad_slot(logits);
                  const double s = g[0] * inv_n;
                  for (std::size_t n = 0; n < rv.size(); ++n) {
                    double* dst = gl.data() + rv[n] * V;
                    for (std::size_t c = 0; c < V; ++c) dst[c] += s * probs[n][c];
                    dst[static_cast<std::size_t>(tv[n])] -= s;
                  }
                });
}

Var softmax_kl(Var student_logits, const Tensor& teacher_logits) {
  Tape& t = *student_logits.tape;
  const Tensor& sv = student_logits.value();
  if (sv.rows() != teacher_logits.rows() || sv.cols() != teacher_logits.cols()) {
    throw std::invalid_argument("softmax_kl: student " + sv.shape_string() + " vs teacher " +
                                teacher_logits.shape_string());
  }
  const std::size_t S = sv.rows(), V = sv.cols();
  const double inv_s = 1.0 / static_cast<double>(S);
  double loss = 0.0;
  Tensor diff({S, V});  // q - p, the gradient of KL(p||softmax(z)) w.r.t. z
  for (std::size_t i = 0; i < S; ++i) {
    const std::vector<double> p = softmax(teacher_logits.row(i));
    const std::vector<double> q = softmax(sv.row(i));
    loss += kl_divergence(p, q);
    for (std::size_t c = 0; c < V; ++c) diff[i * V + c] = q[c] - p[c];
  }
  return t.push(Tensor::scalar(loss * inv_s), t.requires_grad(student_logits),
                [student_logits, inv_s, diff = std::move(diff)](Tape& tp, const Tensor& g) {
                  Tensor& gs = tp.grad_slot(student_logits);
                  const double s = g[0] * inv_s;
                  for (std::size_t i = 0; i < diff.size(); ++i) gs[i] += s * diff[i];
                });
}

}  // namespace coplms
