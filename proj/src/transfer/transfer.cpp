#include "coplms/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace coplms {

namespace {

void check_k(std::size_t k, std::size_t vocab) {
  if (k < 1 || k >= vocab) {
    throw std::invalid_argument("pooling: K=" + std::to_string(k) + " must satisfy 1 <= K < V=" +
                                std::to_string(vocab));
  }
}

// Probabilities plus the vocabulary index of each of the top-K entries.
struct PoolTrace {
  std::vector<double> probs;
  std::vector<std::size_t> top;  // descending by probability, ties by index
  std::vector<double> pooled;    // K + 1
};

PoolTrace pool_with_trace(std::span<const double> logits, std::size_t k) {
  check_k(k, logits.size());
  PoolTrace tr;
  tr.probs = softmax(logits);
  std::vector<std::size_t> order(tr.probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return tr.probs[a] > tr.probs[b] || (tr.probs[a] == tr.probs[b] && a < b);
                    });
  tr.top.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  tr.pooled.resize(k + 1);
  for (std::size_t r = 0; r < k; ++r) tr.pooled[r] = tr.probs[tr.top[r]];
  double rest = 0.0;
  for (std::size_t r = k; r < order.size(); ++r) rest += tr.probs[order[r]];
  tr.pooled[k] = rest;
  return tr;
}

}  // namespace

PooledDistribution pool_logits(std::span<const double> logits, std::size_t k) {
  PoolTrace tr = pool_with_trace(logits, k);
  return {std::move(tr.pooled), k};
}

double kt_loss(const Tensor& teacher_logits, const Tensor& self_logits, std::size_t k) {
  if (teacher_logits.rows() == 0 || self_logits.rows() == 0) throw std::invalid_argument("kt_loss: empty sequence");
  check_k(k, teacher_logits.cols());
  check_k(k, self_logits.cols());
  const std::size_t S = std::min(teacher_logits.rows(), self_logits.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < S; ++i) {
    const auto t = pool_logits(teacher_logits.row(i), k);
    const auto s = pool_logits(self_logits.row(i), k);
    total += kl_divergence(t.values, s.values);
  }
  return total;
}

Var kt_loss(Var self_logits, const Tensor& teacher_logits, std::size_t k) {
  Tape& tape = *self_logits.tape;
  const Tensor& sv = self_logits.value();
  if (teacher_logits.rows() == 0 || sv.rows() == 0) throw std::invalid_argument("kt_loss: empty sequence");
  check_k(k, teacher_logits.cols());
  check_k(k, sv.cols());
  const std::size_t S = std::min(teacher_logits.rows(), sv.rows());
  const std::size_t V = sv.cols();

  double total = 0.0;
  Tensor grad({sv.rows(), V});  // d loss / d self logits
  for (std::size_t i = 0; i < S; ++i) {
    const PoolTrace t = pool_with_trace(teacher_logits.row(i), k);
    const PoolTrace s = pool_with_trace(sv.row(i), k);
    total += kl_divergence(t.pooled, s.pooled);

    // d KL / d q_r = -t_r / q_r; route to probabilities, then through softmax.
    std::vector<double> dq(k + 1);
    for (std::size_t r = 0; r <= k; ++r) dq[r] = -t.pooled[r] / std::max(s.pooled[r], kLogFloor);
    std::vector<double> dp(V, dq[k]);
    for (std::size_t r = 0; r < k; ++r) dp[s.top[r]] = dq[r];
    double dot = 0.0;
    for (std::size_t c = 0; c < V; ++c) dot += s.probs[c] * dp[c];
    for (std::size_t c = 0; c < V; ++c) grad[i * V + c] = s.probs[c] * (dp[c] - dot);
  }
  return tape.push(Tensor::scalar(total), tape.requires_grad(self_logits),
                   [self_logits, grad = std::move(grad)](Tape& tp, const Tensor& g) {
                     Tensor& gs = tp.grad_slot(self_logits);
                     for (std::size_t i = 0; i < grad.size(); ++i) gs[i] += g[0] * grad[i];
                   });
}

Var mutual_loss(Var self_logits, const Tensor& teacher_aligned, const SupervisedSequence& labels, double weight,
                std::size_t k) {
  if (!(weight >= 0.0 && weight <= 1.0)) {
    throw std::invalid_argument("mixture weight " + std::to_string(weight) + " outside [0, 1]");
  }
  Var transfer = kt_loss(self_logits, teacher_aligned, k);
  Var supervised = cross_entropy(self_logits, labels.rows, labels.targets);
  // Endpoints are exact: the other term is dropped rather than scaled by zero.
  if (weight == 1.0) return transfer;
  if (weight == 0.0) return supervised;
  return add(scale(transfer, weight), scale(supervised, 1.0 - weight));
}

}  // namespace coplms
