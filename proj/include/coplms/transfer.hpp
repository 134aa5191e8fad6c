#pragma once

// Output-logits pooling and the knowledge-transfer losses used by mutual
// learning between models with different vocabularies.
//
// Pooling maps a V-way distribution to K+1 rank-sorted masses: the K largest
// probabilities in descending order plus the summed remainder. Two models with
// different vocabularies therefore always meet on the same (K+1)-simplex.

#include <cstddef>
#include <vector>

#include "coplms/model.hpp"
#include "coplms/numerics.hpp"

namespace coplms {

struct PooledDistribution {
  std::vector<double> values;  // size K + 1
  std::size_t k = 0;
};

// Throws unless 1 <= K < V and logits are finite.
PooledDistribution pool_logits(std::span<const double> logits, std::size_t k);

// Sum over i < min(S_teacher, S_self) of KL(pool(teacher_i) || pool(self_i)).
double kt_loss(const Tensor& teacher_logits, const Tensor& self_logits, std::size_t k);

// Differentiable kt_loss; gradient flows into `self_logits` only.
Var kt_loss(Var self_logits, const Tensor& teacher_logits, std::size_t k);

// weight * kt_loss(teacher_aligned, self) + (1 - weight) * sft(self, labels).
// The mixture weight must lie in [0, 1].
Var mutual_loss(Var self_logits, const Tensor& teacher_aligned, const SupervisedSequence& labels, double weight,
                std::size_t k);

// Proxy-side objective: alpha * L_kt(pool(f_lm->dpm(Y_lm)), pool(Y_dpm)) + (1 - alpha) * L_lb.
inline Var saml_loss_dpm(Var dpm_logits, const Tensor& lm_aligned, const SupervisedSequence& dpm_labels,
                         double alpha, std::size_t k) {
  return mutual_loss(dpm_logits, lm_aligned, dpm_labels, alpha, k);
}

// Peer-side objective: beta * L_kt(pool(f_dpm->lm(Y_dpm)), pool(Y_lm)) + (1 - beta) * L_lb.
inline Var saml_loss_lm(Var lm_logits, const Tensor& dpm_aligned, const SupervisedSequence& lm_labels, double beta,
                        std::size_t k) {
  return mutual_loss(lm_logits, dpm_aligned, lm_labels, beta, k);
}

}  // namespace coplms
