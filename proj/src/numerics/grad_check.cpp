#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "coplms/numerics.hpp"

namespace coplms {

namespace {

double eval_loss(const std::function<Var(Tape&)>& build_loss) {
  Tape tape;
  const double v = build_loss(tape).item();
  if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss at probe point");
  return v;
}

}  // namespace

GradCheckResult grad_check(std::span<Parameter* const> params,
                           const std::function<Var(Tape&)>& build_loss, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4]");
  }
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build_loss(tape);
    if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: non-finite loss");
    tape.backward(loss);
  }

  GradCheckResult result;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = eval_loss(build_loss);
      p->value[i] = saved - eps;
      const double down = eval_loss(build_loss);
      p->value[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      result.max_relative_error = std::max(result.max_relative_error, rel);
      ++result.checked_scalars;
    }
  }
  return result;
}

}  // namespace coplms
