#include "msr/gradcheck.hpp"

#include <cmath>
#include <vector>

namespace msr {

namespace {
double eval_loss(const LossBuilder& build) {
  Tape tape;
  return build(tape).scalar();
}
}  // namespace

double finite_diff_check(const LossBuilder& build, std::span<Tensor* const> params,
                         double eps) {
  if (eps <= 0.0) throw ContractError("finite_diff_check: eps must be positive");

  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double saved = p->data[i];
      p->data[i] = saved + eps;
      const double up = eval_loss(build);
      p->data[i] = saved - eps;
      const double down = eval_loss(build);
      p->data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double finite_diff_check(const LossBuilder& build, std::initializer_list<Tensor*> params,
                         double eps) {
  std::vector<Tensor*> v(params);
  return finite_diff_check(build, std::span<Tensor* const>(v.data(), v.size()), eps);
}

double finite_diff_check(const LossBuilder& build, std::span<Tensor* const> params,
                         std::span<const double> eps_ladder) {
  if (eps_ladder.empty()) throw ContractError("finite_diff_check: empty eps ladder");

  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = build(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (Tensor* p : params) analytic.push_back(p->grad);

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor* p = params[pi];
    for (std::size_t i = 0; i < p->data.size(); ++i) {
      const double saved = p->data[i];
      const double a = analytic[pi][i];
      double best = 1e300;
      for (double eps : eps_ladder) {
        p->data[i] = saved + eps;
        const double up = eval_loss(build);
        p->data[i] = saved - eps;
        const double down = eval_loss(build);
        const double numeric = (up - down) / (2.0 * eps);
        const double diff = std::abs(a - numeric);
        const double rel = diff <= 1e-10
                               ? 0.0
                               : diff / (std::abs(a) + std::abs(numeric) + 1e-12);
        best = std::min(best, rel);
      }
      p->data[i] = saved;
      worst = std::max(worst, best);
    }
  }
  return worst;
}

namespace {
constexpr double kDeepLadder[] = {1e-5, 1e-4, 1e-3, 1e-2, 5e-2};
}

double finite_diff_check_deep(const LossBuilder& build, std::span<Tensor* const> params) {
  return finite_diff_check(build, params, kDeepLadder);
}

double finite_diff_check_deep(const LossBuilder& build,
                              std::initializer_list<Tensor*> params) {
  std::vector<Tensor*> v(params);
  return finite_diff_check_deep(build, std::span<Tensor* const>(v.data(), v.size()));
}

}  // namespace msr
