#include "fqa/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace fqa {

double grad_check(const ScalarFn& fn, std::vector<Tensor>& inputs, double h, double zero_tol) {
  for (auto& in : inputs) in.zero_grad();
  Tensor loss = fn(inputs);
  std::vector<std::vector<double>> analytic;
  if (loss.requires_grad()) loss.backward();
  for (auto& in : inputs) {
    if (in.has_grad())
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    else
      analytic.emplace_back(in.numel(), 0.0);
  }

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto values = inputs[i].mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double original = values[j];
      values[j] = original + h;
      const double plus = fn(inputs).item();
      values[j] = original - h;
      const double minus = fn(inputs).item();
      values[j] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[i][j];
      if (std::abs(a) < zero_tol && std::abs(numeric) < zero_tol) continue;
      const double err = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  for (auto& in : inputs) in.zero_grad();
  return worst;
}

}  // namespace fqa
