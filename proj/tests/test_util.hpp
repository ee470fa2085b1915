#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "crpsrft/rng.hpp"
#include "crpsrft/tensor.hpp"

namespace testutil {

inline crpsrft::Tensor random_tensor(crpsrft::Shape shape,
                                     crpsrft::RngStream& rng,
                                     bool requires_grad = true,
                                     double scale = 1.0, double offset = 0.0) {
  std::vector<double> data(crpsrft::shape_numel(shape));
  for (double& v : data) v = rng.normal() * scale + offset;
  return crpsrft::Tensor::from_data(std::move(shape), std::move(data),
                                    requires_grad);
}

/// Central finite differences against reverse-mode gradients for every input
/// that requires grad. Returns the worst relative error, with an absolute
/// floor to handle tiny gradient entries.
inline double max_grad_rel_error(
    const std::function<crpsrft::Tensor(const std::vector<crpsrft::Tensor>&)>&
        f,
    std::vector<crpsrft::Tensor> inputs, double h = 1e-6) {
  crpsrft::Tensor loss = f(inputs);
  loss.backward();
  double worst = 0.0;
  for (crpsrft::Tensor& in : inputs) {
    if (!in.requires_grad()) continue;
    const std::vector<double> analytic = in.grad();
    for (std::size_t i = 0; i < in.size(); ++i) {
      const double orig = in.mutable_data()[i];
      in.mutable_data()[i] = orig + h;
      const double fp = f(inputs).item();
      in.mutable_data()[i] = orig - h;
      const double fm = f(inputs).item();
      in.mutable_data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double denom =
          std::max({std::fabs(numeric), std::fabs(analytic[i]), 1e-6});
      worst = std::max(worst, std::fabs(numeric - analytic[i]) / denom);
    }
  }
  return worst;
}

}  // namespace testutil
