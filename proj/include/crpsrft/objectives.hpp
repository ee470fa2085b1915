#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "crpsrft/errors.hpp"
#include "crpsrft/tensor.hpp"

namespace crpsrft {

/// Ensemble CRPS flavours. The skill term (1/M)sum_j |x_j - y| is shared;
/// they differ in the normaliser of the member-spread term:
///   fair:      1 / (2 M (M-1))   -- unbiased estimate of the true CRPS
///   empirical: 1 / (2 M^2)       -- plug-in estimate, biased high
enum class CrpsKind { fair, empirical };

inline Tensor mae(const Tensor& pred, const Tensor& target) {
  return mean(abs(pred - target));
}

inline Tensor mse(const Tensor& pred, const Tensor& target) {
  return mean((pred - target) * (pred - target));
}

namespace detail {

// sum_{j<k} |x_j - x_k| over a sorted copy: sum_i (2i - M + 1) x_(i)
inline double pairwise_abs_sum_sorted(std::vector<double>& vals) {
  std::sort(vals.begin(), vals.end());
  const double m = static_cast<double>(vals.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i)
    acc += (2.0 * static_cast<double>(i) - m + 1.0) * vals[i];
  return acc;
}

inline double crps_spread_norm(std::size_t m, CrpsKind kind) {
  if (m < 2) return 0.0;
  const double md = static_cast<double>(m);
  // forward uses sum over j<k, i.e. half the double sum: normalisers double
  return kind == CrpsKind::fair ? 1.0 / (md * (md - 1.0)) : 1.0 / (md * md);
}

inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// CRPS of a single scalar-component ensemble against observation y.
inline double crps_component(std::vector<double> ens, double y,
                             CrpsKind kind = CrpsKind::fair) {
  if (ens.empty()) throw ValueError("crps_component: empty ensemble");
  double skill = 0.0;
  for (double x : ens) skill += std::fabs(x - y);
  skill /= static_cast<double>(ens.size());
  const double norm = detail::crps_spread_norm(ens.size(), kind);
  const double spread =
      norm == 0.0 ? 0.0 : detail::pairwise_abs_sum_sorted(ens) * norm;
  return skill - spread;
}

/// CRPS averaged over all scalar components of a field ensemble.
/// `members` hold M pointers to arrays of length n (one field per member).
inline double crps_field(const std::vector<const double*>& members,
                         const double* target, std::size_t n,
                         CrpsKind kind = CrpsKind::fair) {
  if (members.empty()) throw ValueError("crps_field: empty ensemble");
  if (n == 0) throw ValueError("crps_field: empty field");
  const std::size_t m = members.size();
  std::vector<double> vals(m);
  double acc = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    double skill = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      vals[j] = members[j][c];
      skill += std::fabs(vals[j] - target[c]);
    }
    skill /= static_cast<double>(m);
    const double norm = detail::crps_spread_norm(m, kind);
    const double spread =
        norm == 0.0 ? 0.0 : detail::pairwise_abs_sum_sorted(vals) * norm;
    acc += skill - spread;
  }
  return acc / static_cast<double>(n);
}

/// Differentiable ensemble CRPS: per scalar component of the field, then
/// averaged over components. All members must match the target's shape.
/// Single-member ensembles degenerate to the MAE (no spread term).
inline Tensor crps_loss(const std::vector<Tensor>& members,
                        const Tensor& target,
                        CrpsKind kind = CrpsKind::fair) {
  if (members.empty()) throw ValueError("crps_loss: empty ensemble");
  const Shape& shape = target.shape();
  for (const Tensor& m : members)
    if (m.shape() != shape)
      throw ShapeError("crps_loss: member shape " + shape_str(m.shape()) +
                       " does not match target " + shape_str(shape));
  const std::size_t m = members.size();
  const std::size_t n = target.size();
  if (n == 0) throw ValueError("crps_loss: empty field");
  const double norm = detail::crps_spread_norm(m, kind);

  std::vector<const double*> xs(m);
  for (std::size_t j = 0; j < m; ++j) xs[j] = members[j].data().data();
  const double* y = target.data().data();

  double acc = 0.0;
  std::vector<double> vals(m);
  for (std::size_t c = 0; c < n; ++c) {
    double skill = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      vals[j] = xs[j][c];
      skill += std::fabs(vals[j] - y[c]);
    }
    skill /= static_cast<double>(m);
    const double spread =
        norm == 0.0 ? 0.0 : detail::pairwise_abs_sum_sorted(vals) * norm;
    acc += skill - spread;
  }
  acc /= static_cast<double>(n);

  std::vector<Tensor> parents = members;
  parents.push_back(target);
  std::vector<Tensor> captured = parents;
  return Tensor::from_op(
      "crps", {}, {acc}, std::move(parents),
      [captured, m, n, norm](detail::TensorNode& self) {
        const double g = self.grad[0] / static_cast<double>(n);
        detail::TensorNode* tgt = captured.back().node();
        std::vector<detail::TensorNode*> mem(m);
        std::vector<const double*> xs(m);
        std::vector<double*> gm(m, nullptr);
        for (std::size_t j = 0; j < m; ++j) {
          mem[j] = captured[j].node();
          xs[j] = mem[j]->value.data();
          if (mem[j]->requires_grad) {
            mem[j]->ensure_grad();
            gm[j] = mem[j]->grad.data();
          }
        }
        const double* y = tgt->value.data();
        double* gt = nullptr;
        if (tgt->requires_grad) {
          tgt->ensure_grad();
          gt = tgt->grad.data();
        }
        const double inv_m = 1.0 / static_cast<double>(m);
        std::vector<std::pair<double, std::size_t>> order(m);
        for (std::size_t c = 0; c < n; ++c) {
          double sign_sum = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            order[j] = {xs[j][c], j};
            sign_sum += detail::sign0(xs[j][c] - y[c]);
          }
          if (gt) gt[c] += g * (-inv_m * sign_sum);
          if (norm != 0.0) {
            std::sort(order.begin(), order.end());
            // spread-term subgradient: (#strictly below) - (#strictly above),
            // tied members share the same coefficient
            std::size_t a = 0;
            while (a < m) {
              std::size_t b = a + 1;
              while (b < m && order[b].first == order[a].first) ++b;
              const double coeff = static_cast<double>(a) -
                                   static_cast<double>(m - b);
              for (std::size_t i = a; i < b; ++i) {
                const std::size_t j = order[i].second;
                if (gm[j])
                  gm[j][c] += g * (inv_m * detail::sign0(xs[j][c] - y[c]) -
                                   norm * coeff);
              }
              a = b;
            }
          } else {
            for (std::size_t j = 0; j < m; ++j)
              if (gm[j])
                gm[j][c] += g * inv_m * detail::sign0(xs[j][c] - y[c]);
          }
        }
      });
}

inline Tensor fair_crps(const std::vector<Tensor>& members,
                        const Tensor& target) {
  return crps_loss(members, target, CrpsKind::fair);
}

inline Tensor empirical_crps(const std::vector<Tensor>& members,
                             const Tensor& target) {
  return crps_loss(members, target, CrpsKind::empirical);
}

/// Closed-form CRPS of a Gaussian N(mu, sigma^2) against observation y:
///   sigma * [ z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi) ],  z = (y - mu)/sigma
inline double gaussian_crps(double mu, double sigma, double y) {
  if (sigma <= 0.0) throw ValueError("gaussian_crps: sigma must be positive");
  const double z = (y - mu) / sigma;
  const double cdf = 0.5 * std::erfc(-z * M_SQRT1_2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI);
  return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(M_PI));
}

}  // namespace crpsrft
