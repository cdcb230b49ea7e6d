#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <limits>
#include <random>
#include <stdexcept>
#include <span>
#include <vector>

namespace ccil::loss {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes that straddled a kink
};

/// Relative error with an absolute floor: gradients smaller than `floor` in
/// magnitude are compared on an absolute scale.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences on up to `n_samples` coordinates drawn without
/// replacement. `objective()` must read the current values behind
/// `coordinates`; each coordinate is restored after probing.
///
/// ReLU, hinge and norm kinks make a central difference meaningless when one
/// lies inside [x - eps, x + eps]. Two tests catch that: the forward and
/// backward one-sided differences must agree to `one_sided_tol` (they split
/// apart at a kink, including one sitting exactly at x), and the central
/// differences at eps and eps / 2 must agree to `kink_tol`. A coordinate
/// failing either is skipped and another one is drawn. A wrong analytic
/// gradient passes both tests untouched, so it cannot hide this way.
template <class Objective>
GradCheckResult finite_diff_check(Objective&& objective, std::span<double* const> coordinates,
                                  std::span<const double> analytic, std::size_t n_samples, double eps = 1e-6,
                                  std::uint64_t seed = 0, double kink_tol = 1e-4, double one_sided_tol = 0.1) {
  if (coordinates.size() != analytic.size()) throw std::invalid_argument("one analytic gradient per coordinate");
  std::vector<std::size_t> order(coordinates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (n_samples < order.size()) {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const double f0 = objective();
  auto probe = [&](double* x, double x0, double h) {
    *x = x0 + h;
    const double up = objective();
    *x = x0 - h;
    const double down = objective();
    *x = x0;
    return std::pair{up, down};
  };
  GradCheckResult r;
  for (std::size_t idx : order) {
    if (r.checked == n_samples) break;
    double* x = coordinates[idx];
    const double x0 = *x;
    const auto [up, down] = probe(x, x0, eps);
    const auto [up2, down2] = probe(x, x0, 0.5 * eps);
    const double numeric = (up - down) / (2.0 * eps);
    const double half = (up2 - down2) / eps;
    if (relative_error((up - f0) / eps, (f0 - down) / eps) > one_sided_tol || relative_error(numeric, half) > kink_tol) {
      ++r.skipped;
      continue;
    }
    const double err = relative_error(analytic[idx], numeric);
    if (r.checked == 0 || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_coordinate = idx;
      r.worst_analytic = analytic[idx];
      r.worst_numeric = numeric;
    }
    ++r.checked;
  }
  return r;
}

}  // namespace ccil::loss
