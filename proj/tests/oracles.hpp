#pragma once

// Independent reference computations used by the unit tests and the acceptance
// driver. Nothing here calls into the solvers it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

namespace oracle {

// Free energy on the symmetry-reduced family (c, b, ..., b), written out by hand.
inline double reduced_free_energy(double c, double b, int S, double beta, double lambda) {
  const double m = S - 1;
  const double pairs = m * c * b + 0.5 * m * (m - 1) * b * b;
  const double ent = c * (std::log(c) - 1.0) + m * b * (std::log(b) - 1.0);
  return pairs - lambda * (c + m * b) + ent / beta;
}

struct GridMin {
  double c = 0.0, b = 0.0, f = std::numeric_limits<double>::infinity();
};

// Grid search in log coordinates followed by repeated local zooming.
inline GridMin grid_refine_2d(const std::function<double(double, double)>& f, double lc0, double lc1, double lb0,
                              double lb1, const std::function<bool(double, double)>& admissible, int n = 240) {
  GridMin best;
  double bx = 0.0, by = 0.0;
  for (int i = 0; i <= n; ++i)
    for (int j = 0; j <= n; ++j) {
      const double x = lc0 + (lc1 - lc0) * i / n, y = lb0 + (lb1 - lb0) * j / n;
      const double c = std::exp(x), b = std::exp(y);
      if (!admissible(c, b)) continue;
      const double v = f(c, b);
      if (v < best.f) best = {c, b, v}, bx = x, by = y;
    }
  double hx = (lc1 - lc0) / n, hy = (lb1 - lb0) / n;
  for (int it = 0; it < 80; ++it) {
    const double cx = bx, cy = by;
    for (int i = -10; i <= 10; ++i)
      for (int j = -10; j <= 10; ++j) {
        const double x = cx + hx * i / 5.0, y = cy + hy * j / 5.0;
        const double c = std::exp(x), b = std::exp(y);
        if (!admissible(c, b)) continue;
        const double v = f(c, b);
        if (v < best.f) best = {c, b, v}, bx = x, by = y;
      }
    hx *= 0.5;
    hy *= 0.5;
  }
  return best;
}

inline std::pair<double, double> grid_refine_1d(const std::function<double(double)>& f, double l0, double l1,
                                                int n = 4000) {
  double bx = l0, bf = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= n; ++i) {
    const double x = l0 + (l1 - l0) * i / n;
    const double v = f(std::exp(x));
    if (v < bf) bf = v, bx = x;
  }
  double h = (l1 - l0) / n;
  for (int it = 0; it < 80; ++it) {
    const double cx = bx;
    for (int i = -10; i <= 10; ++i) {
      const double x = cx + h * i / 5.0;
      const double v = f(std::exp(x));
      if (v < bf) bf = v, bx = x;
    }
    h *= 0.5;
  }
  return {std::exp(bx), bf};
}

struct MfOracle {
  double lambda = 0.0, a = 0.0, b = 0.0, c = 0.0;
};

inline GridMin ordered_min(int S, double beta, double lambda) {
  auto f = [&](double c, double b) { return reduced_free_energy(c, b, S, beta, lambda); };
  return grid_refine_2d(f, std::log(1e-3), std::log(50.0), std::log(1e-6), std::log(50.0),
                        [](double c, double b) { return c > 3.0 * b; });
}

inline std::pair<double, double> disordered_min(int S, double beta, double lambda) {
  return grid_refine_1d([&](double a) { return reduced_free_energy(a, a, S, beta, lambda); }, std::log(1e-8),
                        std::log(50.0));
}

// Coexistence by bisection on the difference of the two brute-force minima.
inline MfOracle coexistence(int S, double beta, double lo, double hi) {
  auto g = [&](double lam) { return ordered_min(S, beta, lam).f - disordered_min(S, beta, lam).second; };
  double glo = g(lo);
  for (int it = 0; it < 60; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double gm = g(mid);
    if ((gm > 0) == (glo > 0)) lo = mid, glo = gm;
    else hi = mid;
  }
  MfOracle o;
  o.lambda = 0.5 * (lo + hi);
  auto om = ordered_min(S, beta, o.lambda);
  o.c = om.c;
  o.b = om.b;
  o.a = disordered_min(S, beta, o.lambda).first;
  return o;
}

// Smallest eigenvalue of diag(1/(beta rho)) + (ones - I), by bisection on the
// characteristic secular equation, independent of any linear-algebra library.
inline double kappa_secular(const std::vector<double>& rho, double beta) {
  // M = diag(d) + 1 1^T with d_s = 1/(beta rho_s) - 1. The rank-one term is
  // positive semidefinite, so the lowest eigenvalue lies in [d_(1), d_(2)] and,
  // when d_(1) is simple, solves 1 + sum 1/(d_s - t) = 0 there.
  std::vector<double> d;
  for (double r : rho) d.push_back(1.0 / (beta * r) - 1.0);
  std::sort(d.begin(), d.end());
  if (d.size() == 1) return d[0] + 1.0;
  if (d[1] - d[0] < 1e-12 * std::max(1.0, std::abs(d[0]))) return d[0];
  double lo = d[0], hi = d[1];
  auto sec = [&](double t) {
    double s = 1.0;
    for (double x : d) s += 1.0 / (x - t);
    return s;
  };
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (sec(mid) < 0) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace oracle
