#pragma once

// Mean-field thermodynamics of the S-species Potts gas: critical points of the
// free energy, the coexistence line and the pure-phase pressures.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace kacpotts {

using SpinDensity = std::vector<double>;

inline double mf_energy(const SpinDensity& rho, double lambda) {
  const double total = std::accumulate(rho.begin(), rho.end(), 0.0);
  double squares = 0.0;
  for (double r : rho) squares += r * r;
  return 0.5 * (total * total - squares) - lambda * total;
}

/// sum_s rho_s (log rho_s - 1), with 0 log 0 = 0.
inline double mf_entropy_term(const SpinDensity& rho) {
  double e = 0.0;
  for (double r : rho) {
    detail::require(r >= 0.0, "negative density");
    if (r > 0.0) e += r * (std::log(r) - 1.0);
  }
  return e;
}

inline double mf_free_energy(const SpinDensity& rho, double beta, double lambda) {
  detail::require(beta > 0.0, "beta must be positive");
  return mf_energy(rho, lambda) + mf_entropy_term(rho) / beta;
}

/// dF/drho_s = sum_{s' != s} rho_s' - lambda + log(rho_s) / beta.
inline std::vector<double> mf_gradient(const SpinDensity& rho, double beta, double lambda) {
  const double total = std::accumulate(rho.begin(), rho.end(), 0.0);
  std::vector<double> g(rho.size());
  for (std::size_t s = 0; s < rho.size(); ++s) {
    detail::require(rho[s] > 0.0, "gradient needs strictly positive densities");
    g[s] = total - rho[s] - lambda + std::log(rho[s]) / beta;
  }
  return g;
}

inline std::vector<double> fixed_point_residual(const SpinDensity& rho, double beta, double lambda) {
  detail::require(beta > 0.0, "beta must be positive");
  const double total = std::accumulate(rho.begin(), rho.end(), 0.0);
  std::vector<double> r(rho.size());
  for (std::size_t s = 0; s < rho.size(); ++s) r[s] = rho[s] - std::exp(-beta * (total - rho[s] - lambda));
  return r;
}

inline double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// Smallest eigenvalue of diag(1/(beta rho)) + (ones - identity).
inline double kappa_star(const SpinDensity& rho, double beta) {
  detail::require(beta > 0.0, "beta must be positive");
  const auto S = static_cast<Eigen::Index>(rho.size());
  Eigen::MatrixXd L = Eigen::MatrixXd::Ones(S, S);
  for (Eigen::Index s = 0; s < S; ++s) {
    if (!(rho[s] > 0.0)) throw std::invalid_argument("kappa_star: zero density component");
    L(s, s) = 1.0 / (beta * rho[s]);
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L, Eigen::EigenvaluesOnly);
  return es.eigenvalues()(0);
}

struct CriticalPoint {
  SpinDensity rho;
  double free_energy = 0.0;
  double kappa = 0.0;
  double residual = 0.0;
  bool local_min = false;
  bool global_min = false;
};

struct MinimizerSearch {
  std::vector<CriticalPoint> points;  // sorted by free energy, then lexicographically
  std::vector<std::string> failures;  // one entry per start that did not converge
  std::vector<std::string> warnings;

  std::vector<CriticalPoint> minima() const {
    std::vector<CriticalPoint> out;
    for (const auto& p : points)
      if (p.local_min) out.push_back(p);
    return out;
  }
  std::vector<CriticalPoint> global_minima() const {
    std::vector<CriticalPoint> out;
    for (const auto& p : points)
      if (p.global_min) out.push_back(p);
    return out;
  }
};

struct SolverOptions {
  double theta = 0.5;
  double theta_fallback = 0.1;
  int max_iterations = 20000;
  double tolerance = 1e-12;
  double dedup_tolerance = 1e-8;
};

namespace detail {

// In log coordinates v = log rho the critical-point equation reads
// v_s = -beta (sum_{s' != s} e^{v_s'} - lambda).
inline std::vector<double> log_map(const std::vector<double>& v, double beta, double lambda) {
  double total = 0.0;
  for (double x : v) total += std::exp(x);
  std::vector<double> out(v.size());
  for (std::size_t s = 0; s < v.size(); ++s) out[s] = -beta * (total - std::exp(v[s]) - lambda);
  return out;
}

/// Newton's method on v + beta (M e^v - lambda) = 0. Returns nullopt when the
/// iteration stalls or leaves the representable range.
inline std::optional<SpinDensity> newton_polish(SpinDensity rho, double beta, double lambda, int max_iter = 60) {
  const auto S = static_cast<Eigen::Index>(rho.size());
  Eigen::VectorXd v(S);
  for (Eigen::Index s = 0; s < S; ++s) {
    if (!(rho[s] > 0.0)) return std::nullopt;
    v(s) = std::log(rho[s]);
  }
  auto residual = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd e = x.array().exp();
    const double total = e.sum();
    Eigen::VectorXd F(S);
    for (Eigen::Index s = 0; s < S; ++s) F(s) = x(s) + beta * (total - e(s) - lambda);
    return F;
  };
  Eigen::VectorXd F = residual(v);
  for (int it = 0; it < max_iter; ++it) {
    const double norm = F.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(norm)) return std::nullopt;
    if (norm < 1e-14 * std::max(1.0, v.lpNorm<Eigen::Infinity>())) break;
    Eigen::VectorXd e = v.array().exp();
    Eigen::MatrixXd Jac = Eigen::MatrixXd::Identity(S, S);
    for (Eigen::Index i = 0; i < S; ++i)
      for (Eigen::Index j = 0; j < S; ++j)
        if (i != j) Jac(i, j) = beta * e(j);
    Eigen::VectorXd step = Jac.fullPivLu().solve(-F);
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      Eigen::VectorXd trial = v + t * step;
      if (trial.maxCoeff() < 700.0) {
        Eigen::VectorXd Ft = residual(trial);
        if (std::isfinite(Ft.lpNorm<Eigen::Infinity>()) && Ft.lpNorm<Eigen::Infinity>() < (1.0 - 1e-4 * t) * norm) {
          v = trial;
          F = Ft;
          accepted = true;
          break;
        }
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (norm < 1e-11) break;
      return std::nullopt;
    }
  }
  if (F.lpNorm<Eigen::Infinity>() > 1e-11) return std::nullopt;
  SpinDensity out(rho.size());
  for (Eigen::Index s = 0; s < S; ++s) out[s] = std::exp(v(s));
  return out;
}

/// Damped fixed-point iteration in log coordinates followed by Newton polish.
inline std::optional<SpinDensity> refine(const SpinDensity& start, double beta, double lambda,
                                         const SolverOptions& opt) {
  std::vector<double> v(start.size());
  for (std::size_t s = 0; s < start.size(); ++s) v[s] = std::log(std::max(start[s], 1e-300));
  double theta = opt.theta;
  double prev = std::numeric_limits<double>::infinity();
  int growth = 0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    auto Tv = log_map(v, beta, lambda);
    double res = 0.0;
    for (std::size_t s = 0; s < v.size(); ++s) res = std::max(res, std::abs(Tv[s] - v[s]));
    if (!std::isfinite(res)) return std::nullopt;
    if (res < 1e-9) break;
    if (res >= prev) {
      if (++growth >= 3) {
        theta = theta > opt.theta_fallback ? opt.theta_fallback : 0.5 * theta;
        growth = 0;
        if (theta < 1e-6) break;
      }
    } else {
      growth = 0;
    }
    prev = res;
    for (std::size_t s = 0; s < v.size(); ++s) v[s] = std::min(700.0, (1.0 - theta) * v[s] + theta * Tv[s]);
  }
  SpinDensity rho(v.size());
  for (std::size_t s = 0; s < v.size(); ++s) rho[s] = std::exp(v[s]);
  auto polished = newton_polish(rho, beta, lambda);
  if (!polished) return std::nullopt;
  if (max_abs(fixed_point_residual(*polished, beta, lambda)) >= opt.tolerance * std::max(1.0, max_abs(*polished)))
    return std::nullopt;
  return polished;
}

inline double dist_inf(const SpinDensity& a, const SpinDensity& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline std::vector<SpinDensity> canonical_starts(int S, double beta) {
  std::vector<SpinDensity> starts;
  for (double a : {0.05, 0.2, 0.5, 1.0, 2.0}) starts.emplace_back(S, a);
  for (double c : {0.5, 1.0, 2.0, 4.0})
    for (double b : {0.01, 0.05, 0.2})
      for (int k = 0; k < S; ++k) {
        SpinDensity r(S, b);
        r[k] = c;
        starts.push_back(r);
      }
  // The same family in units of 1/beta, so cold and hot systems are covered alike.
  if (std::abs(beta - 1.0) > 1e-12) {
    const std::size_t n = starts.size();
    for (std::size_t i = 0; i < n; ++i) {
      SpinDensity r = starts[i];
      for (double& x : r) x /= beta;
      starts.push_back(r);
    }
  }
  return starts;
}

}  // namespace detail

inline MinimizerSearch find_minimizers(double beta, double lambda, int S, const SolverOptions& opt = {}) {
  detail::require(beta > 0.0, "beta must be positive");
  detail::require(S >= 2, "need at least two species");
  MinimizerSearch out;
  if (S == 2) out.warnings.emplace_back("S = 2 lies outside the regime S >= 3 the theory assumes");

  const auto starts = detail::canonical_starts(S, beta);
  for (std::size_t i = 0; i < starts.size(); ++i) {
    auto rho = detail::refine(starts[i], beta, lambda, opt);
    if (!rho) {
      out.failures.push_back("start " + std::to_string(i) + " did not converge");
      continue;
    }
    const double scale = std::max(1.0, max_abs(*rho));
    bool seen = false;
    for (const auto& p : out.points)
      if (detail::dist_inf(p.rho, *rho) < opt.dedup_tolerance * scale) seen = true;
    if (seen) continue;
    CriticalPoint p;
    p.rho = *rho;
    p.free_energy = mf_free_energy(p.rho, beta, lambda);
    p.kappa = kappa_star(p.rho, beta);
    p.residual = max_abs(fixed_point_residual(p.rho, beta, lambda));
    p.local_min = p.kappa > 1e-12;
    out.points.push_back(std::move(p));
  }
  if (out.points.empty()) throw numerical_error("find_minimizers: no start converged");

  std::sort(out.points.begin(), out.points.end(), [](const CriticalPoint& x, const CriticalPoint& y) {
    if (x.free_energy != y.free_energy) return x.free_energy < y.free_energy;
    return x.rho < y.rho;
  });
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : out.points)
    if (p.local_min) best = std::min(best, p.free_energy);
  for (auto& p : out.points)
    p.global_min = p.local_min && p.free_energy <= best + 1e-9 * std::max(1.0, std::abs(best));
  return out;
}

/// The S+1 pure phases at coexistence. Index k-1 holds rho^(k); the last entry is
/// the disordered phase.
struct MfMinimizerSet {
  int S = 3;
  double beta = 1.0;
  double lambda = 0.0;
  std::vector<SpinDensity> rho;
  double a = 0.0, b = 0.0, c = 0.0, b_star = 0.0;
  double phi = 0.0;
  std::vector<double> kappa;
  std::vector<double> free_energy;
  std::vector<double> residual;

  const SpinDensity& ordered(int k) const { return rho.at(static_cast<std::size_t>(k - 1)); }
  const SpinDensity& disordered() const { return rho.back(); }
  int labels() const { return S + 1; }

  /// Half the smallest max-norm distance between two distinct phases.
  double zeta_bound() const {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rho.size(); ++i)
      for (std::size_t j = i + 1; j < rho.size(); ++j) m = std::min(m, detail::dist_inf(rho[i], rho[j]));
    return 0.5 * m;
  }

  /// Human-readable list of violated structural invariants; empty when all hold.
  std::vector<std::string> check(double residual_tol = 1e-10, double spread_tol = 1e-9) const {
    std::vector<std::string> bad;
    if (static_cast<int>(rho.size()) != S + 1) bad.emplace_back("wrong number of phases");
    for (double x : disordered())
      if (std::abs(x - a) > 1e-12 * std::max(1.0, a)) bad.emplace_back("disordered phase is not uniform");
    for (int k = 1; k <= S; ++k)
      for (int s = 0; s < S; ++s) {
        const double want = s == k - 1 ? c : b;
        if (std::abs(ordered(k)[s] - want) > 1e-12 * std::max(1.0, want)) bad.emplace_back("ordered phase off the (c,b,...,b) form");
      }
    if (!(b < c)) bad.emplace_back("b < c violated");
    if (!(S * a < b_star)) bad.emplace_back("density jump S a < b* violated");
    for (double r : residual)
      if (!(r < residual_tol)) bad.emplace_back("fixed-point residual above tolerance");
    for (double k : kappa)
      if (!(k > 0.0)) bad.emplace_back("non-positive convexity constant");
    const auto [lo, hi] = std::minmax_element(free_energy.begin(), free_energy.end());
    if (*hi - *lo > spread_tol) bad.emplace_back("free energies of the phases disagree");
    return bad;
  }
};

namespace detail {

/// Uniform critical point: a = exp(-beta((S-1)a - lambda)); unique since the
/// left side increases and the right side decreases in a.
inline double disordered_density(double beta, double lambda, int S) {
  // Solve f(u) = u + beta (S-1) e^u - beta lambda = 0 for u = log a. f is convex
  // and increasing and f(beta lambda) > 0, so Newton from there decreases monotonically.
  const double m = beta * (S - 1);
  double u = beta * lambda;
  for (int it = 0; it < 200; ++it) {
    const double step = (u + m * std::exp(u) - beta * lambda) / (1.0 + m * std::exp(u));
    u -= step;
    if (!(std::abs(step) > 1e-17 * std::max(1.0, std::abs(u)))) break;
  }
  return std::exp(u);
}

inline SpinDensity ordered_vector(double c, double b, int S, int k) {
  SpinDensity r(S, b);
  r[k - 1] = c;
  return r;
}

/// Ordered critical point with species 1 dominant, continued from a warm start.
/// Returns nullopt if the solution collapses onto the uniform branch or fails.
inline std::optional<SpinDensity> ordered_from(const SpinDensity& warm, double beta, double lambda) {
  auto r = newton_polish(warm, beta, lambda);
  if (!r) return std::nullopt;
  const double c = (*r)[0], b = (*r)[1];
  if (!(c > b * (1.0 + 1e-6))) return std::nullopt;
  if (kappa_star(*r, beta) <= 0.0) return std::nullopt;
  return r;
}

struct BranchPoint {
  double lambda;
  SpinDensity ordered;
  double g;
};

inline double gap(const SpinDensity& ord, double beta, double lambda, int S) {
  const SpinDensity dis(S, disordered_density(beta, lambda, S));
  return mf_free_energy(ord, beta, lambda) - mf_free_energy(dis, beta, lambda);
}

/// Continues the ordered branch (species 1 dominant) from (lambda0, rho0) to lambda1
/// with warm-started steps of at most 1e-3, halving on failure.
inline SpinDensity continue_ordered(SpinDensity rho, double lambda0, double lambda1, double beta) {
  double lam = lambda0;
  double step = 1e-3;
  while (lam != lambda1) {
    const double dir = lambda1 > lam ? 1.0 : -1.0;
    double next = std::abs(lambda1 - lam) <= step ? lambda1 : lam + dir * step;
    auto r = ordered_from(rho, beta, next);
    if (!r) {
      step *= 0.5;
      if (step < 1e-13) throw numerical_error("ordered branch ends near lambda = " + std::to_string(lam));
      continue;
    }
    rho = *r;
    lam = next;
  }
  return rho;
}

}  // namespace detail

struct CriticalLambdaResult {
  double lambda = 0.0;
  MfMinimizerSet set;
  bool monotone = true;  // g decreasing over every evaluated point
  int bisection_steps = 0;
  double gap = 0.0;
  std::vector<std::pair<double, double>> trace;  // (lambda, g) pairs visited
};

inline MfMinimizerSet assemble_minimizer_set(const SpinDensity& ordered1, double beta, double lambda, int S) {
  MfMinimizerSet m;
  m.S = S;
  m.beta = beta;
  m.lambda = lambda;
  m.c = ordered1[0];
  m.b = ordered1[1];
  m.a = detail::disordered_density(beta, lambda, S);
  m.b_star = (S - 1) * m.b + m.c;
  for (int k = 1; k <= S; ++k) m.rho.push_back(detail::ordered_vector(m.c, m.b, S, k));
  m.rho.emplace_back(S, m.a);
  for (const auto& r : m.rho) {
    m.free_energy.push_back(mf_free_energy(r, beta, lambda));
    m.kappa.push_back(kappa_star(r, beta));
    m.residual.push_back(max_abs(fixed_point_residual(r, beta, lambda)));
  }
  m.phi = m.free_energy.back();
  return m;
}

/// Coexistence value lambda_beta where the ordered and disordered free energies cross.
inline CriticalLambdaResult critical_lambda(double beta, int S, const SolverOptions& opt = {}) {
  detail::require(beta > 0.0, "beta must be positive");
  detail::require(S >= 2, "need at least two species");
  CriticalLambdaResult res;

  // Upper end: ordered minimum present and below the disordered one.
  std::optional<detail::BranchPoint> hi;
  for (double lam = -2.0; beta * lam < 600.0; lam = lam < 1.0 ? lam + 1.0 : 2.0 * lam) {
    auto search = find_minimizers(beta, lam, S, opt);
    for (const auto& p : search.minima()) {
      const auto top = std::max_element(p.rho.begin(), p.rho.end());
      if (top != p.rho.begin() || !(p.rho[0] > p.rho[1] * (1.0 + 1e-6))) continue;
      const double g = detail::gap(p.rho, beta, lam, S);
      res.trace.emplace_back(lam, g);
      if (g < 0.0) hi = detail::BranchPoint{lam, p.rho, g};
    }
    if (hi) break;
  }
  if (!hi) throw numerical_error("critical_lambda: no ordered branch below the disordered one (beta too small?)");

  // Walk down until g changes sign.
  detail::BranchPoint cur = *hi;
  std::optional<detail::BranchPoint> lo;
  double step = 1e-3;
  while (!lo) {
    const double lam = cur.lambda - step;
    auto r = detail::ordered_from(cur.ordered, beta, lam);
    if (!r) {
      step *= 0.5;
      if (step < 1e-13)
        throw numerical_error("critical_lambda: ordered branch ends before coexistence (bracket failure)");
      continue;
    }
    const double g = detail::gap(*r, beta, lam, S);
    res.trace.emplace_back(lam, g);
    if (g >= 0.0) {
      lo = detail::BranchPoint{lam, *r, g};
    } else {
      cur = {lam, *r, g};
    }
  }
  hi = cur;

  // Bisection on the bracket [lo, hi].
  detail::BranchPoint mid = *hi;
  for (int it = 0; it < 200; ++it) {
    const double lam = 0.5 * (lo->lambda + hi->lambda);
    auto r = detail::ordered_from(hi->ordered, beta, lam);
    if (!r) r = detail::ordered_from(lo->ordered, beta, lam);
    if (!r) throw numerical_error("critical_lambda: ordered branch lost during bisection");
    mid = {lam, *r, detail::gap(*r, beta, lam, S)};
    res.trace.emplace_back(lam, mid.g);
    ++res.bisection_steps;
    if (std::abs(mid.g) < 1e-11 * 0.1 || hi->lambda - lo->lambda < 4e-16 * std::max(1.0, std::abs(lam))) break;
    if (mid.g < 0.0) hi = mid; else lo = mid;
  }
  if (!(std::abs(mid.g) < 1e-11)) throw numerical_error("critical_lambda: bisection did not reach |g| < 1e-11");

  auto sorted = res.trace;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i].first > sorted[i - 1].first && sorted[i].second > sorted[i - 1].second) res.monotone = false;

  res.lambda = mid.lambda;
  res.gap = mid.g;
  res.set = assemble_minimizer_set(mid.ordered, beta, mid.lambda, S);
  return res;
}

struct MfPressures {
  double p_ord = 0.0;
  double p_disord = 0.0;
  SpinDensity rho_ord;
  SpinDensity rho_disord;
};

/// Pressures of the ordered (species 1) and disordered branches at lambda, with
/// the ordered branch continued from the coexistence point.
inline MfPressures mf_pressures(double beta, double lambda, const MfMinimizerSet& anchor) {
  detail::require(beta == anchor.beta, "mf_pressures: anchor computed at another beta");
  MfPressures p;
  p.rho_ord = detail::continue_ordered(anchor.ordered(1), anchor.lambda, lambda, beta);
  p.rho_disord = SpinDensity(anchor.S, detail::disordered_density(beta, lambda, anchor.S));
  if (kappa_star(p.rho_disord, beta) <= 0.0) throw numerical_error("mf_pressures: disordered branch unstable at this lambda");
  p.p_ord = -mf_free_energy(p.rho_ord, beta, lambda);
  p.p_disord = -mf_free_energy(p.rho_disord, beta, lambda);
  return p;
}

inline MfPressures mf_pressures(double beta, double lambda, int S) {
  return mf_pressures(beta, lambda, critical_lambda(beta, S).set);
}

}  // namespace kacpotts
