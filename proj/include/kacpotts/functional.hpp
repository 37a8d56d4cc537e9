#pragma once

// The lattice free-energy functional F* at mesh gamma^{-1/2}, its interpolation
// toward the reference functional, the penalized minimization under the phase
// constraint, and the linear-algebra diagnostics built on top of it.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "geometry.hpp"
#include "kernel.hpp"
#include "meanfield.hpp"

namespace kacpotts {

struct FunctionalParams {
  int k = 1;
  double beta = 1.0;
  double lambda = 0.0;
  double t = 1.0;
  double eps = 0.0;  // 0 means the hard constraint
  double zeta = 0.1;
};

/// A region Lambda of a periodic universe lattice, the exterior density on its
/// complement and the phase k whose constraint is imposed inside.
template <int D>
class FunctionalProblem {
public:
  FunctionalParams params;

  FunctionalProblem(std::shared_ptr<const DiscreteKernel<D>> kernel, const Lattice<D>& universe,
                    const CellSet<D>& region, const DensityField<D>& exterior, SpinDensity rho_k,
                    FunctionalParams p, int block = 1)
      : params(p), geo_(std::make_shared<Geometry>()) {
    detail::require(kernel != nullptr, "functional: missing kernel");
    detail::require(universe.periodic, "functional: the universe lattice must be periodic");
    if (std::abs(universe.mesh - kernel->mesh()) > 1e-12 * kernel->mesh())
      throw std::invalid_argument("functional: universe mesh differs from the kernel mesh");
    if (std::abs(region.mesh() - universe.mesh) > 1e-12 * universe.mesh)
      throw std::invalid_argument("functional: region mesh differs from the kernel mesh");
    if (!(exterior.lattice == universe)) throw std::invalid_argument("functional: exterior field lattice mismatch");
    const int S = static_cast<int>(rho_k.size());
    detail::require(S >= 1 && exterior.species == S, "functional: species count mismatch");
    detail::require(p.t >= 0.0 && p.t <= 1.0, "functional: t must lie in [0,1]");
    detail::require(p.eps >= 0.0, "functional: eps must be nonnegative");
    detail::require(p.beta > 0.0, "functional: beta must be positive");
    detail::require(block >= 1, "functional: block factor must be positive");
    for (double v : exterior.values) detail::require(v >= 0.0, "functional: negative exterior density");

    Geometry& g = *geo_;
    g.kernel = std::move(kernel);
    g.universe = universe;
    g.S = S;
    g.block = block;
    g.site_of.assign(universe.size(), -1);
    for (const auto& x : region) {
      auto c = universe.linear(x);
      if (!c) throw std::invalid_argument("functional: region cell outside the universe");
      if (g.site_of[*c] < 0) {
        g.site_of[*c] = 0;
      }
    }
    for (std::size_t c = 0; c < universe.size(); ++c)
      if (g.site_of[c] >= 0) {
        g.site_of[c] = static_cast<long>(g.sites.size());
        g.sites.push_back(c);
      }
    for (int a = 0; a < D; ++a)
      if (universe.extent[a] % block != 0) throw std::invalid_argument("functional: universe not divisible into blocks");

    // Blocks of block^D cells; the region must be a union of whole blocks.
    std::vector<long> block_id(universe.size(), -1);
    for (std::size_t i = 0; i < g.sites.size(); ++i) {
      Index<D> x = universe.coords(g.sites[i]);
      Index<D> z;
      for (int a = 0; a < D; ++a) z[a] = x[a] / block;
      Lattice<D> coarse = universe;
      for (int a = 0; a < D; ++a) coarse.extent[a] = universe.extent[a] / block;
      const std::size_t zc = coarse.linear_unchecked(z);
      if (block_id[zc] < 0) {
        block_id[zc] = static_cast<long>(g.block_sites.size());
        g.block_sites.emplace_back();
      }
      g.site_block.push_back(static_cast<std::size_t>(block_id[zc]));
      g.block_sites[static_cast<std::size_t>(block_id[zc])].push_back(i);
    }
    const std::size_t nb = static_cast<std::size_t>(std::llround(volume_of_cell<D>(static_cast<double>(block))));
    for (const auto& b : g.block_sites)
      if (b.size() != nb) throw std::invalid_argument("functional: region is not a union of whole blocks");

    const auto& offs = g.kernel->v_offsets();
    g.nbr_cell.resize(g.sites.size() * offs.size());
    for (std::size_t i = 0; i < g.sites.size(); ++i) {
      const Index<D> x = universe.coords(g.sites[i]);
      for (std::size_t j = 0; j < offs.size(); ++j) {
        Index<D> y;
        for (int a = 0; a < D; ++a) y[a] = x[a] + offs[j][a];
        g.nbr_cell[i * offs.size() + j] = *universe.linear(y);
      }
    }

    ext_ = exterior;
    for (std::size_t c : g.sites)
      for (int s = 0; s < S; ++s) ext_.at(c, s) = 0.0;
    ext_conv_ = cross_sum_cells(ext_.values);

    rho_k_ = std::move(rho_k);
    const double total = std::accumulate(rho_k_.begin(), rho_k_.end(), 0.0);
    r_k_.resize(S);
    for (int s = 0; s < S; ++s) r_k_[s] = total - rho_k_[s];
  }

  const DiscreteKernel<D>& kernel() const { return *geo_->kernel; }
  const Lattice<D>& universe() const { return geo_->universe; }
  int species() const { return geo_->S; }
  int block() const { return geo_->block; }
  std::size_t block_volume() const { return geo_->block_sites.empty() ? 1 : geo_->block_sites[0].size(); }
  const std::vector<std::size_t>& sites() const { return geo_->sites; }
  std::size_t n_sites() const { return geo_->sites.size(); }
  std::size_t dim() const { return geo_->sites.size() * static_cast<std::size_t>(geo_->S); }
  long site_of(std::size_t cell) const { return geo_->site_of[cell]; }
  const std::vector<std::size_t>& site_block() const { return geo_->site_block; }
  const std::vector<std::vector<std::size_t>>& block_sites() const { return geo_->block_sites; }
  const DensityField<D>& exterior() const { return ext_; }
  const SpinDensity& rho_k() const { return rho_k_; }
  const std::vector<double>& r_k() const { return r_k_; }
  double cell_volume() const { return geo_->universe.cell_volume(); }

  CellSet<D> region() const {
    CellSet<D> out(geo_->universe.mesh);
    for (std::size_t c : geo_->sites) out.insert(geo_->universe.coords(c));
    return out;
  }

  /// Values on Lambda, site-major: out[i*S + s].
  std::vector<double> restrict_to_region(const DensityField<D>& f) const {
    if (!(f.lattice == geo_->universe) || f.species != geo_->S)
      throw std::invalid_argument("functional: density field lattice or mesh mismatch");
    std::vector<double> u(dim());
    for (std::size_t i = 0; i < n_sites(); ++i)
      for (int s = 0; s < geo_->S; ++s) u[i * geo_->S + s] = f.at(geo_->sites[i], s);
    return u;
  }

  /// Region values embedded in the universe, with the exterior field outside.
  DensityField<D> embed(const std::vector<double>& u) const {
    DensityField<D> f = ext_;
    for (std::size_t i = 0; i < n_sites(); ++i)
      for (int s = 0; s < geo_->S; ++s) f.at(geo_->sites[i], s) = u[i * geo_->S + s];
    return f;
  }

  DensityField<D> constant_field(const SpinDensity& rho) const {
    std::vector<double> u(dim());
    for (std::size_t i = 0; i < n_sites(); ++i)
      for (int s = 0; s < geo_->S; ++s) u[i * geo_->S + s] = rho[s];
    return embed(u);
  }

  /// out[i,s] = sum_{s' != s} sum_x' Vhat(x_i - x') w(x', s') for a universe-wide field w.
  std::vector<double> cross_sum_cells(const std::vector<double>& w) const {
    const auto& g = *geo_;
    const auto& vals = g.kernel->v_values();
    const std::size_t nv = vals.size();
    const int S = g.S;
    std::vector<double> out(dim());
    std::vector<double> acc(S);
    for (std::size_t i = 0; i < g.sites.size(); ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const std::size_t* nb = &g.nbr_cell[i * nv];
      for (std::size_t j = 0; j < nv; ++j) {
        const double* src = &w[nb[j] * S];
        for (int s = 0; s < S; ++s) acc[s] += vals[j] * src[s];
      }
      const double tot = std::accumulate(acc.begin(), acc.end(), 0.0);
      for (int s = 0; s < S; ++s) out[i * S + s] = tot - acc[s];
    }
    return out;
  }

  /// Same as cross_sum_cells for a field living on Lambda (zero elsewhere); an
  /// optional site mask restricts the source further.
  std::vector<double> cross_sum_sites(const std::vector<double>& u, const std::vector<char>* mask = nullptr) const {
    const auto& g = *geo_;
    std::vector<double> w(g.universe.size() * g.S, 0.0);
    for (std::size_t i = 0; i < g.sites.size(); ++i) {
      if (mask && !(*mask)[i]) continue;
      for (int s = 0; s < g.S; ++s) w[g.sites[i] * g.S + s] = u[i * g.S + s];
    }
    return cross_sum_cells(w);
  }

  /// Precomputed exterior contribution sum_{s'!=s} sum_{x' notin Lambda} Vhat rhobar (t = 1).
  const std::vector<double>& exterior_sum() const { return ext_conv_; }

  /// Block averages of a region vector, per block and species.
  std::vector<double> block_means(const std::vector<double>& u) const {
    const int S = geo_->S;
    std::vector<double> out(geo_->block_sites.size() * S, 0.0);
    for (std::size_t b = 0; b < geo_->block_sites.size(); ++b) {
      for (std::size_t i : geo_->block_sites[b])
        for (int s = 0; s < S; ++s) out[b * S + s] += u[i * S + s];
      for (int s = 0; s < S; ++s) out[b * S + s] /= static_cast<double>(geo_->block_sites[b].size());
    }
    return out;
  }

  /// Largest distance of a block average from the band [rho_k - zeta, rho_k + zeta].
  double constraint_violation(const std::vector<double>& u) const {
    const auto av = block_means(u);
    const int S = geo_->S;
    double v = 0.0;
    for (std::size_t b = 0; b < geo_->block_sites.size(); ++b)
      for (int s = 0; s < S; ++s) v = std::max(v, std::abs(av[b * S + s] - rho_k_[s]) - params.zeta);
    return std::max(v, 0.0);
  }

  /// Same test on the exterior blocks that interact with Lambda.
  double exterior_violation() const {
    const auto& g = *geo_;
    const int S = g.S;
    const int m = g.block;
    Lattice<D> coarse = g.universe;
    coarse.mesh *= m;
    for (int a = 0; a < D; ++a) coarse.extent[a] /= m;
    std::vector<char> touched(coarse.size(), 0);
    for (std::size_t idx = 0; idx < g.nbr_cell.size(); ++idx) {
      const std::size_t c = g.nbr_cell[idx];
      if (g.site_of[c] >= 0) continue;
      Index<D> z = g.universe.coords(c);
      for (int a = 0; a < D; ++a) z[a] /= m;
      touched[coarse.linear_unchecked(z)] = 1;
    }
    const DensityField<D> av = block_average(ext_, coarse.mesh);
    double v = 0.0;
    for (std::size_t b = 0; b < coarse.size(); ++b) {
      if (!touched[b]) continue;
      for (int s = 0; s < S; ++s) v = std::max(v, std::abs(av.at(b, s) - rho_k_[s]) - params.zeta);
    }
    return std::max(v, 0.0);
  }

private:
  struct Geometry {
    std::shared_ptr<const DiscreteKernel<D>> kernel;
    Lattice<D> universe;
    int S = 1;
    int block = 1;
    std::vector<long> site_of;
    std::vector<std::size_t> sites;
    std::vector<std::size_t> site_block;
    std::vector<std::vector<std::size_t>> block_sites;
    std::vector<std::size_t> nbr_cell;
  };
  std::shared_ptr<Geometry> geo_;
  DensityField<D> ext_;
  std::vector<double> ext_conv_;
  SpinDensity rho_k_;
  std::vector<double> r_k_;
};

namespace detail {

inline double penalty_upper(double av, double target, double zeta) { return std::max(av - (target + zeta), 0.0); }
inline double penalty_lower(double av, double target, double zeta) { return std::min(av - (target - zeta), 0.0); }

template <int D>
void check_region_vector(const FunctionalProblem<D>& prob, const std::vector<double>& u) {
  if (u.size() != prob.dim()) throw std::invalid_argument("functional: field size mismatch");
  for (double v : u)
    if (!(v >= 0.0)) throw std::invalid_argument("functional: negative density");
}

/// f / h^D for a region vector.
template <int D>
double site_functional(const FunctionalProblem<D>& prob, const std::vector<double>& u) {
  const auto& p = prob.params;
  const int S = prob.species();
  const auto inner = prob.cross_sum_sites(u);
  const auto& ext = prob.exterior_sum();
  double f = 0.0;
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    for (int s = 0; s < S; ++s) {
      const std::size_t q = i * S + s;
      const double r = u[q];
      f += p.t * r * (0.5 * inner[q] + ext[q]) + (1.0 - p.t) * prob.r_k()[s] * r - p.lambda * r;
      if (r > 0.0) f += r * (std::log(r) - 1.0) / p.beta;
    }
  if (p.eps > 0.0) {
    const auto av = prob.block_means(u);
    double pen = 0.0;
    for (std::size_t b = 0; b < prob.block_sites().size(); ++b)
      for (int s = 0; s < S; ++s) {
        const double hi = penalty_upper(av[b * S + s], prob.rho_k()[s], p.zeta);
        const double lo = penalty_lower(av[b * S + s], prob.rho_k()[s], p.zeta);
        pen += static_cast<double>(prob.block_sites()[b].size()) * (hi * hi * hi * hi + lo * lo * lo * lo);
      }
    f += pen / (4.0 * p.eps);
  }
  return f;
}

/// Gradient of f / h^D. With penalty = false the epsilon term is left out.
template <int D>
std::vector<double> site_gradient(const FunctionalProblem<D>& prob, const std::vector<double>& u, bool penalty = true) {
  const auto& p = prob.params;
  const int S = prob.species();
  auto g = prob.cross_sum_sites(u);
  const auto& ext = prob.exterior_sum();
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    for (int s = 0; s < S; ++s) {
      const std::size_t q = i * S + s;
      if (!(u[q] > 0.0)) throw std::invalid_argument("functional: gradient needs positive densities");
      g[q] = p.t * (g[q] + ext[q]) + (1.0 - p.t) * prob.r_k()[s] + std::log(u[q]) / p.beta - p.lambda;
    }
  if (penalty && p.eps > 0.0) {
    const auto av = prob.block_means(u);
    for (std::size_t i = 0; i < prob.n_sites(); ++i) {
      const std::size_t b = prob.site_block()[i];
      for (int s = 0; s < S; ++s) {
        const double hi = penalty_upper(av[b * S + s], prob.rho_k()[s], p.zeta);
        const double lo = penalty_lower(av[b * S + s], prob.rho_k()[s], p.zeta);
        g[i * S + s] += (hi * hi * hi + lo * lo * lo) / p.eps;
      }
    }
  }
  return g;
}

/// Per-site Hessian B = D^2 f / h^D applied to w, at the point u.
template <int D>
std::vector<double> site_hessian_apply(const FunctionalProblem<D>& prob, const std::vector<double>& u,
                                       const std::vector<double>& av, const std::vector<double>& w) {
  const auto& p = prob.params;
  const int S = prob.species();
  auto out = prob.cross_sum_sites(w);
  for (std::size_t q = 0; q < out.size(); ++q) out[q] = p.t * out[q] + w[q] / (p.beta * u[q]);
  if (p.eps > 0.0) {
    const auto wav = prob.block_means(w);
    for (std::size_t i = 0; i < prob.n_sites(); ++i) {
      const std::size_t b = prob.site_block()[i];
      for (int s = 0; s < S; ++s) {
        const double hi = penalty_upper(av[b * S + s], prob.rho_k()[s], p.zeta);
        const double lo = penalty_lower(av[b * S + s], prob.rho_k()[s], p.zeta);
        const double phi = 3.0 * (hi * hi + lo * lo) / p.eps;
        out[i * S + s] += phi * wav[b * S + s];
      }
    }
  }
  return out;
}

}  // namespace detail

/// f_{Lambda,t} (the functional F* when t = 1), including the epsilon penalty when eps > 0.
template <int D>
double f_star(const DensityField<D>& rho, const FunctionalProblem<D>& prob) {
  const auto u = prob.restrict_to_region(rho);
  detail::check_region_vector(prob, u);
  return prob.cell_volume() * detail::site_functional(prob, u);
}

/// Gradient of f_star with respect to rho(x,s) on Lambda, as a universe field (zero off Lambda).
template <int D>
DensityField<D> f_star_gradient(const DensityField<D>& rho, const FunctionalProblem<D>& prob) {
  const auto u = prob.restrict_to_region(rho);
  detail::check_region_vector(prob, u);
  auto g = detail::site_gradient(prob, u);
  DensityField<D> out(prob.universe(), prob.species());
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    for (int s = 0; s < prob.species(); ++s) out.at(prob.sites()[i], s) = prob.cell_volume() * g[i * prob.species() + s];
  return out;
}

// ---------------------------------------------------------------------------
// The map T_mu on a sub-region C of Lambda.

template <int D>
struct TMuSetup {
  std::vector<char> mask;    // sites of C
  std::vector<double> psi;   // exterior field seen from C (already scaled by t)
};

template <int D>
TMuSetup<D> t_mu_setup(const DensityField<D>& rho, const FunctionalProblem<D>& prob, const CellSet<D>& region) {
  TMuSetup<D> st;
  st.mask.assign(prob.n_sites(), 0);
  for (const auto& x : region) {
    auto c = prob.universe().linear(x);
    if (!c || prob.site_of(*c) < 0) throw std::invalid_argument("t_mu_map: region must lie inside Lambda");
    st.mask[static_cast<std::size_t>(prob.site_of(*c))] = 1;
  }
  const auto u = prob.restrict_to_region(rho);
  std::vector<char> rest(st.mask.size());
  for (std::size_t i = 0; i < rest.size(); ++i) rest[i] = !st.mask[i];
  st.psi = prob.cross_sum_sites(u, &rest);
  const auto& ext = prob.exterior_sum();
  for (std::size_t q = 0; q < st.psi.size(); ++q) st.psi[q] = prob.params.t * (st.psi[q] + ext[q]);
  return st;
}

/// One application of T_mu on C; values of rho outside C act as exterior and are copied unchanged.
template <int D>
DensityField<D> t_mu_map(const DensityField<D>& rho, const std::vector<double>& mu, double tau,
                         const FunctionalProblem<D>& prob, const CellSet<D>& region) {
  const int S = prob.species();
  detail::require(static_cast<int>(mu.size()) == S, "t_mu_map: mu has the wrong length");
  detail::require(tau >= 0.0 && tau <= 1.0, "t_mu_map: tau must lie in [0,1]");
  const auto st = t_mu_setup(rho, prob, region);
  const auto u = prob.restrict_to_region(rho);
  const auto inner = prob.cross_sum_sites(u, &st.mask);
  const auto& p = prob.params;
  DensityField<D> out = rho;
  for (std::size_t i = 0; i < prob.n_sites(); ++i) {
    if (!st.mask[i]) continue;
    for (int s = 0; s < S; ++s) {
      const std::size_t q = i * S + s;
      const double arg = tau * p.t * inner[q] + st.psi[q] - p.lambda - mu[s] + (1.0 - p.t) * prob.r_k()[s];
      out.at(prob.sites()[i], s) = std::exp(-p.beta * arg);
    }
  }
  return out;
}

/// Upper bound on the max-norm Lipschitz constant of T_mu on C.
template <int D>
double t_mu_lipschitz_bound(const std::vector<double>& mu, double tau, const FunctionalProblem<D>& prob,
                            const CellSet<D>& region) {
  const auto& p = prob.params;
  DensityField<D> ones = prob.constant_field(SpinDensity(prob.species(), 1.0));
  TMuSetup<D> st = t_mu_setup(ones, prob, region);
  std::vector<double> indicator(prob.dim(), 0.0);
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    if (st.mask[i]) indicator[i * prob.species()] = 1.0;
  const auto row = prob.cross_sum_sites(indicator, &st.mask);  // sum over C of Vhat, seen by species != 0
  double mass = 0.0;
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    if (st.mask[i]) mass = std::max(mass, row[i * prob.species() + (prob.species() > 1 ? 1 : 0)]);
  const double mu_max = *std::max_element(mu.begin(), mu.end());
  return p.beta * std::exp(p.beta * (p.lambda + mu_max)) * tau * p.t * (prob.species() - 1) * mass;
}

/// g_mu(rho_C; rho_{C^c}, tau) per site (no h^D factor) and its gradient on C.
template <int D>
std::pair<double, std::vector<double>> g_mu(const DensityField<D>& rho, const std::vector<double>& mu, double tau,
                                            const FunctionalProblem<D>& prob, const CellSet<D>& region) {
  const int S = prob.species();
  const auto st = t_mu_setup(rho, prob, region);
  const auto u = prob.restrict_to_region(rho);
  const auto inner = prob.cross_sum_sites(u, &st.mask);
  const auto& p = prob.params;
  double g = 0.0;
  std::vector<double> grad;
  for (std::size_t i = 0; i < prob.n_sites(); ++i) {
    if (!st.mask[i]) continue;
    for (int s = 0; s < S; ++s) {
      const std::size_t q = i * S + s;
      const double r = u[q];
      g += 0.5 * tau * p.t * r * inner[q] + r * st.psi[q] + (1.0 - p.t) * prob.r_k()[s] * r - p.lambda * r - mu[s] * r;
      if (r > 0.0) g += r * (std::log(r) - 1.0) / p.beta;
      grad.push_back(tau * p.t * inner[q] + st.psi[q] + (1.0 - p.t) * prob.r_k()[s] + std::log(r) / p.beta -
                     p.lambda - mu[s]);
    }
  }
  return {g, grad};
}

struct FixedPointReport {
  int iterations = 0;
  double update = 0.0;
  bool converged = false;
};

/// Damped iteration of T_mu on C to its fixed point.
template <int D>
std::pair<DensityField<D>, FixedPointReport> solve_t_mu(DensityField<D> rho, const std::vector<double>& mu, double tau,
                                                        const FunctionalProblem<D>& prob, const CellSet<D>& region,
                                                        double tol = 1e-12, int max_iter = 100000) {
  FixedPointReport rep;
  double theta = 0.5, prev = std::numeric_limits<double>::infinity();
  int growth = 0;
  for (rep.iterations = 0; rep.iterations < max_iter; ++rep.iterations) {
    auto next = t_mu_map(rho, mu, tau, prob, region);
    double upd = 0.0;
    for (std::size_t q = 0; q < rho.values.size(); ++q) upd = std::max(upd, std::abs(next.values[q] - rho.values[q]));
    rep.update = upd;
    if (upd < tol) {
      rho = std::move(next);
      rep.converged = true;
      break;
    }
    if (upd >= prev && ++growth >= 3) {
      theta *= 0.5;
      growth = 0;
    } else if (upd < prev) {
      growth = 0;
    }
    prev = upd;
    for (std::size_t q = 0; q < rho.values.size(); ++q)
      if (next.values[q] != rho.values[q])
        rho.values[q] = std::exp((1.0 - theta) * std::log(rho.values[q]) + theta * std::log(next.values[q]));
  }
  return {rho, rep};
}

// ---------------------------------------------------------------------------
// Constrained minimization.

struct MinimizeOptions {
  std::vector<double> eps_schedule{1e-1, 1e-2, 1e-3, 1e-4};
  double violation_tol = 1e-9;
  double tol = 1e-11;  // max-norm of the fixed-point update
  double theta = 0.5;
  int max_fixed_point = 3000;
  int max_newton = 200;
};

struct MinimizeDiagnostics {
  bool converged = false;
  double update = 0.0;             // max |T(rho) - rho| at the end
  double gradient_free = 0.0;      // max |grad f| / h^D on blocks where no constraint is active
  double multiplier_sign = 0.0;    // worst wrong-signed gradient on active blocks (0 when correct)
  int active_blocks = 0;
  double violation = 0.0;          // hard-constraint violation of the result
  double max_deviation = 0.0;      // max |rho - rho_k|
  double eps = 0.0;                // last penalty used
  std::vector<double> eps_used;
  int fixed_point_iterations = 0;
  int newton_iterations = 0;
  double exterior_violation = 0.0;
};

namespace detail {

template <int D>
double update_norm(const FunctionalProblem<D>& prob, const std::vector<double>& u, const std::vector<double>& g) {
  double m = 0.0;
  for (std::size_t q = 0; q < u.size(); ++q) m = std::max(m, std::abs(u[q] * std::expm1(-prob.params.beta * g[q])));
  return m;
}

/// Preconditioned conjugate gradients for B x = b; stops early on negative curvature.
template <int D>
std::vector<double> newton_direction(const FunctionalProblem<D>& prob, const std::vector<double>& u,
                                     const std::vector<double>& g, double rel_tol) {
  const std::size_t n = u.size();
  const auto av = prob.block_means(u);
  std::vector<double> diag(n);
  for (std::size_t q = 0; q < n; ++q) diag[q] = 1.0 / (prob.params.beta * u[q]);
  std::vector<double> x(n, 0.0), r(n), z(n), p(n);
  for (std::size_t q = 0; q < n; ++q) r[q] = -g[q];
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  };
  for (std::size_t q = 0; q < n; ++q) z[q] = r[q] / diag[q];
  p = z;
  double rz = dot(r, z);
  const double r0 = std::sqrt(dot(r, r));
  for (std::size_t it = 0; it < std::min<std::size_t>(n, 500); ++it) {
    const auto Ap = site_hessian_apply(prob, u, av, p);
    const double pAp = dot(p, Ap);
    if (!(pAp > 0.0)) {
      if (it == 0) return std::vector<double>(r.begin(), r.end());
      break;
    }
    const double alpha = rz / pAp;
    for (std::size_t q = 0; q < n; ++q) {
      x[q] += alpha * p[q];
      r[q] -= alpha * Ap[q];
    }
    if (std::sqrt(dot(r, r)) < rel_tol * r0) break;
    for (std::size_t q = 0; q < n; ++q) z[q] = r[q] / diag[q];
    const double rz_new = dot(r, z);
    for (std::size_t q = 0; q < n; ++q) p[q] = z[q] + (rz_new / rz) * p[q];
    rz = rz_new;
  }
  return x;
}

/// Minimizes f / h^D at the problem's eps, starting from u (modified in place).
template <int D>
void minimize_fixed_eps(const FunctionalProblem<D>& prob, std::vector<double>& u, const MinimizeOptions& opt,
                        MinimizeDiagnostics& diag) {
  const double beta = prob.params.beta;
  double theta = opt.theta;
  double prev = std::numeric_limits<double>::infinity();
  int growth = 0;
  // Damped fixed-point sweeps in log coordinates (Jacobi style).
  for (int it = 0; it < opt.max_fixed_point; ++it) {
    const auto g = site_gradient(prob, u);
    const double upd = update_norm(prob, u, g);
    diag.update = upd;
    ++diag.fixed_point_iterations;
    if (upd < opt.tol) return;
    if (upd < 1e-6 && it > 20) break;
    if (upd >= prev) {
      if (++growth >= 3) {
        theta *= 0.5;
        growth = 0;
        if (theta < 1e-3) break;
      }
    } else {
      growth = 0;
    }
    prev = upd;
    for (std::size_t q = 0; q < u.size(); ++q) u[q] *= std::exp(-theta * beta * g[q]);
  }
  // Newton-CG with a backtracking line search on the functional.
  double f = site_functional(prob, u);
  for (int it = 0; it < opt.max_newton; ++it) {
    const auto g = site_gradient(prob, u);
    const double upd = update_norm(prob, u, g);
    diag.update = upd;
    if (upd < opt.tol) return;
    ++diag.newton_iterations;
    auto dir = newton_direction(prob, u, g, 1e-6);
    double slope = std::inner_product(g.begin(), g.end(), dir.begin(), 0.0);
    if (!(slope < 0.0)) {
      for (std::size_t q = 0; q < dir.size(); ++q) dir[q] = -g[q] * u[q];
      slope = std::inner_product(g.begin(), g.end(), dir.begin(), 0.0);
    }
    double step = 1.0;
    for (std::size_t q = 0; q < u.size(); ++q)
      if (dir[q] < 0.0) step = std::min(step, -0.9 * u[q] / dir[q]);
    bool moved = false;
    for (int ls = 0; ls < 60; ++ls) {
      std::vector<double> trial(u.size());
      for (std::size_t q = 0; q < u.size(); ++q) trial[q] = u[q] + step * dir[q];
      const double ft = site_functional(prob, trial);
      if (ft <= f + 1e-4 * step * slope || (ls > 30 && ft <= f)) {
        u = std::move(trial);
        f = ft;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    if (!moved) {
      // Rounding floor of the functional value; take the full Newton step when it reduces the residual.
      std::vector<double> trial(u.size());
      for (std::size_t q = 0; q < u.size(); ++q) trial[q] = std::max(u[q] + dir[q], 0.1 * u[q]);
      const double tu = update_norm(prob, trial, site_gradient(prob, trial));
      if (!(tu < upd)) return;
      u = std::move(trial);
      f = site_functional(prob, u);
    }
  }
}

}  // namespace detail

/// Minimizer of f_{Lambda,t} over the k-restricted set, via penalty continuation.
template <int D>
std::pair<DensityField<D>, MinimizeDiagnostics> minimize_constrained(const FunctionalProblem<D>& problem,
                                                                     const DensityField<D>* start = nullptr,
                                                                     const MinimizeOptions& opt = {}) {
  MinimizeDiagnostics diag;
  diag.exterior_violation = problem.exterior_violation();
  if (diag.exterior_violation > 1e-12)
    throw std::invalid_argument("minimize_constrained: exterior field is not in the k-restricted set");
  std::vector<double> u = start ? problem.restrict_to_region(*start)
                                : problem.restrict_to_region(problem.constant_field(problem.rho_k()));
  for (double& v : u) {
    if (!(v >= 0.0)) throw std::invalid_argument("minimize_constrained: negative start density");
    v = std::max(v, 1e-300);
  }

  std::vector<double> schedule = problem.params.eps > 0.0 ? std::vector<double>{problem.params.eps} : opt.eps_schedule;
  FunctionalProblem<D> prob = problem;
  for (std::size_t i = 0;; ++i) {
    const double eps = i < schedule.size() ? schedule[i] : diag.eps / 10.0;
    prob.params.eps = eps;
    diag.eps = eps;
    diag.eps_used.push_back(eps);
    detail::minimize_fixed_eps(prob, u, opt, diag);
    diag.violation = prob.constraint_violation(u);
    if (problem.params.eps > 0.0) break;
    if (diag.violation < opt.violation_tol) break;
    if (eps < 1e-14) break;
  }
  diag.converged = diag.update < opt.tol && (problem.params.eps > 0.0 || diag.violation < opt.violation_tol);

  // Optimality report: free blocks have zero gradient, active blocks a one-signed one.
  const int S = prob.species();
  const auto g = detail::site_gradient(prob, u, false);
  const auto av = prob.block_means(u);
  for (std::size_t b = 0; b < prob.block_sites().size(); ++b)
    for (int s = 0; s < S; ++s) {
      const double dev = av[b * S + s] - prob.rho_k()[s];
      const int side = dev > prob.params.zeta - 1e-9 ? 1 : (dev < -prob.params.zeta + 1e-9 ? -1 : 0);
      if (side != 0) ++diag.active_blocks;
      for (std::size_t i : prob.block_sites()[b]) {
        const double gi = g[i * S + s];
        if (side == 0) diag.gradient_free = std::max(diag.gradient_free, std::abs(gi));
        else diag.multiplier_sign = std::max(diag.multiplier_sign, side > 0 ? gi : -gi);
      }
    }
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    for (int s = 0; s < S; ++s) diag.max_deviation = std::max(diag.max_deviation, std::abs(u[i * S + s] - prob.rho_k()[s]));
  return {problem.embed(u), diag};
}

// ---------------------------------------------------------------------------
// Spectral and energetic diagnostics.

struct LanczosReport {
  double value = 0.0;
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;
};

/// Smallest eigenvalue of a symmetric operator by Lanczos with full reorthogonalization.
template <typename Apply>
LanczosReport lanczos_min_eig(Apply&& apply, std::size_t n, double tol = 1e-10, std::size_t max_iter = 400) {
  LanczosReport rep;
  max_iter = std::min(max_iter, n);
  std::vector<Eigen::VectorXd> V;
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) v(i) = 1.0 + 0.5 * std::sin(1.0 + 2.399963 * static_cast<double>(i));
  v.normalize();
  std::vector<double> alpha, beta;
  double last = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < max_iter; ++j) {
    V.push_back(v);
    std::vector<double> vin(v.data(), v.data() + n);
    auto wv = apply(vin);
    Eigen::VectorXd w = Eigen::Map<Eigen::VectorXd>(wv.data(), static_cast<Eigen::Index>(n));
    const double a = w.dot(v);
    alpha.push_back(a);
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : V) w -= w.dot(q) * q;
    const double b = w.norm();
    const auto m = static_cast<Eigen::Index>(alpha.size());
    Eigen::VectorXd diag = Eigen::Map<Eigen::VectorXd>(alpha.data(), m);
    Eigen::VectorXd off = m > 1 ? Eigen::Map<Eigen::VectorXd>(beta.data(), m - 1) : Eigen::VectorXd();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, off, Eigen::ComputeEigenvectors);
    const double theta = es.eigenvalues()(0);
    const double res = std::abs(b * es.eigenvectors()(m - 1, 0));
    rep.value = theta;
    rep.iterations = static_cast<int>(j + 1);
    rep.residual = res;
    if (res < tol * std::max(1.0, std::abs(theta)) || b < 1e-14 || (j > 5 && std::abs(theta - last) < 1e-14 && res < 1e-6)) {
      rep.converged = true;
      break;
    }
    last = theta;
    beta.push_back(b);
    v = w / b;
  }
  if (!rep.converged && rep.iterations == static_cast<int>(n)) rep.converged = true;
  return rep;
}

/// Smallest eigenvalue of B = D^2 f / h^D (kernel, entropy and penalty parts).
template <int D>
LanczosReport hessian_min_eig(const DensityField<D>& rho, const FunctionalProblem<D>& prob) {
  const auto u = prob.restrict_to_region(rho);
  for (double v : u)
    if (!(v > 0.0)) throw std::invalid_argument("hessian_min_eig: densities must be positive");
  const auto av = prob.block_means(u);
  auto rep = lanczos_min_eig([&](const std::vector<double>& w) { return detail::site_hessian_apply(prob, u, av, w); },
                             u.size());
  if (!rep.converged) throw numerical_error("hessian_min_eig: Lanczos did not converge");
  return rep;
}

/// Excess energy of the region Omega relative to phase rho_k, evaluated with the
/// lattice kernel on the universe: the exterior copy of rho_k on Omega^c is
/// smeared by Jhat and the energy deficit is integrated over both sides.
template <int D>
double excess_energy_I_k(const CellSet<D>& omega, const SpinDensity& rho_k, const DiscreteKernel<D>& kernel,
                         const Lattice<D>& universe, double lambda) {
  detail::require(universe.periodic, "excess_energy_I_k: the universe must be periodic");
  const int S = static_cast<int>(rho_k.size());
  const std::size_t N = universe.size();
  std::vector<char> in(N, 0);
  for (const auto& x : omega) {
    auto c = universe.linear(x);
    if (!c) throw std::invalid_argument("excess_energy_I_k: cell outside the universe");
    in[*c] = 1;
  }
  const double h = volume_of_cell<D>(universe.mesh);
  // Jhat * chi is rho_k times the Jhat-mass of Omega^c seen from x.
  double total = 0.0;
  const double e_k = mf_energy(rho_k, lambda);
  for (std::size_t c = 0; c < N; ++c) {
    const Index<D> x = universe.coords(c);
    double mass = 0.0;
    for (const auto& o : kernel.j_offsets()) {
      Index<D> y;
      for (int a = 0; a < D; ++a) y[a] = x[a] + o[a];
      if (!in[*universe.linear(y)]) mass += h * kernel.J_at(o);
    }
    SpinDensity smeared(S);
    for (int s = 0; s < S; ++s) smeared[s] = mass * rho_k[s];
    const double e = mf_energy(smeared, lambda);
    total += in[c] ? -e : e_k - e;
  }
  return h * total;
}

/// Euclidean distance from each site centre of Lambda to the nearest cube of Lambda^c.
template <int D>
std::vector<double> distance_to_complement(const FunctionalProblem<D>& prob) {
  const auto& U = prob.universe();
  std::vector<Index<D>> outside;
  for (std::size_t c = 0; c < U.size(); ++c)
    if (prob.site_of(c) < 0) outside.push_back(U.coords(c));
  std::vector<double> d(prob.n_sites(), std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < prob.n_sites(); ++i) {
    const Index<D> x = U.coords(prob.sites()[i]);
    for (const auto& y : outside) {
      double s2 = 0.0;
      for (int a = 0; a < D; ++a) {
        auto delta = std::abs(x[a] - y[a]);
        delta = std::min(delta, U.extent[a] - delta);
        const double gap = std::max(0.0, static_cast<double>(delta) - 0.5);
        s2 += gap * gap;
      }
      d[i] = std::min(d[i], std::sqrt(s2) * U.mesh);
    }
  }
  return d;
}

struct DecayFit {
  double omega = 0.0;      // rate in c exp(-omega gamma dist)
  double slope = 0.0;      // d log(deviation) / d dist
  double intercept = 0.0;
  double r2 = 0.0;
  int shells = 0;
  bool flat = false;
};

/// Least-squares fit of log(shell maximum) against distance.
inline DecayFit decay_fit(const std::vector<double>& deviation, const std::vector<double>& distance, double gamma) {
  detail::require(deviation.size() == distance.size(), "decay_fit: size mismatch");
  detail::require(gamma > 0.0, "decay_fit: gamma must be positive");
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < deviation.size(); ++i) pts.emplace_back(distance[i], std::max(std::abs(deviation[i]), 1e-300));
  std::sort(pts.begin(), pts.end());
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < pts.size();) {
    std::size_t j = i;
    double m = 0.0;
    while (j < pts.size() && std::abs(pts[j].first - pts[i].first) <= 1e-9 * std::max(1.0, pts[i].first)) {
      m = std::max(m, pts[j].second);
      ++j;
    }
    xs.push_back(pts[i].first);
    ys.push_back(std::log(m));
    i = j;
  }
  DecayFit fit;
  fit.shells = static_cast<int>(xs.size());
  if (fit.shells < 4) throw std::invalid_argument("decay_fit: fewer than four distance shells");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  fit.omega = -fit.slope / gamma;
  fit.flat = syy <= 1e-24 * std::max(1.0, my * my * n);
  if (fit.flat) {
    fit.slope = 0.0;
    fit.omega = 0.0;
    fit.r2 = 0.0;
  } else {
    fit.r2 = sxy * sxy / (sxx * syy);
  }
  return fit;
}

struct RhoMaxReport {
  double rho_max = 0.0;
  bool log_condition = false;        // log rho_max > beta (1 + lambda)
  bool above_phases = false;         // rho_max > max phase density + zeta
  bool tail_condition = false;       // Poisson-type tail below exp(-4 S rho_max l^d)
  bool convexity_condition = false;  // 1/(32 beta rho_max) <= kappa*/16
  double log_tail = 0.0;
  double log_tail_bound = 0.0;
};

/// Checks the conditions on the density cutoff; picks the smallest cutoff passing
/// the first two when none is supplied.
inline RhoMaxReport rho_max_report(const MfMinimizerSet& mins, double zeta, double ell_minus, int d,
                                   std::optional<double> rho_max = std::nullopt) {
  RhoMaxReport rep;
  double top = 0.0;
  for (const auto& r : mins.rho) top = std::max(top, *std::max_element(r.begin(), r.end()));
  rep.rho_max = rho_max ? *rho_max : 1.000001 * std::max(std::exp(mins.beta * (1.0 + mins.lambda)), top + zeta);
  const double vol = std::pow(ell_minus, d);
  rep.log_condition = std::log(rep.rho_max) > mins.beta * (1.0 + mins.lambda);
  rep.above_phases = rep.rho_max > top + zeta;
  const double x = mins.S * vol * std::exp(mins.beta * mins.lambda);
  const double n0 = std::ceil(rep.rho_max * vol);
  double logsum = -std::numeric_limits<double>::infinity();
  for (double n = n0; n < n0 + 10000.0; n += 1.0) {
    const double lt = n * std::log(x) - std::lgamma(n + 1.0);
    const double hi = std::max(logsum, lt);
    logsum = hi + std::log(std::exp(logsum - hi) + std::exp(lt - hi));
    if (n > x && lt < logsum - 40.0) break;
  }
  rep.log_tail = logsum;
  rep.log_tail_bound = -4.0 * mins.S * rep.rho_max * vol;
  rep.tail_condition = rep.log_tail <= rep.log_tail_bound;
  double kappa = std::numeric_limits<double>::infinity();
  for (double k : mins.kappa) kappa = std::min(kappa, k);
  rep.convexity_condition = 1.0 / (32.0 * mins.beta * rep.rho_max) <= kappa / 16.0;
  return rep;
}

}  // namespace kacpotts
