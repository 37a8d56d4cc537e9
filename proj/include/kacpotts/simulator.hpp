#pragma once

// Grand-canonical Metropolis sampling of the continuum Potts gas with Kac pair
// interaction, its boundary conditions, and two independent energy oracles.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "errors.hpp"
#include "geometry.hpp"
#include "indicators.hpp"
#include "kernel.hpp"
#include "meanfield.hpp"
#include "rng.hpp"

namespace kacpotts {

struct SimParams {
  int S = 3;
  double beta = 1.0;
  double lambda = 0.0;
  double gamma = 0.1;
  Profile profile = Profile::quartic;
  bool interaction = true;  // false gives the ideal gas
};

enum class BcKind { none, periodic, particles, density };

template <int D>
struct BoundaryCondition {
  BcKind kind = BcKind::none;
  ParticleConfig<D> collar;    // positions outside the box
  SpinDensity density;         // constant collar density
  std::optional<int> k;        // phase label the collar claims to belong to

  static BoundaryCondition none() { return {}; }
  static BoundaryCondition periodic() { return {BcKind::periodic, {}, {}, std::nullopt}; }
  static BoundaryCondition particles(ParticleConfig<D> q, std::optional<int> k = std::nullopt) {
    return {BcKind::particles, std::move(q), {}, k};
  }
  static BoundaryCondition density_collar(SpinDensity rho, std::optional<int> k = std::nullopt) {
    return {BcKind::density, {}, std::move(rho), k};
  }
};

/// Width of the collar that can interact with the box.
inline double collar_width(double gamma) { return 2.0 / gamma; }

namespace detail {

template <int D>
void check_sim_inputs(const Box<D>& box, const BoundaryCondition<D>& bc, const SimParams& p) {
  check_dimension<D>();
  require(p.S >= 1, "simulator: need at least one species");
  require(p.beta >= 0.0, "simulator: beta must be nonnegative");
  require(p.gamma > 0.0, "simulator: gamma must be positive");
  for (double L : box.side) require(L > 0.0, "simulator: box sides must be positive");
  const bool per = box.periodic();
  if (per != (bc.kind == BcKind::periodic))
    throw std::invalid_argument("simulator: periodic boxes need the periodic boundary condition and vice versa");
  if (bc.kind == BcKind::density) {
    if constexpr (D != 2) throw std::invalid_argument("simulator: density collars are available in two dimensions only");
    require(static_cast<int>(bc.density.size()) == p.S, "simulator: collar density has the wrong species count");
    for (double r : bc.density) require(r >= 0.0, "simulator: negative collar density");
  }
  if (bc.kind == BcKind::particles) {
    for (const auto& q : bc.collar) {
      require(q.s >= 0 && q.s < p.S, "simulator: collar spin out of range");
      require(!box.contains(q.r), "simulator: collar particle inside the box");
    }
  }
  if (bc.k) require(*bc.k >= 1 && *bc.k <= p.S + 1, "simulator: boundary label out of range");
}

/// Mass of V_1 beyond a half-plane at distance d, and beyond a quadrant corner at (a, b).
class HalfPlaneMass {
public:
  explicit HalfPlaneMass(const PairTable<2>& v) : v_(v) {
    const int n = 1025;
    std::vector<double> vals(n);
    for (int i = 0; i < n; ++i) vals[i] = direct(2.0 * i / (n - 1));
    spline_ = std::make_unique<boost::math::interpolators::cardinal_cubic_b_spline<double>>(vals.begin(), vals.end(), 0.0,
                                                                                          2.0 / (n - 1));
  }

  double edge(double d) const {
    if (d >= 2.0) return 0.0;
    return (*spline_)(std::max(d, 0.0));
  }

  double direct(double d) const {
    if (d >= 2.0) return 0.0;
    if (d <= 0.0) return 0.5 * mass();
    return radial(d, [d](double rho) { return 2.0 * std::acos(std::min(1.0, d / rho)); });
  }

  double corner(double a, double b) const {
    const double r0 = std::hypot(a, b);
    if (r0 >= 2.0) return 0.0;
    if (r0 <= 0.0) return 0.25 * mass();
    return radial(r0, [a, b](double rho) {
      return std::max(0.0, std::acos(std::min(1.0, a / rho)) - std::asin(std::min(1.0, b / rho)));
    });
  }

  double mass() const {
    return 2.0 * std::numbers::pi * adaptive([&](double r) { return r * v_.unit(r); }, 0.0, 2.0);
  }

private:
  /// Integral over rho in (r0, 2) of rho V_1(rho) angle(rho). The angle vanishes like
  /// a square root at r0, which rho = r0 + (2 - r0) u^2 turns into a smooth integrand.
  template <typename Angle>
  double radial(double r0, Angle angle) const {
    using G = boost::math::quadrature::gauss<double, 30>;
    const double w = 2.0 - r0;
    return G::integrate(
        [&](double u) {
          const double rho = r0 + w * u * u;
          return 2.0 * w * u * rho * v_.unit(rho) * angle(rho);
        },
        0.0, 1.0);
  }

  const PairTable<2>& v_;
  std::unique_ptr<boost::math::interpolators::cardinal_cubic_b_spline<double>> spline_;
};

inline const HalfPlaneMass& half_plane_mass(Profile profile) {
  static std::once_flag flags[2];
  static std::unique_ptr<HalfPlaneMass> tables[2];
  const int i = profile == Profile::quartic ? 0 : 1;
  std::call_once(flags[i], [&] { tables[i] = std::make_unique<HalfPlaneMass>(PairTable<2>::get(profile)); });
  return *tables[i];
}

}  // namespace detail

/// Pair potential V_gamma = J_gamma * J_gamma with the box geometry folded in.
template <int D>
class Interaction {
public:
  Interaction(const Box<D>& box, const BoundaryCondition<D>& bc, const SimParams& p)
      : box_(box), bc_(bc), p_(p), table_(&PairTable<D>::get(p.profile)) {
    detail::check_sim_inputs(box, bc, p);
    range_ = 2.0 / p.gamma;
    images_ = box.periodic() && *std::min_element(box.side.begin(), box.side.end()) < 2.0 * range_;
    scale_ = std::pow(p.gamma, D);
    if (bc.kind == BcKind::density) {
      if constexpr (D == 2) collar_mass_ = &detail::half_plane_mass(p.profile);
    }
  }

  double range() const { return range_; }
  bool image_sums() const { return images_; }
  const Box<D>& box() const { return box_; }
  const BoundaryCondition<D>& bc() const { return bc_; }
  const SimParams& params() const { return p_; }

  double v_of_distance(double dist) const {
    if (!p_.interaction || !(dist < range_)) return 0.0;
    return scale_ * table_->unit(p_.gamma * dist);
  }

  /// V between two points, summed over periodic images where needed.
  double v(const Point<D>& a, const Point<D>& b) const {
    if (!p_.interaction) return 0.0;
    Point<D> d;
    for (int i = 0; i < D; ++i) d[i] = a[i] - b[i];
    if (!box_.periodic()) return v_of_distance(norm(d));
    const auto& L = box_.side;
    for (int i = 0; i < D; ++i) d[i] -= L[i] * std::round(d[i] / L[i]);
    if (!images_) return v_of_distance(norm(d));
    std::array<int, D> n, m;
    for (int i = 0; i < D; ++i) m[i] = -(n[i] = static_cast<int>(std::ceil(range_ / L[i])) + 1);
    double sum = 0.0;
    for (;;) {
      Point<D> e;
      for (int i = 0; i < D; ++i) e[i] = d[i] + m[i] * L[i];
      sum += v_of_distance(norm(e));
      int i = 0;
      while (i < D && ++m[i] > n[i]) m[i] = -n[i], ++i;
      if (i == D) break;
    }
    return sum;
  }

  /// Boundary field per species at r: sum of V to collar particles of that species,
  /// or the collar density times the V-mass outside the box.
  std::vector<double> collar_field(const Point<D>& r) const {
    std::vector<double> f(p_.S, 0.0);
    if (!p_.interaction) return f;
    if (bc_.kind == BcKind::particles) {
      for (const auto& q : bc_.collar) {
        Point<D> d;
        for (int i = 0; i < D; ++i) d[i] = r[i] - q.r[i];
        f[q.s] += v_of_distance(norm(d));
      }
    } else if (bc_.kind == BcKind::density) {
      const double m = outside_mass(r);
      for (int s = 0; s < p_.S; ++s) f[s] = bc_.density[s] * m;
    }
    return f;
  }

  /// Integral of V_gamma(r - r') over r' outside the box (two dimensions).
  double outside_mass(const Point<D>& r) const {
    if constexpr (D != 2) {
      throw std::invalid_argument("outside_mass: two dimensions only");
    } else {
      const double g = p_.gamma;
      const std::array<double, 4> d{r[0], box_.side[0] - r[0], r[1], box_.side[1] - r[1]};
      double m = 0.0;
      for (double x : d) m += collar_mass_->edge(g * x);
      // Corners: (left|right) x (bottom|top).
      for (int cx = 0; cx < 2; ++cx)
        for (int cy = 2; cy < 4; ++cy)
          if (d[cx] < range_ && d[cy] < range_) m -= collar_mass_->corner(g * d[cx], g * d[cy]);
      return m;
    }
  }

  static double norm(const Point<D>& d) {
    double s = 0.0;
    for (int i = 0; i < D; ++i) s += d[i] * d[i];
    return std::sqrt(s);
  }

private:
  Box<D> box_;
  BoundaryCondition<D> bc_;
  SimParams p_;
  const PairTable<D>* table_;
  const detail::HalfPlaneMass* collar_mass_ = nullptr;
  double range_ = 0.0;
  double scale_ = 1.0;
  bool images_ = false;
};

namespace detail {

template <int D>
void check_config(const ParticleConfig<D>& q, const Box<D>& box, int S) {
  for (const auto& p : q) {
    require(p.s >= 0 && p.s < S, "simulator: spin out of range");
    require(box.contains(p.r), "simulator: particle outside the box");
  }
}

}  // namespace detail

/// H(q) = 1/2 sum_{i != j} V 1_{s_i != s_j} + boundary term - lambda n.
template <int D>
double energy_total(const ParticleConfig<D>& q, const Box<D>& box, const BoundaryCondition<D>& bc, const SimParams& p) {
  Interaction<D> I(box, bc, p);
  detail::check_config(q, box, p.S);
  double h = -p.lambda * static_cast<double>(q.size());
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = i + 1; j < q.size(); ++j)
      if (q[i].s != q[j].s) h += I.v(q[i].r, q[j].r);
  if (bc.kind == BcKind::particles || bc.kind == BcKind::density)
    for (const auto& x : q) {
      const auto f = I.collar_field(x.r);
      for (int s = 0; s < p.S; ++s)
        if (s != x.s) h += f[s];
    }
  return h;
}

namespace detail {

struct Bump {
  std::vector<double> c;  // centre, length D
  int s;
  bool boundary;          // collar particle: part of the reference field
};

/// Nested Gauss-Kronrod over the union of kernel supports, with breakpoints at
/// every support boundary crossing the current axis.
template <int D, typename Value>
double integrate_supports(const std::vector<Bump>& bumps, double R, const std::array<double, D>& lo,
                          const std::array<double, D>& hi, Value value, double tol) {
  std::array<double, D> x{};
  double outer_err = 0.0;
  std::function<double(int, const std::vector<int>&)> level = [&](int a, const std::vector<int>& active) -> double {
    std::vector<int> here;
    std::vector<double> bps{lo[a], hi[a]};
    bool any_inner = false;
    for (int id : active) {
      double rem = R * R;
      for (int b = 0; b < a; ++b) rem -= (x[b] - bumps[id].c[b]) * (x[b] - bumps[id].c[b]);
      if (rem <= 0.0) continue;
      here.push_back(id);
      any_inner = any_inner || !bumps[id].boundary;
      const double w = std::sqrt(rem);
      for (double e : {bumps[id].c[a] - w, bumps[id].c[a] + w})
        if (e > lo[a] && e < hi[a]) bps.push_back(e);
    }
    if (!any_inner) return 0.0;
    std::sort(bps.begin(), bps.end());
    double total = 0.0;
    for (std::size_t k = 0; k + 1 < bps.size(); ++k) {
      const double a0 = bps[k], a1 = bps[k + 1];
      if (!(a1 > a0)) continue;
      auto f = [&](double t) {
        x[a] = t;
        if (a == D - 1) return value(x, here);
        return level(a + 1, here);
      };
      double err = 0.0;
      const double v = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a0, a1, 15, tol, &err);
      if (a == 0) outer_err += err;
      total += v;
    }
    return total;
  };
  std::vector<int> all(bumps.size());
  std::iota(all.begin(), all.end(), 0);
  const double out = level(0, all);
  if (!std::isfinite(out)) throw numerical_error("energy_total_integral: quadrature produced a non-finite value");
  if (outer_err > 1e3 * tol * std::max(std::abs(out), 1e-12))
    throw numerical_error("energy_total_integral: quadrature did not converge");
  return out;
}

}  // namespace detail

/// H(q) as the integral of the mean-field energy density of J_gamma * q.
template <int D>
double energy_total_integral(const ParticleConfig<D>& q, const Box<D>& box, const BoundaryCondition<D>& bc,
                             const SimParams& p, double tol = 1e-9) {
  detail::check_sim_inputs(box, bc, p);
  detail::check_config(q, box, p.S);
  if (bc.kind == BcKind::density)
    throw std::invalid_argument("energy_total_integral: density collars are not supported");
  if (q.empty()) return 0.0;
  KacKernel<D> J(p.gamma, p.profile);
  const double R = J.range();
  std::vector<detail::Bump> bumps;
  std::array<double, D> lo, hi;
  if (bc.kind == BcKind::periodic) {
    const auto& L = box.side;
    std::array<int, D> n;
    for (int i = 0; i < D; ++i) {
      lo[i] = 0.0;
      hi[i] = L[i];
      n[i] = static_cast<int>(std::ceil(R / L[i])) + 1;
    }
    for (const auto& x : q) {
      std::array<int, D> m;
      for (int i = 0; i < D; ++i) m[i] = -n[i];
      for (;;) {
        std::vector<double> c(D);
        bool near = true;
        for (int i = 0; i < D; ++i) {
          c[i] = x.r[i] + m[i] * L[i];
          near = near && c[i] > -R && c[i] < L[i] + R;
        }
        if (near) bumps.push_back({c, x.s, false});
        int i = 0;
        while (i < D && ++m[i] > n[i]) m[i] = -n[i], ++i;
        if (i == D) break;
      }
    }
  } else {
    lo.fill(std::numeric_limits<double>::infinity());
    hi.fill(-std::numeric_limits<double>::infinity());
    for (const auto& x : q) {
      bumps.push_back({std::vector<double>(x.r.begin(), x.r.end()), x.s, false});
      for (int i = 0; i < D; ++i) {
        lo[i] = std::min(lo[i], x.r[i] - R);
        hi[i] = std::max(hi[i], x.r[i] + R);
      }
    }
    if (bc.kind == BcKind::particles)
      for (const auto& y : bc.collar) {
        bool near = false;
        for (const auto& x : q) {
          double d2 = 0.0;
          for (int i = 0; i < D; ++i) d2 += (x.r[i] - y.r[i]) * (x.r[i] - y.r[i]);
          near = near || d2 < 4.0 * R * R;
        }
        if (near) bumps.push_back({std::vector<double>(y.r.begin(), y.r.end()), y.s, true});
      }
  }
  const bool with_collar = bc.kind == BcKind::particles;
  std::vector<double> rho(p.S), ref(p.S);
  auto value = [&](const std::array<double, D>& x, const std::vector<int>& active) {
    std::fill(rho.begin(), rho.end(), 0.0);
    std::fill(ref.begin(), ref.end(), 0.0);
    for (int id : active) {
      double d2 = 0.0;
      for (int i = 0; i < D; ++i) d2 += (x[i] - bumps[id].c[i]) * (x[i] - bumps[id].c[i]);
      const double j = p.interaction || !bumps[id].boundary ? J(std::sqrt(d2)) : 0.0;
      rho[bumps[id].s] += j;
      if (bumps[id].boundary) ref[bumps[id].s] += j;
    }
    double e = 0.0;
    if (p.interaction) {
      e = mf_energy(rho, p.lambda);
      if (with_collar) e -= mf_energy(ref, p.lambda);
    } else {
      for (int s = 0; s < p.S; ++s) e -= p.lambda * (rho[s] - ref[s]);
    }
    return e;
  };
  return detail::integrate_supports<D>(bumps, R, lo, hi, value, tol);
}

// ---------------------------------------------------------------------------
// Grand-canonical Metropolis chain.

enum class MoveType { displacement = 0, flip = 1, insertion = 2, deletion = 3 };

struct MoveMix {
  double displacement = 0.4;
  double flip = 0.2;
  double insertion = 0.2;
  double deletion = 0.2;
  double step = 0.0;  // Gaussian displacement scale; 0 means 0.25 / gamma

  void validate() const {
    detail::require(displacement >= 0 && flip >= 0 && insertion >= 0 && deletion >= 0, "move mix: negative weight");
    detail::require(std::abs(insertion - deletion) < 1e-15, "move mix: insertion and deletion weights must match");
    detail::require(displacement + flip + insertion + deletion > 0.0, "move mix: all weights vanish");
    detail::require(step >= 0.0, "move mix: negative step");
  }
};

struct MoveStats {
  std::array<std::uint64_t, 4> attempted{};
  std::array<std::uint64_t, 4> accepted{};
  double rate(MoveType m) const {
    const auto i = static_cast<std::size_t>(m);
    return attempted[i] ? static_cast<double>(accepted[i]) / static_cast<double>(attempted[i]) : 0.0;
  }
};

struct GcmcOptions {
  MoveMix mix;
  // Moves per sweep. Fixed rather than tied to the current particle number: a
  // state-dependent sweep length biases the end-of-sweep samples.
  std::size_t moves_per_sweep = 100;
  int check_every = 100;               // sweeps between full cache recomputations; 0 disables
};

/// A proposed move together with its acceptance ratio.
template <int D>
struct Proposal {
  MoveType type = MoveType::displacement;
  std::size_t index = 0;
  Particle<D> particle{};
  double delta_h = 0.0;
  double log_ratio = 0.0;  // log of the Metropolis ratio
  bool valid = false;
  std::vector<double> field;  // species field at the new position
};

template <int D>
class Gcmc {
public:
  Gcmc(const Box<D>& box, const BoundaryCondition<D>& bc, const SimParams& p, std::uint64_t seed, std::uint64_t stream = 0,
       ParticleConfig<D> init = {}, GcmcOptions opt = {})
      : I_(box, bc, p), rng_(seed, stream), opt_(opt), q_(std::move(init)) {
    opt_.mix.validate();
    detail::check_config(q_, box, p.S);
    step_ = opt_.mix.step > 0.0 ? opt_.mix.step : 0.25 / p.gamma;
    setup_grid();
    rebuild();
  }

  const ParticleConfig<D>& config() const { return q_; }
  std::size_t size() const { return q_.size(); }
  double energy() const { return energy_; }
  const MoveStats& stats() const { return stats_; }
  std::uint64_t sweeps() const { return sweeps_; }
  const Interaction<D>& interaction() const { return I_; }
  const Box<D>& box() const { return I_.box(); }
  CounterRng& rng() { return rng_; }
  const CounterRng& rng() const { return rng_; }
  double volume() const { return I_.box().volume(); }

  /// Species counts.
  std::vector<std::size_t> counts() const {
    std::vector<std::size_t> c(I_.params().S, 0);
    for (const auto& x : q_) ++c[x.s];
    return c;
  }

  void sweep() {
    for (std::size_t m = 0; m < opt_.moves_per_sweep; ++m) step();
    ++sweeps_;
    if (opt_.check_every > 0 && sweeps_ % static_cast<std::uint64_t>(opt_.check_every) == 0) check_cache();
  }

  void run(std::uint64_t n) {
    for (std::uint64_t i = 0; i < n; ++i) sweep();
  }

  /// One Metropolis step with a move type drawn from the mix.
  void step() {
    const auto& mix = opt_.mix;
    const double tot = mix.displacement + mix.flip + mix.insertion + mix.deletion;
    const double u = rng_.uniform() * tot;
    MoveType t = u < mix.displacement                           ? MoveType::displacement
                 : u < mix.displacement + mix.flip              ? MoveType::flip
                 : u < mix.displacement + mix.flip + mix.insertion ? MoveType::insertion
                                                                   : MoveType::deletion;
    auto prop = propose(t);
    ++stats_.attempted[static_cast<std::size_t>(t)];
    if (!prop.valid) return;
    if (prop.log_ratio >= 0.0 || std::log(rng_.uniform_open()) < prop.log_ratio) {
      apply(prop);
      ++stats_.accepted[static_cast<std::size_t>(t)];
    }
  }

  /// Draws a move of the given type without applying it.
  Proposal<D> propose(MoveType t) {
    Proposal<D> pr;
    pr.type = t;
    const auto& p = I_.params();
    const double n = static_cast<double>(q_.size());
    switch (t) {
      case MoveType::insertion: {
        for (int a = 0; a < D; ++a) pr.particle.r[a] = rng_.uniform() * box().side[a];
        pr.particle.s = static_cast<int>(rng_.below(static_cast<std::uint64_t>(p.S)));
        pr.field = field_at(pr.particle.r, q_.size());
        pr.delta_h = species_energy(pr.field, pr.particle.s) - p.lambda;
        pr.log_ratio = std::log(p.S * volume() / (n + 1.0)) - p.beta * pr.delta_h;
        pr.valid = true;
        break;
      }
      case MoveType::deletion: {
        if (q_.empty()) return pr;
        pr.index = static_cast<std::size_t>(rng_.below(q_.size()));
        pr.particle = q_[pr.index];
        pr.delta_h = -particle_energy(pr.index) + p.lambda;
        pr.log_ratio = std::log(n / (p.S * volume())) - p.beta * pr.delta_h;
        pr.valid = true;
        break;
      }
      case MoveType::displacement: {
        if (q_.empty()) return pr;
        pr.index = static_cast<std::size_t>(rng_.below(q_.size()));
        pr.particle = q_[pr.index];
        for (int a = 0; a < D; ++a) pr.particle.r[a] = fold(pr.particle.r[a] + step_ * rng_.normal(), a);
        pr.field = field_at(pr.particle.r, pr.index);
        pr.delta_h = species_energy(pr.field, pr.particle.s) - particle_energy(pr.index);
        pr.log_ratio = -p.beta * pr.delta_h;
        pr.valid = true;
        break;
      }
      case MoveType::flip: {
        if (q_.empty() || p.S < 2) return pr;
        pr.index = static_cast<std::size_t>(rng_.below(q_.size()));
        pr.particle = q_[pr.index];
        const int shift = 1 + static_cast<int>(rng_.below(static_cast<std::uint64_t>(p.S - 1)));
        pr.particle.s = (pr.particle.s + shift) % p.S;
        pr.field.assign(loc_.begin() + pr.index * p.S, loc_.begin() + (pr.index + 1) * p.S);
        for (int s = 0; s < p.S; ++s) pr.field[s] += col_[pr.index * p.S + s];
        pr.delta_h = species_energy(pr.field, pr.particle.s) - particle_energy(pr.index);
        pr.log_ratio = -p.beta * pr.delta_h;
        pr.valid = true;
        break;
      }
    }
    return pr;
  }

  void apply(const Proposal<D>& pr) {
    const int S = I_.params().S;
    switch (pr.type) {
      case MoveType::insertion: {
        const std::size_t i = q_.size();
        q_.push_back(pr.particle);
        const auto c = I_.collar_field(pr.particle.r);
        for (int s = 0; s < S; ++s) {
          col_.push_back(c[s]);
          loc_.push_back(pr.field[s] - c[s]);
        }
        add_to_grid(i);
        spread(i, pr.particle, +1.0);
        break;
      }
      case MoveType::deletion: {
        const std::size_t i = pr.index;
        spread(i, q_[i], -1.0);
        remove(i);
        break;
      }
      case MoveType::displacement: {
        const std::size_t i = pr.index;
        spread(i, q_[i], -1.0);
        remove_from_grid(i);
        q_[i].r = pr.particle.r;
        const auto c = I_.collar_field(pr.particle.r);
        for (int s = 0; s < S; ++s) {
          col_[i * S + s] = c[s];
          loc_[i * S + s] = pr.field[s] - c[s];
        }
        add_to_grid(i);
        spread(i, q_[i], +1.0);
        break;
      }
      case MoveType::flip: {
        const std::size_t i = pr.index;
        spread(i, q_[i], -1.0);
        q_[i].s = pr.particle.s;
        spread(i, q_[i], +1.0);
        break;
      }
    }
    energy_ += pr.delta_h;
  }

  /// Recomputes every cached field and the energy; throws when the caches had drifted.
  void check_cache(double rel_tol = 1e-9) {
    const auto old_loc = loc_;
    const double old_e = energy_;
    rebuild();
    // Cancellation leaves residues of the size of one pair term, so that sets the floor.
    double scale = std::max(1e-300, I_.v_of_distance(0.0));
    for (double v : loc_) scale = std::max(scale, std::abs(v));
    for (std::size_t k = 0; k < loc_.size(); ++k)
      if (std::abs(loc_[k] - old_loc[k]) > rel_tol * scale)
        throw property_violation("gcmc: cached local field drifted from recomputation");
    if (std::abs(old_e - energy_) > rel_tol * std::max(1.0, std::abs(energy_)))
      throw property_violation("gcmc: cached energy drifted from recomputation");
  }

  /// Detailed-balance defect of one random transition of the given type: the
  /// log of pi(x) P(x -> y) / (pi(y) P(y -> x)) using full energy recomputation.
  /// The chain is left in state x.
  std::optional<double> detailed_balance_defect(MoveType t) {
    const auto fwd = propose(t);
    if (!fwd.valid) return std::nullopt;
    const auto& p = I_.params();
    const auto& box_ = box();
    const auto& bc = I_.bc();
    const ParticleConfig<D> x = q_;
    const double hx = energy_total(x, box_, bc, p);
    Gcmc<D> y = *this;
    y.apply(fwd);
    const double hy = energy_total(y.q_, box_, bc, p);
    // Reverse ratio computed from state y.
    double rev = 0.0;
    const double ny = static_cast<double>(y.q_.size());
    switch (t) {
      case MoveType::insertion:
        rev = std::log(ny / (p.S * volume())) - p.beta * (-y.particle_energy(y.q_.size() - 1) + p.lambda);
        break;
      case MoveType::deletion: {
        const auto f = y.field_at(fwd.particle.r, y.q_.size());
        rev = std::log(p.S * volume() / (ny + 1.0)) - p.beta * (y.species_energy(f, fwd.particle.s) - p.lambda);
        break;
      }
      case MoveType::displacement: {
        const auto f = y.field_at(x[fwd.index].r, fwd.index);
        rev = -p.beta * (y.species_energy(f, x[fwd.index].s) - y.particle_energy(fwd.index));
        break;
      }
      case MoveType::flip: {
        std::vector<double> f(p.S);
        for (int s = 0; s < p.S; ++s) f[s] = y.loc_[fwd.index * p.S + s] + y.col_[fwd.index * p.S + s];
        rev = -p.beta * (y.species_energy(f, x[fwd.index].s) - y.particle_energy(fwd.index));
        break;
      }
    }
    const double log_acc_f = std::min(0.0, fwd.log_ratio), log_acc_r = std::min(0.0, rev);
    // log of pi(y) q(y -> x) / (pi(x) q(x -> y)) for the free-measure Gibbs weight;
    // an inserted point carries proposal density 1/(S |Lambda|), a deletion 1/n.
    double target = -p.beta * (hy - hx);
    if (t == MoveType::insertion) target += std::log(p.S * volume()) - std::log(ny);
    if (t == MoveType::deletion) target += std::log(ny + 1.0) - std::log(p.S * volume());
    return (log_acc_f - log_acc_r) - target;
  }

  /// Energy of particle i with the rest of the system.
  double particle_energy(std::size_t i) const {
    const int S = I_.params().S;
    double e = 0.0;
    for (int s = 0; s < S; ++s)
      if (s != q_[i].s) e += loc_[i * S + s] + col_[i * S + s];
    return e;
  }

private:
  double species_energy(const std::vector<double>& f, int s) const {
    double e = 0.0;
    for (int t = 0; t < I_.params().S; ++t)
      if (t != s) e += f[t];
    return e;
  }

  /// Folds a coordinate back into [0, L): wrapping on tori, reflection otherwise.
  double fold(double x, int a) const {
    const double L = box().side[a];
    if (box().periodic()) {
      x -= L * std::floor(x / L);
      return x >= L ? 0.0 : x;
    }
    const double period = 2.0 * L;
    x -= period * std::floor(x / period);
    if (x >= L) x = period - x;
    return std::clamp(x, 0.0, std::nextafter(L, 0.0));
  }

  // Cell grid of side >= interaction range; a single cell when images are summed.
  void setup_grid() {
    std::size_t cells = 1;
    for (int a = 0; a < D; ++a) {
      const double L = box().side[a];
      int n = I_.image_sums() || !I_.params().interaction ? 1 : std::max(1, static_cast<int>(std::floor(L / I_.range())));
      grid_n_[a] = std::min(n, 64);
      grid_side_[a] = L / grid_n_[a];
      cells *= static_cast<std::size_t>(grid_n_[a]);
    }
    grid_.assign(cells, {});
    // Neighbouring cells (deduplicated when the grid wraps onto itself).
    neigh_.assign(cells, {});
    for (std::size_t c = 0; c < cells; ++c) {
      std::array<int, D> x = cell_coords(c);
      std::vector<std::size_t> out{c};
      for (const auto& o : moore_offsets<D>()) {
        std::array<int, D> y;
        bool ok = true;
        for (int a = 0; a < D; ++a) {
          y[a] = x[a] + static_cast<int>(o[a]);
          const int n = grid_n_[a];
          if (box().periodic()) y[a] = (y[a] % n + n) % n;
          else if (y[a] < 0 || y[a] >= n) ok = false;
        }
        if (ok) out.push_back(cell_linear(y));
      }
      std::sort(out.begin(), out.end());
      out.erase(std::unique(out.begin(), out.end()), out.end());
      neigh_[c] = out;
    }
  }

  std::array<int, D> cell_coords(std::size_t c) const {
    std::array<int, D> x;
    for (int a = D - 1; a >= 0; --a) {
      x[a] = static_cast<int>(c % static_cast<std::size_t>(grid_n_[a]));
      c /= static_cast<std::size_t>(grid_n_[a]);
    }
    return x;
  }

  std::size_t cell_linear(const std::array<int, D>& x) const {
    std::size_t c = 0;
    for (int a = 0; a < D; ++a) c = c * static_cast<std::size_t>(grid_n_[a]) + static_cast<std::size_t>(x[a]);
    return c;
  }

  std::size_t cell_of_point(const Point<D>& r) const {
    std::array<int, D> x;
    for (int a = 0; a < D; ++a) x[a] = std::clamp(static_cast<int>(r[a] / grid_side_[a]), 0, grid_n_[a] - 1);
    return cell_linear(x);
  }

  void add_to_grid(std::size_t i) {
    if (cell_.size() <= i) {
      cell_.resize(i + 1);
      slot_.resize(i + 1);
    }
    const std::size_t c = cell_of_point(q_[i].r);
    cell_[i] = c;
    slot_[i] = grid_[c].size();
    grid_[c].push_back(i);
  }

  void remove_from_grid(std::size_t i) {
    auto& v = grid_[cell_[i]];
    const std::size_t k = slot_[i];
    v[k] = v.back();
    slot_[v[k]] = k;
    v.pop_back();
  }

  /// Swap-remove particle i from every structure.
  void remove(std::size_t i) {
    const int S = I_.params().S;
    remove_from_grid(i);
    const std::size_t last = q_.size() - 1;
    if (i != last) {
      q_[i] = q_[last];
      for (int s = 0; s < S; ++s) {
        loc_[i * S + s] = loc_[last * S + s];
        col_[i * S + s] = col_[last * S + s];
      }
      cell_[i] = cell_[last];
      slot_[i] = slot_[last];
      grid_[cell_[i]][slot_[i]] = i;
    }
    q_.pop_back();
    cell_.pop_back();
    slot_.pop_back();
    loc_.resize(q_.size() * S);
    col_.resize(q_.size() * S);
  }

  /// Species field (pairs plus collar) at r from every particle except `skip`.
  std::vector<double> field_at(const Point<D>& r, std::size_t skip) const {
    std::vector<double> f = I_.collar_field(r);
    if (!I_.params().interaction) return f;
    for (std::size_t c : neigh_[cell_of_point(r)])
      for (std::size_t j : grid_[c])
        if (j != skip) f[q_[j].s] += I_.v(r, q_[j].r);
    return f;
  }

  /// Adds (sign +1) or removes (sign -1) particle i's contribution to its neighbours' fields.
  void spread(std::size_t i, const Particle<D>& x, double sign) {
    if (!I_.params().interaction) return;
    const int S = I_.params().S;
    for (std::size_t c : neigh_[cell_of_point(x.r)])
      for (std::size_t j : grid_[c])
        if (j != i) loc_[j * S + x.s] += sign * I_.v(x.r, q_[j].r);
  }

  void rebuild() {
    const int S = I_.params().S;
    for (auto& g : grid_) g.clear();
    cell_.assign(q_.size(), 0);
    slot_.assign(q_.size(), 0);
    for (std::size_t i = 0; i < q_.size(); ++i) add_to_grid(i);
    loc_.assign(q_.size() * S, 0.0);
    col_.assign(q_.size() * S, 0.0);
    energy_ = -I_.params().lambda * static_cast<double>(q_.size());
    for (std::size_t i = 0; i < q_.size(); ++i) {
      const auto c = I_.collar_field(q_[i].r);
      auto f = field_at(q_[i].r, i);
      for (int s = 0; s < S; ++s) {
        col_[i * S + s] = c[s];
        loc_[i * S + s] = f[s] - c[s];
      }
    }
    for (std::size_t i = 0; i < q_.size(); ++i)
      for (int s = 0; s < S; ++s)
        if (s != q_[i].s) energy_ += 0.5 * loc_[i * S + s] + col_[i * S + s];
  }

  Interaction<D> I_;
  CounterRng rng_;
  GcmcOptions opt_;
  ParticleConfig<D> q_;
  std::vector<double> loc_, col_;  // per particle and species: pair field and collar field
  double energy_ = 0.0;
  double step_ = 1.0;
  MoveStats stats_;
  std::uint64_t sweeps_ = 0;
  std::array<int, D> grid_n_{};
  std::array<double, D> grid_side_{};
  std::vector<std::vector<std::size_t>> grid_;
  std::vector<std::vector<std::size_t>> neigh_;
  std::vector<std::size_t> cell_, slot_;
};

// ---------------------------------------------------------------------------
// Exact small-volume reference.

struct ExactReference {
  double Z = 0.0;
  double tail_bound = 0.0;   // bound on the omitted n > n_max terms
  double mean_n = 0.0;
  std::vector<double> density;  // per species
  int nodes = 0;
};

/// Truncated grand-canonical sum over n <= n_max with tensor Gauss-Legendre
/// quadrature over positions. Items are (node, spin) pairs; a multiset of items
/// with multiplicities m_i carries weight prod w / prod m_i!.
template <int D>
ExactReference exact_reference(const Box<D>& box, const BoundaryCondition<D>& bc, const SimParams& p, int n_max = 4,
                               int order = 6, double tail_tol = 1e-8) {
  detail::require(n_max >= 0 && n_max <= 4, "exact_reference: n_max must lie in [0,4]");
  detail::require(order >= 1 && order <= 20, "exact_reference: quadrature order must lie in [1,20]");
  Interaction<D> I(box, bc, p);
  // Gauss-Legendre rule on [-1, 1] by Golub-Welsch.
  std::vector<double> x1, w1;
  {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(order, order);
    for (int i = 1; i < order; ++i) J(i, i - 1) = J(i - 1, i) = i / std::sqrt(4.0 * i * i - 1.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    for (int i = 0; i < order; ++i) {
      x1.push_back(es.eigenvalues()(i));
      w1.push_back(2.0 * es.eigenvectors()(0, i) * es.eigenvectors()(0, i));
    }
  }
  std::vector<Point<D>> nodes;
  std::vector<double> weights;
  std::array<int, D> idx{};
  for (;;) {
    Point<D> r;
    double w = 1.0;
    for (int a = 0; a < D; ++a) {
      r[a] = 0.5 * box.side[a] * (1.0 + x1[idx[a]]);
      w *= 0.5 * box.side[a] * w1[idx[a]];
    }
    nodes.push_back(r);
    weights.push_back(w);
    int a = 0;
    while (a < D && ++idx[a] == order) idx[a++] = 0;
    if (a == D) break;
  }
  const int M = static_cast<int>(nodes.size()), S = p.S, N = M * S;
  std::vector<double> item_w(N), item_u(N);
  std::vector<int> item_s(N);
  double u_min = 0.0;
  for (int a = 0; a < M; ++a) {
    const auto c = I.collar_field(nodes[a]);
    for (int s = 0; s < S; ++s) {
      const int it = a * S + s;
      item_w[it] = weights[a];
      item_s[it] = s;
      double u = -p.lambda;
      for (int t = 0; t < S; ++t)
        if (t != s) u += c[t];
      item_u[it] = u;
      u_min = std::min(u_min, u + p.lambda);
    }
  }
  std::vector<double> pair(static_cast<std::size_t>(N) * N, 0.0);
  for (int a = 0; a < N; ++a)
    for (int b = 0; b < N; ++b)
      if (item_s[a] != item_s[b]) pair[a * N + b] = I.v(nodes[a / S], nodes[b / S]);

  ExactReference ref;
  ref.nodes = M;
  ref.density.assign(S, 0.0);
  std::vector<double> ns(S, 0.0);
  double Z = 1.0;
  double n_acc = 0.0;
  // Multisets a1 <= a2 <= ... of size up to n_max.
  std::array<int, 4> a{};
  auto visit = [&](int n, double weight, double h) {
    const double term = weight * std::exp(-p.beta * h);
    Z += term;
    n_acc += n * term;
    for (int i = 0; i < n; ++i) ns[item_s[a[i]]] += term;
  };
  const double inv_fact[5] = {1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0};
  for (a[0] = 0; n_max >= 1 && a[0] < N; ++a[0]) {
    const double w0 = item_w[a[0]], h0 = item_u[a[0]];
    visit(1, w0, h0);
    for (a[1] = a[0]; n_max >= 2 && a[1] < N; ++a[1]) {
      const double h1 = h0 + item_u[a[1]] + pair[a[0] * N + a[1]];
      const double w1_ = w0 * item_w[a[1]] * (a[1] == a[0] ? inv_fact[2] : 1.0);
      visit(2, w1_, h1);
      for (a[2] = a[1]; n_max >= 3 && a[2] < N; ++a[2]) {
        const double h2 = h1 + item_u[a[2]] + pair[a[0] * N + a[2]] + pair[a[1] * N + a[2]];
        // Multiplicity factor: runs of equal items.
        double f2;
        if (a[2] == a[0]) f2 = inv_fact[3];
        else if (a[2] == a[1]) f2 = (a[1] == a[0] ? inv_fact[3] : inv_fact[2]);
        else f2 = (a[1] == a[0] ? inv_fact[2] : 1.0);
        const double w2 = w0 * item_w[a[1]] * item_w[a[2]] * f2;
        visit(3, w2, h2);
        for (a[3] = a[2]; n_max >= 4 && a[3] < N; ++a[3]) {
          const double h3 = h2 + item_u[a[3]] + pair[a[0] * N + a[3]] + pair[a[1] * N + a[3]] + pair[a[2] * N + a[3]];
          // Product of 1/m! over runs of equal items in the sorted tuple.
          int runs[4] = {1, 0, 0, 0};
          int r = 0;
          for (int i = 1; i < 4; ++i) {
            if (a[i] == a[i - 1]) ++runs[r];
            else runs[++r] = 1;
          }
          double f3 = 1.0;
          for (int i = 0; i <= r; ++i) f3 *= inv_fact[runs[i]];
          visit(4, w0 * item_w[a[1]] * item_w[a[2]] * item_w[a[3]] * f3, h3);
        }
      }
    }
  }
  // H >= -lambda n + (collar term >= 0), so the n-particle integral is at most x^n / n!.
  const double x = S * box.volume() * std::exp(p.beta * p.lambda) * std::exp(-p.beta * std::min(u_min, 0.0));
  double tail = 0.0, term = 1.0;
  for (int n = 1; n <= n_max; ++n) term *= x / n;
  for (int n = n_max + 1; n < n_max + 400; ++n) {
    term *= x / n;
    tail += term;
    if (term < 1e-30 * tail) break;
  }
  ref.Z = Z;
  ref.tail_bound = tail;
  if (!(tail < tail_tol * Z)) throw numerical_error("exact_reference: truncation tail bound too large for this box");
  ref.mean_n = n_acc / Z;
  for (int s = 0; s < S; ++s) ref.density[s] = ns[s] / Z / box.volume();
  return ref;
}

// ---------------------------------------------------------------------------
// Observables.

struct BatchMean {
  double mean = 0.0;
  double error = 0.0;  // standard error from batch means
  int batches = 0;
};

inline BatchMean batch_means(const std::vector<double>& x, int batches = 20) {
  BatchMean out;
  if (x.empty()) return out;
  const std::size_t n = x.size();
  batches = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(std::max(batches, 2)), n));
  const std::size_t len = n / static_cast<std::size_t>(batches);
  std::vector<double> m;
  for (int b = 0; b < batches; ++b) {
    double s = 0.0;
    for (std::size_t i = b * len; i < (b + 1) * len; ++i) s += x[i];
    m.push_back(s / static_cast<double>(len));
  }
  out.batches = batches;
  out.mean = std::accumulate(m.begin(), m.end(), 0.0) / batches;
  double v = 0.0;
  for (double y : m) v += (y - out.mean) * (y - out.mean);
  out.error = batches > 1 ? std::sqrt(v / (batches - 1) / batches) : 0.0;
  return out;
}

struct ObservableRecord {
  std::vector<BatchMean> density;        // per species
  std::vector<double> eta_fraction;      // label 0..S+1
  std::vector<double> theta_fraction;    // label 0..S+1
  double contours = 0.0;                 // mean contour count per sample
  std::map<std::size_t, std::size_t> n_gamma;  // histogram of contour sizes
  std::size_t samples = 0;
  std::size_t collar_violations = 0;     // samples whose inner collar was not Theta = k
};

/// Accumulates per-sample observables along a trajectory.
template <int D>
class Observables {
public:
  Observables(int S, std::optional<ScaleParams> scales = std::nullopt, const MfMinimizerSet* mins = nullptr,
              std::optional<int> collar = std::nullopt)
      : S_(S), scales_(scales), mins_(mins), collar_(collar), density_(S), eta_(S + 2, 0.0), theta_(S + 2, 0.0) {}

  void add(const ParticleConfig<D>& q, const Box<D>& box) {
    std::vector<double> c(S_, 0.0);
    for (const auto& x : q) c[x.s] += 1.0;
    for (int s = 0; s < S_; ++s) density_[s].push_back(c[s] / box.volume());
    ++samples_;
    if (!scales_ || !mins_) return;
    const auto eta = eta_field(q, box, *scales_, *mins_);
    const auto theta = theta_field(eta, *scales_, box.periodic() ? std::nullopt : collar_);
    for (int l : eta.labels) eta_[l] += 1.0 / static_cast<double>(eta.labels.size());
    for (int l : theta.labels) theta_[l] += 1.0 / static_cast<double>(theta.labels.size());
    ++indicator_samples_;
    if (collar_ && !box.periodic()) {
      const auto inner = delta_in(all_cells(theta.lattice), &theta.lattice);
      for (const auto& x : inner)
        if (theta.at(x) != *collar_) {
          ++collar_violations_;
          break;
        }
    }
    if (std::find(theta.labels.begin(), theta.labels.end(), 0) != theta.labels.end() &&
        static_cast<std::size_t>(std::count(theta.labels.begin(), theta.labels.end(), 0)) < theta.labels.size()) {
      const auto cs = contours_from_theta(theta, &eta, box.periodic() ? std::nullopt : collar_);
      contours_ += static_cast<double>(cs.size());
      for (const auto& g : cs) ++n_gamma_[g.n_cells()];
    }
  }

  ObservableRecord finish(int batches = 20) const {
    ObservableRecord r;
    for (int s = 0; s < S_; ++s) r.density.push_back(batch_means(density_[s], batches));
    const double k = indicator_samples_ ? 1.0 / static_cast<double>(indicator_samples_) : 0.0;
    for (double v : eta_) r.eta_fraction.push_back(v * k);
    for (double v : theta_) r.theta_fraction.push_back(v * k);
    r.contours = contours_ * k;
    r.n_gamma = n_gamma_;
    r.samples = samples_;
    r.collar_violations = collar_violations_;
    return r;
  }

private:
  int S_;
  std::optional<ScaleParams> scales_;
  const MfMinimizerSet* mins_;
  std::optional<int> collar_;
  std::vector<std::vector<double>> density_;
  std::vector<double> eta_, theta_;
  double contours_ = 0.0;
  std::map<std::size_t, std::size_t> n_gamma_;
  std::size_t samples_ = 0, indicator_samples_ = 0, collar_violations_ = 0;
};

/// Places particles of a collar of width w around the box by a Poisson draw at
/// the given species densities; used as a particle k-boundary.
template <int D>
ParticleConfig<D> poisson_collar(const Box<D>& box, double width, const SpinDensity& rho, CounterRng& rng) {
  ParticleConfig<D> out;
  double outer = 1.0;
  for (int a = 0; a < D; ++a) outer *= box.side[a] + 2.0 * width;
  for (int s = 0; s < static_cast<int>(rho.size()); ++s) {
    // Poisson count over the outer cube, then keep points outside the box.
    const double mean = rho[s] * outer;
    std::uint64_t n = 0;
    if (mean < 50.0) {
      double t = rng.uniform_open(), lim = std::exp(-mean);
      while (t > lim) {
        ++n;
        t *= rng.uniform_open();
      }
    } else {
      n = static_cast<std::uint64_t>(std::max(0.0, std::round(mean + std::sqrt(mean) * rng.normal())));
    }
    for (std::uint64_t i = 0; i < n; ++i) {
      Particle<D> p;
      p.s = s;
      for (int a = 0; a < D; ++a) p.r[a] = rng.uniform() * (box.side[a] + 2.0 * width) - width;
      if (!box.contains(p.r)) out.push_back(p);
    }
  }
  return out;
}

/// Checks a particle collar against phase k with the eta indicator on an
/// enlarged lattice covering box plus collar. The collar width and the box
/// sides must be multiples of l_-.
template <int D>
bool validate_k_collar(const Box<D>& box, const ParticleConfig<D>& collar, int k, const ScaleParams& scales,
                       const MfMinimizerSet& mins, double width) {
  const double lm = scales.ell_minus();
  const double w = width;
  if (std::abs(w / lm - std::round(w / lm)) > 1e-9 * (w / lm) || !box.compatible(lm))
    throw std::invalid_argument("validate_k_collar: l_- must divide the collar width and the box sides");
  Box<D> big = box;
  big.mode = BoundaryMode::external;
  for (int a = 0; a < D; ++a) big.side[a] += 2.0 * w;
  ParticleConfig<D> shifted;
  for (auto p : collar) {
    for (int a = 0; a < D; ++a) p.r[a] += w;
    if (big.contains(p.r)) shifted.push_back(p);
  }
  const auto eta = eta_field(shifted, big, scales, mins);
  const auto off = static_cast<std::int64_t>(std::llround(w / lm));
  const Lattice<D> inner = box.lattice(lm);
  CellSet<D> region(lm);
  for (std::size_t c = 0; c < eta.lattice.size(); ++c) {
    const auto x = eta.lattice.coords(c);
    bool inside = true;
    for (int a = 0; a < D; ++a) inside = inside && x[a] >= off && x[a] < off + inner.extent[a];
    if (!inside) region.insert(x);
  }
  return in_restricted_ensemble(eta, k, region);
}

}  // namespace kacpotts
