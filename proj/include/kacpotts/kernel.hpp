#pragma once

// Kac kernels: the continuum probability kernel J, the pair potential
// V = J * J as a radial table, and their cell-averaged lattice versions.

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include <boost/math/interpolators/cardinal_cubic_b_spline.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include "errors.hpp"
#include "geometry.hpp"

namespace kacpotts {

enum class Profile { quartic, bump };

inline Profile parse_profile(const std::string& name) {
  if (name == "quartic") return Profile::quartic;
  if (name == "bump") return Profile::bump;
  throw config_error("unknown kernel profile '" + name + "'");
}

inline std::string to_string(Profile p) { return p == Profile::quartic ? "quartic" : "bump"; }

namespace detail {

inline double unnormalized_profile(Profile p, double r) {
  if (!(r < 1.0)) return 0.0;
  const double u = 1.0 - r * r;
  if (p == Profile::quartic) return u * u;
  return std::exp(-1.0 / u);
}

template <int D>
constexpr double sphere_area() {
  return D == 2 ? 2.0 * std::numbers::pi : 4.0 * std::numbers::pi;
}

template <typename F>
double adaptive(F f, double a, double b, double tol = 1e-12, unsigned depth = 12) {
  if (!(b > a)) return 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, a, b, depth, tol);
}

}  // namespace detail

/// Radial probability kernel of range 1, J_gamma(r) = gamma^D J(gamma |r|).
template <int D>
class KacKernel {
public:
  explicit KacKernel(double gamma, Profile profile = Profile::quartic) : gamma_(gamma), profile_(profile) {
    check_dimension<D>();
    detail::require(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    const double radial = detail::adaptive(
        [p = profile](double r) { return std::pow(r, D - 1) * detail::unnormalized_profile(p, r); }, 0.0, 1.0);
    norm_ = 1.0 / (detail::sphere_area<D>() * radial);
  }

  double gamma() const { return gamma_; }
  Profile profile() const { return profile_; }
  double normalization() const { return norm_; }
  double range() const { return 1.0 / gamma_; }

  /// The unscaled kernel J(r) of range 1.
  double unit(double r) const { return norm_ * detail::unnormalized_profile(profile_, r); }

  double operator()(double distance) const { return std::pow(gamma_, D) * unit(gamma_ * distance); }

  /// Total mass by one-dimensional radial quadrature, for checks.
  double mass() const {
    return detail::sphere_area<D>() * detail::adaptive([this](double r) { return std::pow(r, D - 1) * unit(r); }, 0.0, 1.0);
  }

private:
  double gamma_;
  Profile profile_;
  double norm_ = 1.0;
};

/// Radial table of V_1 = J * J on [0, 2] (the range-1 kernel); V_gamma(r) = gamma^D V_1(gamma r).
template <int D>
class PairTable {
public:
  static constexpr int knots = 2048;

  explicit PairTable(Profile profile) : kernel_(0.5, profile) {
    std::vector<double> values(knots);
    step_ = 2.0 / (knots - 1);
    for (int i = 0; i < knots; ++i) values[i] = direct(i * step_);
    values.back() = 0.0;
    spline_ = std::make_unique<Spline>(values.begin(), values.end(), 0.0, step_, 0.0, 0.0);
    for (int i = 0; i < 97; ++i) {
      const double r = (i + 0.37) * 2.0 / 97.0;
      const double err = std::abs(unit(r) - direct(r));
      max_table_error_ = std::max(max_table_error_, err);
    }
    if (max_table_error_ > 1e-8)
      throw numerical_error("pair table deviates from direct quadrature by " + std::to_string(max_table_error_));
  }

  /// Shared instance per profile; built on first use.
  static const PairTable& get(Profile profile) {
    static std::once_flag flags[2];
    static std::unique_ptr<PairTable> tables[2];
    const int i = profile == Profile::quartic ? 0 : 1;
    std::call_once(flags[i], [&] { tables[i] = std::make_unique<PairTable>(profile); });
    return *tables[i];
  }

  double unit(double r) const {
    if (!(r < 2.0)) return 0.0;
    return (*spline_)(r);
  }

  double operator()(double distance, double gamma) const { return std::pow(gamma, D) * unit(gamma * distance); }

  double max_table_error() const { return max_table_error_; }

  /// V_1(r) by nested quadrature over the lens where both kernels are nonzero.
  double direct(double r) const {
    const auto& k = kernel_;
    if (r >= 2.0) return 0.0;
    auto j = [&](double x) { return k.unit(x); };
    if (r == 0.0) {
      return detail::sphere_area<D>() * detail::adaptive([&](double x) { return std::pow(x, D - 1) * j(x) * j(x); }, 0.0, 1.0);
    }
    // Polar coordinates (rho, angle) about the first kernel's centre. The angular
    // integrand is smooth on the lens, so a fixed rule keeps the outer integrand noise-free.
    using Inner = boost::math::quadrature::gauss<double, 30>;
    auto shell = [&](double rho) {
      if (rho <= 0.0) return 0.0;
      const double lim = (rho * rho + r * r - 1.0) / (2.0 * rho * r);  // cos(angle) must exceed this
      if (lim >= 1.0) return 0.0;
      auto dist = [&](double cosv) { return std::sqrt(std::max(0.0, rho * rho + r * r - 2.0 * rho * r * cosv)); };
      double ang;
      if constexpr (D == 2) {
        const double amax = lim <= -1.0 ? std::numbers::pi : std::acos(lim);
        ang = 2.0 * Inner::integrate([&](double phi) { return j(dist(std::cos(phi))); }, 0.0, amax);
      } else {
        const double umin = std::max(-1.0, lim);
        ang = 2.0 * std::numbers::pi * Inner::integrate([&](double u) { return j(dist(u)); }, umin, 1.0);
      }
      return std::pow(rho, D - 1) * j(rho) * ang;
    };
    // Square-root endpoint behaviour at the lens tips and where the lens becomes a
    // full shell suits the double-exponential rule.
    boost::math::quadrature::tanh_sinh<double> outer;
    auto integrate = [&](double a, double b) { return b > a ? outer.integrate(shell, a, b, 1e-13) : 0.0; };
    const double lo = std::max(0.0, r - 1.0);
    const double brk = 1.0 - r;
    if (brk > lo && brk < 1.0) return integrate(lo, brk) + integrate(brk, 1.0);
    return integrate(lo, 1.0);
  }

private:
  using Spline = boost::math::interpolators::cardinal_cubic_b_spline<double>;
  KacKernel<D> kernel_;
  double step_ = 0.0;
  std::unique_ptr<Spline> spline_;
  double max_table_error_ = 0.0;
};

namespace detail {

/// Cell-pair average of J_gamma at integer offset o for a cube lattice of the
/// given mesh: the integral over w in [-1,1]^D of J_gamma(mesh (o + w)) prod(1-|w_i|),
/// by tensor Gauss-Legendre on each half-axis.
template <int D>
double cell_pair_average(const KacKernel<D>& J, double mesh, const Index<D>& o) {
  using GL = boost::math::quadrature::gauss<double, 8>;
  std::array<double, D> w{};
  auto level = [&](auto&& self, int axis) -> double {
    if (axis == D) {
      double r2 = 0.0, weight = 1.0;
      for (int a = 0; a < D; ++a) {
        const double x = mesh * (static_cast<double>(o[a]) + w[a]);
        r2 += x * x;
        weight *= 1.0 - std::abs(w[a]);
      }
      return weight * J(std::sqrt(r2));
    }
    auto f = [&](double x) {
      w[axis] = x;
      return self(self, axis + 1);
    };
    return GL::integrate(f, -1.0, 0.0) + GL::integrate(f, 0.0, 1.0);
  };
  return level(level, 0);
}

template <int D>
std::vector<Index<D>> box_offsets(int radius) {
  std::vector<Index<D>> out;
  Index<D> o;
  o.fill(-radius);
  while (true) {
    out.push_back(o);
    int a = D - 1;
    while (a >= 0 && o[a] == radius) o[a--] = -radius;
    if (a < 0) break;
    ++o[a];
  }
  return out;
}

}  // namespace detail

/// Lattice kernels on a cube lattice of mesh h: the cell-pair averages Jhat and
/// the two-step kernel Vhat(x,x') = h^D sum_y Jhat(x,y) h^D Jhat(y,x'), so that
/// h^D sum Jhat = 1 and sum Vhat = 1.
template <int D>
class DiscreteKernel {
public:
  DiscreteKernel(const KacKernel<D>& J, double mesh) : mesh_(mesh), gamma_(J.gamma()) {
    detail::require(mesh > 0.0, "mesh must be positive");
    jr_ = static_cast<int>(std::ceil(J.range() / mesh)) + 1;
    const double cell = volume_of_cell<D>(mesh);
    std::vector<std::pair<Index<D>, double>> raw;
    double total = 0.0;
    for (const auto& o : detail::box_offsets<D>(jr_)) {
      const double v = detail::cell_pair_average<D>(J, mesh, o);
      if (v > 0.0) {
        raw.emplace_back(o, v);
        total += v;
      }
    }
    const double factor = 1.0 / (cell * total);
    renormalization_ = std::abs(factor - 1.0);
    jtab_.assign(side(jr_), 0.0);
    for (auto& [o, v] : raw) jtab_[slot(o, jr_)] = v * factor;
    for (auto& [o, v] : raw) j_offsets_.push_back(o);

    vr_ = 2 * jr_;
    vtab_.assign(side(vr_), 0.0);
    for (const auto& a : j_offsets_)
      for (const auto& b : j_offsets_) {
        Index<D> o;
        for (int i = 0; i < D; ++i) o[i] = a[i] + b[i];
        vtab_[slot(o, vr_)] += cell * cell * J_at(a) * J_at(b);
      }
    for (const auto& o : detail::box_offsets<D>(vr_)) {
      const double v = vtab_[slot(o, vr_)];
      if (v > 0.0) {
        v_offsets_.push_back(o);
        v_values_.push_back(v);
      }
    }
  }

  double mesh() const { return mesh_; }
  double gamma() const { return gamma_; }
  int j_radius() const { return jr_; }
  int v_radius() const { return vr_; }
  double renormalization() const { return renormalization_; }

  double J_at(const Index<D>& o) const {
    for (int i = 0; i < D; ++i)
      if (o[i] < -jr_ || o[i] > jr_) return 0.0;
    return jtab_[slot(o, jr_)];
  }
  double V_at(const Index<D>& o) const {
    for (int i = 0; i < D; ++i)
      if (o[i] < -vr_ || o[i] > vr_) return 0.0;
    return vtab_[slot(o, vr_)];
  }

  const std::vector<Index<D>>& j_offsets() const { return j_offsets_; }
  const std::vector<Index<D>>& v_offsets() const { return v_offsets_; }
  const std::vector<double>& v_values() const { return v_values_; }

  double j_row_sum() const {
    double s = 0.0;
    for (const auto& o : j_offsets_) s += J_at(o);
    return s * volume_of_cell<D>(mesh_);
  }
  double v_row_sum() const {
    double s = 0.0;
    for (double v : v_values_) s += v;
    return s;
  }

private:
  static std::size_t side(int r) {
    std::size_t n = 1;
    for (int i = 0; i < D; ++i) n *= static_cast<std::size_t>(2 * r + 1);
    return n;
  }
  static std::size_t slot(const Index<D>& o, int r) {
    std::size_t i = 0;
    for (int a = 0; a < D; ++a) i = i * static_cast<std::size_t>(2 * r + 1) + static_cast<std::size_t>(o[a] + r);
    return i;
  }

  double mesh_;
  double gamma_;
  int jr_ = 0, vr_ = 0;
  double renormalization_ = 0.0;
  std::vector<double> jtab_, vtab_;
  std::vector<Index<D>> j_offsets_, v_offsets_;
  std::vector<double> v_values_;
};

struct CoarseKernelReport {
  double max_deviation = 0.0;  // max |Vhat(x,y) - h^D V^(l)(z_x,z_y)|
  double scale = 0.0;          // gamma^{d/2} (gamma l_-)
  double fitted_constant = 0.0;
};

/// Compares Vhat with the kernel built from averages over coarse cubes of side
/// ell = m h, brought to the same per-site normalization.
template <int D>
CoarseKernelReport coarse_kernel_deviation(const KacKernel<D>& J, const DiscreteKernel<D>& fine, int m) {
  detail::require(m >= 1, "block factor must be positive");
  const double h = fine.mesh();
  const DiscreteKernel<D> coarse(J, h * m);
  // Unnormalized V^(l) = l^D sum_w Jbar Jbar; DiscreteKernel stores l^{2D} sum Jbar Jbar.
  const double lvol = volume_of_cell<D>(h * m);
  const double hvol = volume_of_cell<D>(h);
  CoarseKernelReport rep;
  const int R = fine.v_radius();
  for (const auto& p : detail::box_offsets<D>(m)) {
    bool inside = true;
    for (int a = 0; a < D; ++a) inside = inside && p[a] >= 0 && p[a] < m;
    if (!inside) continue;
    for (const auto& o : detail::box_offsets<D>(R + m)) {
      Index<D> z;
      for (int a = 0; a < D; ++a) {
        const auto q = p[a] + o[a];
        z[a] = q >= 0 ? q / m : -((-q + m - 1) / m);
      }
      const double coarse_v = hvol * coarse.V_at(z) / lvol;
      rep.max_deviation = std::max(rep.max_deviation, std::abs(fine.V_at(o) - coarse_v));
    }
  }
  const double g = J.gamma();
  rep.scale = std::pow(g, 0.5 * D) * (g * h * m);
  rep.fitted_constant = rep.max_deviation / rep.scale;
  return rep;
}

}  // namespace kacpotts
