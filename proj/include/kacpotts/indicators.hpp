#pragma once

// Phase indicators on the scales (zeta, l_-, l_+) and contours of the l_+ indicator.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"
#include "meanfield.hpp"

namespace kacpotts {

struct ScaleParams {
  double gamma = 0.1;
  double alpha_minus = 0.1;
  double alpha_plus = 0.2;
  double a_zeta = 0.05;
  std::optional<double> ell_minus_override;
  std::optional<double> ell_plus_override;
  std::optional<double> zeta_override;

  double ell_minus() const { return ell_minus_override ? *ell_minus_override : std::pow(gamma, -1.0 + alpha_minus); }
  double ell_plus() const { return ell_plus_override ? *ell_plus_override : std::pow(gamma, -1.0 - alpha_plus); }
  double zeta() const { return zeta_override ? *zeta_override : std::pow(gamma, a_zeta); }

  /// Integer number of l_- cells along one side of an l_+ cell.
  std::int64_t ratio() const {
    const double r = ell_plus() / ell_minus();
    const auto m = std::llround(r);
    if (m < 1 || std::abs(r - static_cast<double>(m)) > 1e-9 * r)
      throw std::invalid_argument("scale params: l_- must divide l_+");
    return m;
  }

  /// Enforces the ordering and divisibility constraints; the box side is optional.
  void validate(std::optional<double> box_side = std::nullopt) const {
    detail::require(gamma > 0.0 && gamma < 1.0, "scale params: gamma must lie in (0,1)");
    detail::require(ell_minus() > 0.0 && ell_plus() > 0.0 && zeta() > 0.0, "scale params: scales must be positive");
    if (!ell_minus_override && !ell_plus_override)
      detail::require(ell_minus() < 1.0 / gamma && 1.0 / gamma < ell_plus(), "scale params: need l_- < 1/gamma < l_+");
    detail::require(ell_minus() <= ell_plus(), "scale params: need l_- <= l_+");
    ratio();
    if (box_side) {
      const double r = *box_side / ell_plus();
      if (std::abs(r - std::round(r)) > 1e-9 * r || std::round(r) < 1.0)
        throw std::invalid_argument("scale params: l_+ must divide the box side");
    }
  }
};

struct ExponentCheck {
  std::string name;
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds = false;
};

/// Diagnostic report on the exponent inequalities; never throws.
inline std::vector<ExponentCheck> exponent_report(const ScaleParams& p, int d) {
  const double am = p.alpha_minus, ap = p.alpha_plus, a = p.a_zeta, dd = d;
  std::vector<ExponentCheck> out;
  auto add = [&](std::string name, double lhs, double rhs) { out.push_back({std::move(name), lhs, rhs, lhs < rhs}); };
  add("2 a d + alpha_- d^2 < alpha_+ / 2", 2.0 * a * dd + am * dd * dd, ap / 2.0);
  add("0 < 1/2 - 2 d alpha_+", 0.0, 0.5 - 2.0 * dd * ap);
  add("0 < 1/4 - d (alpha_+ - alpha_-)", 0.0, 0.25 - dd * (ap - am));
  add("(alpha_+ + alpha_-) / (1 - alpha_-) < 1/d", (ap + am) / (1.0 - am), 1.0 / dd);
  add("4 (alpha_+ + alpha_-) + alpha_- / 2 < 1/4", 4.0 * (ap + am) + am / 2.0, 0.25);
  add("a < alpha_-", a, am);
  add("alpha_- < alpha_+", am, ap);
  return out;
}

enum class IndicatorKind { eta, theta };

/// Labels 1..S are the ordered phases, S+1 the disordered one, 0 undetermined.
template <int D>
struct PhaseField {
  Lattice<D> lattice;
  IndicatorKind kind = IndicatorKind::eta;
  int S = 3;
  std::vector<int> labels;

  PhaseField() = default;
  PhaseField(const Lattice<D>& lat, IndicatorKind k, int species, int fill = 0)
      : lattice(lat), kind(k), S(species), labels(lat.size(), fill) {}

  int at(const Index<D>& x) const { return labels[lattice.linear_unchecked(x)]; }
  int& at(const Index<D>& x) { return labels[lattice.linear_unchecked(x)]; }

  void check() const {
    if (labels.size() != lattice.size()) throw property_violation("phase field: label count mismatch");
    for (int l : labels)
      if (l < 0 || l > S + 1) throw property_violation("phase field: label out of range");
  }

  CellSet<D> where(int label) const {
    CellSet<D> out(lattice.mesh);
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) out.insert(lattice.coords(i));
    return out;
  }

  bool operator==(const PhaseField&) const = default;
};

namespace detail {

inline void check_zeta(double zeta, const MfMinimizerSet& mins) {
  if (!(zeta < mins.zeta_bound()))
    throw std::invalid_argument("eta: zeta must be below half the minimal gap between phases");
}

}  // namespace detail

/// eta on the l_- lattice from a density field whose mesh divides l_-.
template <int D>
PhaseField<D> eta_field(const DensityField<D>& rho, const ScaleParams& params, const MfMinimizerSet& mins) {
  const double zeta = params.zeta();
  detail::check_zeta(zeta, mins);
  if (rho.species != mins.S) throw std::invalid_argument("eta: species count mismatch");
  const DensityField<D> avg = std::abs(rho.lattice.mesh - params.ell_minus()) <= 1e-12 * params.ell_minus()
                                  ? rho
                                  : block_average(rho, params.ell_minus());
  PhaseField<D> eta(avg.lattice, IndicatorKind::eta, mins.S);
  for (std::size_t c = 0; c < avg.cells(); ++c) {
    int label = 0;
    for (int k = 1; k <= mins.S + 1; ++k) {
      bool ok = true;
      for (int s = 0; s < mins.S && ok; ++s) ok = std::abs(avg.at(c, s) - mins.rho[k - 1][s]) <= zeta;
      if (!ok) continue;
      if (label != 0) throw property_violation("eta: two phase labels match one cell");
      label = k;
    }
    eta.labels[c] = label;
  }
  return eta;
}

template <int D>
PhaseField<D> eta_field(const ParticleConfig<D>& q, const Box<D>& box, const ScaleParams& params,
                        const MfMinimizerSet& mins) {
  return eta_field(block_average(q, box, params.ell_minus(), mins.S), params, mins);
}

/// Theta on the l_+ lattice. On non-periodic lattices ring cells beyond the edge
/// take the collar label (0 when none is given).
template <int D>
PhaseField<D> theta_field(const PhaseField<D>& eta, const ScaleParams& params, std::optional<int> collar = std::nullopt) {
  if (eta.kind != IndicatorKind::eta) throw std::invalid_argument("theta: input must be an eta field");
  if (std::abs(eta.lattice.mesh - params.ell_minus()) > 1e-12 * params.ell_minus())
    throw std::invalid_argument("theta: eta mesh differs from l_-");
  const std::int64_t m = params.ratio();
  Lattice<D> coarse = eta.lattice;
  coarse.mesh = params.ell_plus();
  for (int a = 0; a < D; ++a) {
    if (eta.lattice.extent[a] % m != 0) throw std::invalid_argument("theta: l_+ must divide the lattice extent");
    coarse.extent[a] = eta.lattice.extent[a] / m;
  }
  // Label of each l_+ cell if eta is constant on it, else 0.
  std::vector<int> uniform(coarse.size(), -1);
  for (std::size_t i = 0; i < eta.labels.size(); ++i) {
    Index<D> x = eta.lattice.coords(i);
    for (int a = 0; a < D; ++a) x[a] /= m;
    int& u = uniform[coarse.linear_unchecked(x)];
    const int l = eta.labels[i];
    u = (u == -1 || u == l) ? l : 0;
  }
  PhaseField<D> theta(coarse, IndicatorKind::theta, eta.S);
  for (std::size_t c = 0; c < coarse.size(); ++c) {
    const Index<D> x = coarse.coords(c);
    int label = uniform[c];
    for (const auto& o : moore_offsets<D>()) {
      if (label == 0) break;
      Index<D> y;
      for (int a = 0; a < D; ++a) y[a] = x[a] + o[a];
      auto j = coarse.linear(y);
      const int l = j ? uniform[*j] : collar.value_or(0);
      if (l != label) label = 0;
    }
    theta.labels[c] = label;
  }
  return theta;
}

template <int D>
bool in_restricted_ensemble(const PhaseField<D>& eta, int k, const CellSet<D>& region) {
  for (const auto& x : region) {
    if (!eta.lattice.in_range(x)) throw std::invalid_argument("restricted ensemble: cell outside the lattice");
    if (eta.at(x) != k) return false;
  }
  return true;
}

template <int D>
bool in_restricted_ensemble(const DensityField<D>& rho, int k, const CellSet<D>& region, const ScaleParams& params,
                            const MfMinimizerSet& mins) {
  return in_restricted_ensemble(eta_field(rho, params, mins), k, region);
}

template <int D>
bool in_restricted_ensemble(const ParticleConfig<D>& q, const Box<D>& box, int k, const CellSet<D>& region,
                            const ScaleParams& params, const MfMinimizerSet& mins) {
  return in_restricted_ensemble(eta_field(q, box, params, mins), k, region);
}

template <int D>
struct Contour {
  CellSet<D> support;                     // l_+ cells
  std::map<Index<D>, int> specification;  // eta on the l_- cells of the support
  int color = 0;
  CellSet<D> exterior;
  std::map<int, CellSet<D>> interiors;    // grouped by label

  std::size_t n_cells() const { return support.size(); }

  CellSet<D> interior() const {
    CellSet<D> out(support.mesh());
    for (const auto& [h, cells] : interiors) out = out.united(cells);
    return out;
  }

  CellSet<D> closure() const { return support.united(interior()); }
};

namespace detail {

template <int D>
int constant_label(const PhaseField<D>& theta, const CellSet<D>& cells, bool pad_with_collar, std::optional<int> collar,
                   const char* what) {
  int label = -1;
  auto take = [&](int l) {
    if (l == 0 || (label != -1 && l != label)) throw property_violation(std::string("contour: ") + what);
    label = l;
  };
  for (const auto& x : cells) take(theta.at(x));
  if (pad_with_collar) take(collar.value_or(0));
  if (label == -1) throw property_violation(std::string("contour: empty ") + what);
  return label;
}

template <int D>
bool touches_edge(const CellSet<D>& cells, const Lattice<D>& lat) {
  if (lat.periodic) return false;
  for (const auto& x : cells)
    for (int a = 0; a < D; ++a)
      if (x[a] == 0 || x[a] == lat.extent[a] - 1) return true;
  return false;
}

}  // namespace detail

/// Contours of a Theta field; eta supplies the specification on each support.
template <int D>
std::vector<Contour<D>> contours_from_theta(const PhaseField<D>& theta, const PhaseField<D>* eta = nullptr,
                                            std::optional<int> collar = std::nullopt) {
  if (theta.kind != IndicatorKind::theta) throw std::invalid_argument("contours: input must be a theta field");
  theta.check();
  const Lattice<D>& lat = theta.lattice;
  const CellSet<D> zero = theta.where(0);
  if (lat.periodic && zero.size() == lat.size()) throw property_violation("contour: Theta vanishes everywhere, no exterior");
  std::vector<Contour<D>> out;
  for (auto& sp : connected_components(zero, &lat)) {
    Contour<D> g;
    g.support = sp;
    auto rest = connected_components(complement(sp, lat), &lat);
    // On a torus the exterior is the largest component (ties: smallest cell, as
    // components come ordered); in a finite box it is everything connected to the collar.
    std::size_t ext = 0;
    if (lat.periodic)
      for (std::size_t i = 1; i < rest.size(); ++i)
        if (rest[i].size() > rest[ext].size()) ext = i;
    g.exterior = CellSet<D>(lat.mesh);
    for (std::size_t i = 0; i < rest.size(); ++i) {
      const bool exterior_part = lat.periodic ? i == ext : detail::touches_edge(rest[i], lat);
      if (exterior_part) {
        g.exterior = g.exterior.united(rest[i]);
        continue;
      }
      const int h = detail::constant_label(theta, delta_in(rest[i], &lat), false, collar, "interior collar not constant");
      auto& slot = g.interiors[h];
      if (slot.empty()) slot = CellSet<D>(lat.mesh);
      slot = slot.united(rest[i]);
    }
    const CellSet<D> c = g.closure();
    g.color = detail::constant_label(theta, delta_out(c, &lat), detail::touches_edge(c, lat), collar,
                                     "Theta not constant around the contour");
    if (eta) {
      const std::int64_t m = static_cast<std::int64_t>(std::llround(lat.mesh / eta->lattice.mesh));
      for (std::size_t i = 0; i < eta->labels.size(); ++i) {
        Index<D> y = eta->lattice.coords(i);
        Index<D> z = y;
        for (int a = 0; a < D; ++a) z[a] /= m;
        if (sp.contains(z)) g.specification[y] = eta->labels[i];
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

template <int D>
std::vector<Contour<D>> extract_contours(const DensityField<D>& rho, const ScaleParams& params,
                                         const MfMinimizerSet& mins, std::optional<int> collar = std::nullopt) {
  const auto eta = eta_field(rho, params, mins);
  return contours_from_theta(theta_field(eta, params, collar), &eta, collar);
}

template <int D>
std::vector<Contour<D>> extract_contours(const ParticleConfig<D>& q, const Box<D>& box, const ScaleParams& params,
                                         const MfMinimizerSet& mins, std::optional<int> collar = std::nullopt) {
  const auto eta = eta_field(q, box, params, mins);
  return contours_from_theta(theta_field(eta, params, collar), &eta, collar);
}

/// Contours whose closure is not contained in the closure of another one.
template <int D>
std::vector<Contour<D>> external_contours(const std::vector<Contour<D>>& contours) {
  std::vector<CellSet<D>> cl;
  for (const auto& g : contours) cl.push_back(g.closure());
  std::vector<Contour<D>> out;
  for (std::size_t i = 0; i < contours.size(); ++i) {
    bool inner = false;
    for (std::size_t j = 0; j < contours.size() && !inner; ++j)
      inner = j != i && cl[j].includes(cl[i]) && !(cl[j] == cl[i]);
    if (!inner) out.push_back(contours[i]);
  }
  return out;
}

/// Theta field generated by a contour family: supports get 0, interiors their
/// label, everything else the background label.
template <int D>
PhaseField<D> synthesize_theta(const std::vector<Contour<D>>& contours, const Lattice<D>& lat, int S, int background) {
  PhaseField<D> theta(lat, IndicatorKind::theta, S, background);
  std::vector<const Contour<D>*> order;
  for (const auto& g : contours) order.push_back(&g);
  // Outer contours first so nested ones overwrite their interiors.
  std::stable_sort(order.begin(), order.end(),
                   [](const Contour<D>* a, const Contour<D>* b) { return a->closure().size() > b->closure().size(); });
  for (const auto* g : order) {
    for (const auto& [h, cells] : g->interiors)
      for (const auto& x : cells) theta.at(x) = h;
    for (const auto& x : g->support) theta.at(x) = 0;
  }
  return theta;
}

}  // namespace kacpotts
