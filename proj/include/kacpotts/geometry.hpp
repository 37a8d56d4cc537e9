#pragma once

// Multiscale cubic partitions of a box: cells, cell sets, Moore-connected
// components, inner/outer boundaries and block averages.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "errors.hpp"

namespace kacpotts {

template <int D>
using Index = std::array<std::int64_t, D>;

template <int D>
using Point = std::array<double, D>;

template <int D>
constexpr void check_dimension() {
  static_assert(D == 2 || D == 3, "only d = 2 and d = 3 are supported");
}

/// Integer power of a mesh size: ell^D.
template <int D>
constexpr double volume_of_cell(double mesh) {
  double v = 1.0;
  for (int i = 0; i < D; ++i) v *= mesh;
  return v;
}

/// All 3^D - 1 nonzero offsets with entries in {-1, 0, 1}, in lexicographic order.
template <int D>
const std::vector<Index<D>>& moore_offsets() {
  check_dimension<D>();
  static const std::vector<Index<D>> offsets = [] {
    std::vector<Index<D>> out;
    Index<D> o;
    o.fill(-1);
    while (true) {
      if (std::any_of(o.begin(), o.end(), [](auto v) { return v != 0; })) out.push_back(o);
      int axis = D - 1;
      while (axis >= 0 && o[axis] == 1) o[axis--] = -1;
      if (axis < 0) break;
      ++o[axis];
    }
    return out;
  }();
  return offsets;
}

/// Cell C_x = [x*mesh, x*mesh + mesh) containing r. Half-open in every axis.
template <int D>
Index<D> cell_of(const Point<D>& r, double mesh) {
  detail::require(mesh > 0.0, "cell_of: mesh must be positive");
  Index<D> x;
  for (int i = 0; i < D; ++i) {
    auto k = static_cast<std::int64_t>(std::floor(r[i] / mesh));
    // Keep the decision consistent with the product k*mesh used elsewhere.
    if (static_cast<double>(k + 1) * mesh <= r[i]) ++k;
    if (static_cast<double>(k) * mesh > r[i]) --k;
    x[i] = k;
  }
  return x;
}

/// A rectangular array of cells of one mesh, either a torus or a finite patch
/// of Z^d. Cell coordinates run over [0, extent) in each axis.
template <int D>
struct Lattice {
  double mesh = 1.0;
  Index<D> extent{};
  bool periodic = true;

  std::size_t size() const {
    std::size_t n = 1;
    for (auto e : extent) n *= static_cast<std::size_t>(e);
    return n;
  }

  bool in_range(const Index<D>& x) const {
    for (int i = 0; i < D; ++i)
      if (x[i] < 0 || x[i] >= extent[i]) return false;
    return true;
  }

  /// Periodic reduction; identity on non-periodic lattices.
  Index<D> wrap(Index<D> x) const {
    if (!periodic) return x;
    for (int i = 0; i < D; ++i) {
      x[i] %= extent[i];
      if (x[i] < 0) x[i] += extent[i];
    }
    return x;
  }

  /// Linear index of a cell after wrapping, or nullopt if it lies outside a
  /// non-periodic lattice.
  std::optional<std::size_t> linear(const Index<D>& x) const {
    Index<D> w = wrap(x);
    if (!in_range(w)) return std::nullopt;
    std::size_t i = 0;
    for (int a = 0; a < D; ++a) i = i * static_cast<std::size_t>(extent[a]) + static_cast<std::size_t>(w[a]);
    return i;
  }

  std::size_t linear_unchecked(const Index<D>& x) const {
    std::size_t i = 0;
    for (int a = 0; a < D; ++a) i = i * static_cast<std::size_t>(extent[a]) + static_cast<std::size_t>(x[a]);
    return i;
  }

  Index<D> coords(std::size_t i) const {
    Index<D> x;
    for (int a = D - 1; a >= 0; --a) {
      x[a] = static_cast<std::int64_t>(i % static_cast<std::size_t>(extent[a]));
      i /= static_cast<std::size_t>(extent[a]);
    }
    return x;
  }

  Point<D> center(const Index<D>& x) const {
    Point<D> c;
    for (int a = 0; a < D; ++a) c[a] = (static_cast<double>(x[a]) + 0.5) * mesh;
    return c;
  }

  double cell_volume() const { return volume_of_cell<D>(mesh); }

  bool operator==(const Lattice&) const = default;
};

enum class BoundaryMode { periodic, external };

/// Axis-aligned box [0, side_0) x ... anchored at the origin.
template <int D>
struct Box {
  Point<D> side{};
  BoundaryMode mode = BoundaryMode::periodic;

  static Box cube(double length, BoundaryMode m = BoundaryMode::periodic) {
    Box b;
    b.side.fill(length);
    b.mode = m;
    return b;
  }

  bool periodic() const { return mode == BoundaryMode::periodic; }

  double volume() const {
    double v = 1.0;
    for (double s : side) v *= s;
    return v;
  }

  /// True when every side is an integer multiple of mesh (relative 1e-9).
  bool compatible(double mesh) const {
    if (!(mesh > 0.0)) return false;
    for (double s : side) {
      double q = s / mesh;
      if (q < 0.5 || std::abs(q - std::round(q)) > 1e-9 * std::max(1.0, q)) return false;
    }
    return true;
  }

  Lattice<D> lattice(double mesh) const {
    if (!compatible(mesh))
      throw std::invalid_argument("box sides are not integer multiples of mesh " + std::to_string(mesh));
    Lattice<D> l;
    l.mesh = mesh;
    l.periodic = periodic();
    for (int a = 0; a < D; ++a) l.extent[a] = static_cast<std::int64_t>(std::llround(side[a] / mesh));
    return l;
  }

  bool contains(const Point<D>& r) const {
    for (int a = 0; a < D; ++a)
      if (!(r[a] >= 0.0 && r[a] < side[a])) return false;
    return true;
  }

  Point<D> wrap(Point<D> r) const {
    if (!periodic()) return r;
    for (int a = 0; a < D; ++a) {
      r[a] = std::fmod(r[a], side[a]);
      if (r[a] < 0.0) r[a] += side[a];
      if (r[a] >= side[a]) r[a] = 0.0;
    }
    return r;
  }

  /// Cell of r at the given mesh; wraps on a torus, throws outside a finite box.
  Index<D> cell_of(const Point<D>& r, double mesh) const {
    Point<D> w = wrap(r);
    if (!contains(w)) throw std::out_of_range("cell_of: point outside the box");
    Index<D> x = kacpotts::cell_of<D>(w, mesh);
    Lattice<D> l = lattice(mesh);
    for (int a = 0; a < D; ++a) x[a] = std::min(x[a], l.extent[a] - 1);
    return x;
  }
};

template <int D>
struct CellIndex {
  double mesh = 1.0;
  Index<D> x{};
  bool operator==(const CellIndex&) const = default;
};

/// Finite set of cells sharing one mesh. Ordered, so iteration is deterministic.
template <int D>
class CellSet {
public:
  CellSet() = default;
  explicit CellSet(double mesh) : mesh_(mesh) {}
  CellSet(double mesh, std::initializer_list<Index<D>> cells) : mesh_(mesh), cells_(cells) {}

  double mesh() const { return mesh_; }
  std::size_t size() const { return cells_.size(); }
  bool empty() const { return cells_.empty(); }
  bool contains(const Index<D>& x) const { return cells_.count(x) > 0; }
  void insert(const Index<D>& x) { cells_.insert(x); }
  void erase(const Index<D>& x) { cells_.erase(x); }
  auto begin() const { return cells_.begin(); }
  auto end() const { return cells_.end(); }
  const std::set<Index<D>>& cells() const { return cells_; }

  bool includes(const CellSet& other) const {
    return std::includes(cells_.begin(), cells_.end(), other.cells_.begin(), other.cells_.end());
  }

  CellSet united(const CellSet& other) const {
    CellSet out(mesh_);
    out.cells_ = cells_;
    out.cells_.insert(other.cells_.begin(), other.cells_.end());
    return out;
  }

  bool operator==(const CellSet& o) const { return mesh_ == o.mesh_ && cells_ == o.cells_; }

private:
  double mesh_ = 1.0;
  std::set<Index<D>> cells_;
};

template <int D>
CellSet<D> all_cells(const Lattice<D>& lat) {
  CellSet<D> out(lat.mesh);
  for (std::size_t i = 0; i < lat.size(); ++i) out.insert(lat.coords(i));
  return out;
}

template <int D>
CellSet<D> complement(const CellSet<D>& a, const Lattice<D>& lat) {
  CellSet<D> out(lat.mesh);
  for (std::size_t i = 0; i < lat.size(); ++i) {
    auto x = lat.coords(i);
    if (!a.contains(x)) out.insert(x);
  }
  return out;
}

namespace detail {

/// Normalizes a cell set onto a lattice (wrapping on tori). Without a lattice the
/// set lives in Z^d and is returned unchanged.
template <int D>
CellSet<D> normalized(const CellSet<D>& a, const Lattice<D>* lat) {
  if (!lat) return a;
  CellSet<D> out(a.mesh());
  for (const auto& x : a) {
    auto w = lat->wrap(x);
    if (!lat->in_range(w)) throw std::invalid_argument("cell outside the lattice");
    out.insert(w);
  }
  return out;
}

/// Moore neighbours of x that exist in the topology (wrapped on a torus,
/// clipped on a finite lattice, unrestricted in Z^d).
template <int D>
std::vector<Index<D>> neighbours(const Index<D>& x, const Lattice<D>* lat) {
  std::vector<Index<D>> out;
  out.reserve(moore_offsets<D>().size());
  for (const auto& o : moore_offsets<D>()) {
    Index<D> y;
    for (int a = 0; a < D; ++a) y[a] = x[a] + o[a];
    if (lat) {
      y = lat->wrap(y);
      if (!lat->in_range(y) || y == x) continue;
    }
    out.push_back(y);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace detail

/// Maximal components under closure-touching (Moore) adjacency. Components are
/// ordered by their smallest cell.
template <int D>
std::vector<CellSet<D>> connected_components(const CellSet<D>& a, const Lattice<D>* lat = nullptr) {
  check_dimension<D>();
  const CellSet<D> cells = detail::normalized(a, lat);
  std::set<Index<D>> unvisited(cells.begin(), cells.end());
  std::vector<CellSet<D>> comps;
  while (!unvisited.empty()) {
    CellSet<D> comp(a.mesh());
    std::deque<Index<D>> queue{*unvisited.begin()};
    unvisited.erase(unvisited.begin());
    while (!queue.empty()) {
      Index<D> x = queue.front();
      queue.pop_front();
      comp.insert(x);
      for (const auto& y : detail::neighbours<D>(x, lat)) {
        auto it = unvisited.find(y);
        if (it != unvisited.end()) {
          unvisited.erase(it);
          queue.push_back(y);
        }
      }
    }
    comps.push_back(std::move(comp));
  }
  return comps;
}

/// Cells outside A touching A.
template <int D>
CellSet<D> delta_out(const CellSet<D>& a, const Lattice<D>* lat = nullptr) {
  const CellSet<D> cells = detail::normalized(a, lat);
  CellSet<D> out(a.mesh());
  for (const auto& x : cells)
    for (const auto& y : detail::neighbours<D>(x, lat))
      if (!cells.contains(y)) out.insert(y);
  return out;
}

/// Cells of A touching the complement of A. On a finite non-periodic lattice
/// the space beyond the lattice counts as complement.
template <int D>
CellSet<D> delta_in(const CellSet<D>& a, const Lattice<D>* lat = nullptr) {
  const CellSet<D> cells = detail::normalized(a, lat);
  CellSet<D> out(a.mesh());
  for (const auto& x : cells) {
    bool touches = false;
    for (const auto& o : moore_offsets<D>()) {
      Index<D> y;
      for (int k = 0; k < D; ++k) y[k] = x[k] + o[k];
      if (lat) {
        y = lat->wrap(y);
        if (!lat->in_range(y)) {
          touches = true;
          break;
        }
      }
      if (!cells.contains(y)) {
        touches = true;
        break;
      }
    }
    if (touches) out.insert(x);
  }
  return out;
}

/// A marked point: position and spin species (0-based internally).
template <int D>
struct Particle {
  Point<D> r{};
  int s = 0;
  bool operator==(const Particle&) const = default;
};

template <int D>
using ParticleConfig = std::vector<Particle<D>>;

/// Nonnegative S-channel field, constant on the cells of a lattice.
template <int D>
struct DensityField {
  Lattice<D> lattice;
  int species = 1;
  std::vector<double> values;  // cell-major: values[cell * species + s]

  DensityField() = default;
  DensityField(const Lattice<D>& lat, int S, double fill = 0.0)
      : lattice(lat), species(S), values(lat.size() * static_cast<std::size_t>(S), fill) {}

  double& at(std::size_t cell, int s) { return values[cell * species + s]; }
  double at(std::size_t cell, int s) const { return values[cell * species + s]; }
  std::size_t cells() const { return lattice.size(); }

  static DensityField constant(const Lattice<D>& lat, const std::vector<double>& rho) {
    DensityField f(lat, static_cast<int>(rho.size()));
    for (std::size_t c = 0; c < lat.size(); ++c)
      for (int s = 0; s < f.species; ++s) f.at(c, s) = rho[s];
    return f;
  }
};

/// Particle counts per cell and species divided by the cell volume.
template <int D>
DensityField<D> block_average(const ParticleConfig<D>& q, const Box<D>& box, double mesh, int S) {
  check_dimension<D>();
  detail::require(S >= 1, "block_average: need at least one species");
  Lattice<D> lat = box.lattice(mesh);
  DensityField<D> f(lat, S);
  const double inv_vol = 1.0 / lat.cell_volume();
  for (const auto& p : q) {
    detail::require(p.s >= 0 && p.s < S, "block_average: spin out of range");
    auto x = box.cell_of(p.r, mesh);
    f.at(lat.linear_unchecked(x), p.s) += inv_vol;
  }
  return f;
}

/// Arithmetic mean of the finer cells inside each coarse cell of the given mesh.
template <int D>
DensityField<D> block_average(const DensityField<D>& f, double mesh) {
  const double ratio = mesh / f.lattice.mesh;
  const auto m = static_cast<std::int64_t>(std::llround(ratio));
  if (m < 1 || std::abs(ratio - static_cast<double>(m)) > 1e-9 * ratio)
    throw std::invalid_argument("block_average: source mesh does not divide target mesh");
  Lattice<D> coarse = f.lattice;
  coarse.mesh = mesh;
  for (int a = 0; a < D; ++a) {
    if (f.lattice.extent[a] % m != 0)
      throw std::invalid_argument("block_average: lattice extent not divisible by the block size");
    coarse.extent[a] = f.lattice.extent[a] / m;
  }
  DensityField<D> out(coarse, f.species);
  const double w = 1.0 / static_cast<double>(volume_of_cell<D>(static_cast<double>(m)));
  for (std::size_t i = 0; i < f.cells(); ++i) {
    Index<D> x = f.lattice.coords(i);
    for (int a = 0; a < D; ++a) x[a] /= m;
    std::size_t j = coarse.linear_unchecked(x);
    for (int s = 0; s < f.species; ++s) out.at(j, s) += w * f.at(i, s);
  }
  return out;
}

}  // namespace kacpotts
