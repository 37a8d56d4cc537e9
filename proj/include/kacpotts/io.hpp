#pragma once

// Text serialization: JSON for structured records, CSV for grids and snapshots.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "functional.hpp"
#include "indicators.hpp"
#include "meanfield.hpp"
#include "simulator.hpp"

namespace kacpotts::io {

using nlohmann::json;

/// Shortest round-trip decimal form of a double.
inline std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline json to_json(const MfMinimizerSet& m) {
  json j;
  j["S"] = m.S;
  j["beta"] = m.beta;
  j["lambda"] = m.lambda;
  j["a"] = m.a;
  j["b"] = m.b;
  j["c"] = m.c;
  j["b_star"] = m.b_star;
  j["phi"] = m.phi;
  j["rho"] = m.rho;
  j["kappa"] = m.kappa;
  j["free_energy"] = m.free_energy;
  j["residual"] = m.residual;
  return j;
}

template <int D>
json to_json(const Contour<D>& g) {
  json j;
  j["color"] = g.color;
  j["n_cells"] = g.n_cells();
  j["mesh"] = g.support.mesh();
  j["support"] = json::array();
  for (const auto& x : g.support) j["support"].push_back(std::vector<std::int64_t>(x.begin(), x.end()));
  j["interiors"] = json::object();
  for (const auto& [h, cells] : g.interiors) {
    json list = json::array();
    for (const auto& x : cells) list.push_back(std::vector<std::int64_t>(x.begin(), x.end()));
    j["interiors"][std::to_string(h)] = list;
  }
  return j;
}

template <int D>
json to_json(const std::vector<Contour<D>>& gs) {
  json j = json::array();
  for (const auto& g : gs) j.push_back(to_json(g));
  return j;
}

/// Grid dump: one row per cell with its integer coordinates and label.
template <int D>
void write_csv(std::ostream& os, const PhaseField<D>& f) {
  for (int a = 0; a < D; ++a) os << "i" << a << ",";
  os << "label\n";
  for (std::size_t c = 0; c < f.labels.size(); ++c) {
    const auto x = f.lattice.coords(c);
    for (int a = 0; a < D; ++a) os << x[a] << ",";
    os << f.labels[c] << "\n";
  }
}

/// Configuration snapshot with 1-based spins.
template <int D>
void write_csv(std::ostream& os, const ParticleConfig<D>& q) {
  static const char* axes[] = {"x", "y", "z"};
  for (int a = 0; a < D; ++a) os << axes[a] << ",";
  os << "s\n";
  for (const auto& p : q) {
    for (int a = 0; a < D; ++a) os << num(p.r[a]) << ",";
    os << p.s + 1 << "\n";
  }
}

template <int D>
ParticleConfig<D> read_csv_config(std::istream& is) {
  ParticleConfig<D> q;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    Particle<D> p;
    std::string cell;
    for (int a = 0; a < D; ++a) {
      std::getline(ss, cell, ',');
      p.r[a] = std::stod(cell);
    }
    std::getline(ss, cell, ',');
    p.s = std::stoi(cell) - 1;
    q.push_back(p);
  }
  return q;
}

/// Density field on its lattice: coordinates of the cell centre and one column per species.
template <int D>
void write_csv(std::ostream& os, const DensityField<D>& f) {
  static const char* axes[] = {"x", "y", "z"};
  for (int a = 0; a < D; ++a) os << axes[a] << ",";
  for (int s = 0; s < f.species; ++s) os << "rho" << s + 1 << (s + 1 < f.species ? "," : "\n");
  for (std::size_t c = 0; c < f.cells(); ++c) {
    const auto r = f.lattice.center(f.lattice.coords(c));
    for (int a = 0; a < D; ++a) os << num(r[a]) << ",";
    for (int s = 0; s < f.species; ++s) os << num(f.at(c, s)) << (s + 1 < f.species ? "," : "\n");
  }
}

inline json to_json(const ObservableRecord& r) {
  json j;
  j["samples"] = r.samples;
  j["density"] = json::array();
  j["density_error"] = json::array();
  for (const auto& b : r.density) {
    j["density"].push_back(b.mean);
    j["density_error"].push_back(b.error);
  }
  j["eta_fraction"] = r.eta_fraction;
  j["theta_fraction"] = r.theta_fraction;
  j["contours_per_sample"] = r.contours;
  json h = json::object();
  for (const auto& [n, c] : r.n_gamma) h[std::to_string(n)] = c;
  j["n_gamma_histogram"] = h;
  j["collar_violations"] = r.collar_violations;
  return j;
}

inline json to_json(const MinimizeDiagnostics& d) {
  json j;
  j["converged"] = d.converged;
  j["update"] = d.update;
  j["gradient_free"] = d.gradient_free;
  j["multiplier_sign"] = d.multiplier_sign;
  j["active_blocks"] = d.active_blocks;
  j["violation"] = d.violation;
  j["max_deviation"] = d.max_deviation;
  j["eps"] = d.eps;
  j["eps_used"] = d.eps_used;
  j["fixed_point_iterations"] = d.fixed_point_iterations;
  j["newton_iterations"] = d.newton_iterations;
  return j;
}

inline json to_json(const DecayFit& f) {
  return json{{"omega", f.omega}, {"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}, {"shells", f.shells}, {"flat", f.flat}};
}

}  // namespace kacpotts::io
