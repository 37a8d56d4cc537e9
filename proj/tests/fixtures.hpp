#pragma once

#include <kacpotts/functional.hpp>
#include <kacpotts/meanfield.hpp>

#include <map>
#include <memory>
#include <random>

namespace fixture {

using namespace kacpotts;

struct Square {
  double gamma = 1.0 / 16;
  int universe = 40;  // cells per side of the periodic universe
  int side = 16;      // cells per side of Lambda
  int offset = 12;
  double beta = 1.0;
  int k = 1;
  double zeta = 0.1;
  double amplitude = 0.0;  // exterior = rho^(k) + amplitude * U(-1,1), cellwise
  unsigned seed = 1;
  int block = 1;
  double t = 1.0;
  double eps = 0.0;
};

inline const MfMinimizerSet& minimizers(double beta) {
  static std::map<double, MfMinimizerSet> cache;
  auto it = cache.find(beta);
  if (it == cache.end()) it = cache.emplace(beta, critical_lambda(beta, 3).set).first;
  return it->second;
}

inline std::shared_ptr<const DiscreteKernel<2>> kernel(double gamma) {
  static std::map<double, std::shared_ptr<const DiscreteKernel<2>>> cache;
  auto it = cache.find(gamma);
  if (it == cache.end())
    it = cache.emplace(gamma, std::make_shared<DiscreteKernel<2>>(KacKernel<2>(gamma), 1.0 / std::sqrt(gamma))).first;
  return it->second;
}

inline CellSet<2> square_cells(double mesh, int offset, int side) {
  CellSet<2> region(mesh);
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) region.insert({offset + i, offset + j});
  return region;
}

inline FunctionalProblem<2> problem(const Square& sq) {
  auto K = kernel(sq.gamma);
  const auto& mins = minimizers(sq.beta);
  Lattice<2> U{K->mesh(), {sq.universe, sq.universe}, true};
  const auto& rho = mins.ordered(sq.k);
  DensityField<2> ext = DensityField<2>::constant(U, rho);
  std::mt19937 gen(sq.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : ext.values) v = std::max(0.0, v + sq.amplitude * u(gen));
  FunctionalParams p;
  p.k = sq.k;
  p.beta = sq.beta;
  p.lambda = mins.lambda;
  p.t = sq.t;
  p.eps = sq.eps;
  p.zeta = sq.zeta;
  return FunctionalProblem<2>(K, U, square_cells(K->mesh(), sq.offset, sq.side), ext, rho, p, sq.block);
}

// A random positive field on Lambda around rho^(k), with the exterior outside.
inline DensityField<2> random_field(const FunctionalProblem<2>& prob, double amplitude, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(prob.dim());
  for (std::size_t i = 0; i < prob.n_sites(); ++i)
    for (int s = 0; s < prob.species(); ++s)
      v[i * prob.species() + s] = prob.rho_k()[s] * (1.0 + amplitude * u(gen));
  return prob.embed(v);
}

}  // namespace fixture
