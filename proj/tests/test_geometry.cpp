#include <gtest/gtest.h>

#include <kacpotts/geometry.hpp>

#include <algorithm>
#include <map>
#include <numeric>
#include <random>

using namespace kacpotts;

namespace {

CellSet<2> random_set(const Lattice<2>& lat, double p, std::mt19937& gen) {
  std::bernoulli_distribution coin(p);
  CellSet<2> a(lat.mesh);
  for (std::size_t i = 0; i < lat.size(); ++i)
    if (coin(gen)) a.insert(lat.coords(i));
  return a;
}

// Union-find on the torus with explicit modular arithmetic, independent of the library's BFS.
std::vector<int> union_find_labels(const Lattice<2>& lat, const CellSet<2>& a) {
  const int nx = static_cast<int>(lat.extent[0]), ny = static_cast<int>(lat.extent[1]);
  std::vector<int> parent(nx * ny);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto in = [&](int i, int j) { return a.contains({i, j}); };
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      if (!in(i, j)) continue;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int u = ((i + di) % nx + nx) % nx, v = ((j + dj) % ny + ny) % ny;
          if (in(u, v)) parent[find(i * ny + j)] = find(u * ny + v);
        }
    }
  std::vector<int> out(nx * ny, -1);
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      if (in(i, j)) out[i * ny + j] = find(i * ny + j);
  return out;
}

}  // namespace

TEST(Geometry, CellOfCenterRoundTrip) {
  std::mt19937 gen(1);
  for (double mesh : {0.25, 1.0, 3.0, 7.5, 0.1}) {
    Lattice<2> lat{mesh, {17, 9}, true};
    for (std::size_t i = 0; i < lat.size(); ++i) {
      auto x = lat.coords(i);
      EXPECT_EQ(cell_of<2>(lat.center(x), mesh), x);
    }
  }
}

TEST(Geometry, CellOfIsHalfOpen) {
  EXPECT_EQ((cell_of<2>({1.0, 0.999999}, 1.0)), (Index<2>{1, 0}));
  EXPECT_EQ((cell_of<2>({-0.5, 0.0}, 1.0)), (Index<2>{-1, 0}));
  EXPECT_EQ((cell_of<3>({0.3, 0.6, 0.9}, 0.3)), (Index<3>{1, 2, 3}));
}

TEST(Geometry, BoxCellOfWrapsOrThrows) {
  auto torus = Box<2>::cube(10.0);
  EXPECT_EQ(torus.cell_of({10.5, -0.5}, 1.0), (Index<2>{0, 9}));
  auto finite = Box<2>::cube(10.0, BoundaryMode::external);
  EXPECT_THROW(finite.cell_of({10.5, 1.0}, 1.0), std::out_of_range);
}

TEST(Geometry, BoundaryIdentities) {
  std::mt19937 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    Lattice<2> lat{1.0, {12, 15}, true};
    auto a = random_set(lat, 0.3 + 0.02 * trial, gen);
    auto din = delta_in(a, &lat);
    auto dout = delta_out(a, &lat);
    EXPECT_TRUE(a.includes(din));
    for (const auto& x : dout) EXPECT_FALSE(a.contains(x));
    EXPECT_EQ(dout, delta_in(complement(a, lat), &lat));
  }
}

TEST(Geometry, BoundaryOfSquareInZd) {
  CellSet<2> sq(1.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) sq.insert({i, j});
  EXPECT_EQ(delta_in(sq).size(), 12u);
  EXPECT_EQ(delta_out(sq).size(), 20u);
}

TEST(Geometry, FiniteLatticeEdgeCountsAsComplement) {
  Lattice<2> lat{1.0, {5, 5}, false};
  auto all = all_cells(lat);
  EXPECT_EQ(delta_in(all, &lat).size(), 16u);
  EXPECT_TRUE(delta_out(all, &lat).empty());
}

TEST(Geometry, ComponentsMatchUnionFind) {
  std::mt19937 gen(3);
  for (int trial = 0; trial < 25; ++trial) {
    Lattice<2> lat{2.0, {11, 13}, true};
    auto a = random_set(lat, 0.15 + 0.02 * trial, gen);
    auto comps = connected_components(a, &lat);
    auto labels = union_find_labels(lat, a);
    std::map<int, std::size_t> sizes;
    for (int l : labels)
      if (l >= 0) ++sizes[l];
    ASSERT_EQ(comps.size(), sizes.size());
    std::size_t total = 0;
    for (const auto& c : comps) {
      const auto first = *c.begin();
      const int l = labels[first[0] * 13 + first[1]];
      EXPECT_EQ(c.size(), sizes[l]);
      for (const auto& x : c) EXPECT_EQ(labels[x[0] * 13 + x[1]], l);
      total += c.size();
    }
    EXPECT_EQ(total, a.size());
  }
}

TEST(Geometry, ComponentsIdempotentAndOrderFree) {
  std::mt19937 gen(4);
  Lattice<2> lat{1.0, {20, 20}, true};
  auto a = random_set(lat, 0.35, gen);
  auto comps = connected_components(a, &lat);
  for (const auto& c : comps) {
    auto again = connected_components(c, &lat);
    ASSERT_EQ(again.size(), 1u);
    EXPECT_EQ(again[0], c);
  }
  std::vector<Index<2>> cells(a.begin(), a.end());
  std::shuffle(cells.begin(), cells.end(), gen);
  CellSet<2> b(1.0);
  for (const auto& x : cells) b.insert(x);
  EXPECT_EQ(connected_components(b, &lat), comps);
}

TEST(Geometry, DiagonalTouchConnects) {
  CellSet<2> a(1.0, {{0, 0}, {1, 1}, {3, 3}});
  EXPECT_EQ(connected_components(a).size(), 2u);
  Lattice<2> torus{1.0, {4, 4}, true};
  EXPECT_EQ(connected_components(a, &torus).size(), 1u);
}

TEST(Geometry, ComponentsIn3d) {
  CellSet<3> a(1.0, {{0, 0, 0}, {1, 1, 1}, {5, 5, 5}, {5, 5, 6}});
  EXPECT_EQ(connected_components(a).size(), 2u);
}

TEST(Geometry, BlockAverageConservesMass) {
  std::mt19937 gen(5);
  std::uniform_real_distribution<double> u(0.0, 12.0);
  auto box = Box<2>::cube(12.0);
  ParticleConfig<2> q;
  std::vector<int> count(3, 0);
  for (int i = 0; i < 500; ++i) {
    Particle<2> p{{u(gen), u(gen)}, static_cast<int>(gen() % 3)};
    ++count[p.s];
    q.push_back(p);
  }
  for (double mesh : {1.0, 2.0, 3.0, 4.0}) {
    auto f = block_average(q, box, mesh, 3);
    for (int s = 0; s < 3; ++s) {
      double n = 0.0;
      for (std::size_t c = 0; c < f.cells(); ++c) n += f.at(c, s) * f.lattice.cell_volume();
      EXPECT_NEAR(n, count[s], 1e-9);
    }
    auto coarse = block_average(block_average(q, box, 1.0, 3), mesh);
    for (std::size_t i = 0; i < f.values.size(); ++i) EXPECT_NEAR(coarse.values[i], f.values[i], 1e-12);
  }
}

TEST(Geometry, BlockAverageCommutesWithSymmetries) {
  std::mt19937 gen(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Lattice<2> fine{1.0, {12, 12}, true};
  DensityField<2> f(fine, 3);
  for (double& v : f.values) v = u(gen);
  const double mesh = 3.0;
  auto base = block_average(f, mesh);

  DensityField<2> perm(fine, 3), shifted(fine, 3);
  for (std::size_t c = 0; c < fine.size(); ++c) {
    for (int s = 0; s < 3; ++s) perm.at(c, s) = f.at(c, (s + 1) % 3);
    auto x = fine.coords(c);
    auto y = fine.wrap(Index<2>{x[0] + 3, x[1] + 6});
    for (int s = 0; s < 3; ++s) shifted.at(fine.linear_unchecked(y), s) = f.at(c, s);
  }
  auto bp = block_average(perm, mesh);
  auto bs = block_average(shifted, mesh);
  for (std::size_t c = 0; c < base.cells(); ++c) {
    for (int s = 0; s < 3; ++s) EXPECT_DOUBLE_EQ(bp.at(c, s), base.at(c, (s + 1) % 3));
    auto x = base.lattice.coords(c);
    auto y = base.lattice.wrap(Index<2>{x[0] + 1, x[1] + 2});
    for (int s = 0; s < 3; ++s) EXPECT_NEAR(bs.at(base.lattice.linear_unchecked(y), s), base.at(c, s), 1e-15);
  }
}

TEST(Geometry, BlockAverageRejectsIncompatibleMesh) {
  Lattice<2> fine{1.0, {10, 10}, true};
  DensityField<2> f(fine, 2, 1.0);
  EXPECT_THROW(block_average(f, 1.5), std::invalid_argument);
  EXPECT_THROW(block_average(f, 3.0), std::invalid_argument);
}
