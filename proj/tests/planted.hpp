#pragma once

// Random Theta fields with known contours: objects drawn inside disjoint slots of
// a background phase, with the expected contour data recorded while drawing.

#include <kacpotts/indicators.hpp>

#include <random>

namespace planted {

using namespace kacpotts;

struct Expected {
  CellSet<2> support{1.0};
  int color = 0;
  std::map<int, CellSet<2>> interiors;
};

struct Field {
  PhaseField<2> theta;
  int background = 1;
  std::vector<Expected> contours;  // sorted by smallest support cell
};

class Painter {
public:
  Painter(Field& f, double mesh, std::mt19937& gen) : f_(f), mesh_(mesh), gen_(gen) {}

  int uniform(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(gen_); }

  // Draws a random object inside [x0, x1) x [y0, y1), keeping a one-cell margin,
  // on top of a region of label `color`. Small slots fall back to plain blobs.
  void object(int x0, int y0, int x1, int y1, int color, int depth) {
    const int w = x1 - x0, h = y1 - y0;
    int kind = uniform(0, 3);
    if (depth > 0 && kind == 2) kind = 1;
    if (kind == 3 && w < 7) kind = 1;
    if (kind == 2 && (w < 7 || h < 7)) kind = 1;
    if (w < 5 || h < 5) kind = 0;
    Expected e;
    e.color = color;
    e.support = CellSet<2>(mesh_);
    // Rectangle for the object, bumps added on the face-neighbours afterwards.
    const int rw = kind == 0 ? uniform(1, std::min(4, w - 2)) : uniform(kind == 3 ? 5 : 3, w - 2);
    const int rh = kind == 0 ? uniform(1, std::min(4, h - 2)) : uniform(3, h - 2);
    const int rx = x0 + 1 + uniform(0, w - 2 - rw), ry = y0 + 1 + uniform(0, h - 2 - rh);
    for (int i = rx; i < rx + rw; ++i)
      for (int j = ry; j < ry + rh; ++j) e.support.insert({i, j});
    std::vector<CellSet<2>> holes;
    if (kind >= 1) {
      const int t = (rw >= 7 && rh >= 7 && kind != 2) ? uniform(1, 2) : 1;
      if (kind == 3) {
        // Two holes separated by a wall.
        const int mid = rx + rw / 2;
        CellSet<2> a(mesh_), b(mesh_);
        for (int i = rx + t; i < rx + rw - t; ++i)
          for (int j = ry + t; j < ry + rh - t; ++j) {
            if (i == mid) continue;
            (i < mid ? a : b).insert({i, j});
          }
        if (!a.empty()) holes.push_back(a);
        if (!b.empty()) holes.push_back(b);
      } else {
        CellSet<2> hole(mesh_);
        for (int i = rx + t; i < rx + rw - t; ++i)
          for (int j = ry + t; j < ry + rh - t; ++j) hole.insert({i, j});
        if (!hole.empty()) holes.push_back(hole);
      }
      for (const auto& hole : holes)
        for (const auto& x : hole) e.support.erase(x);
    }
    // Bumps on the outer faces keep the complement of the closure connected.
    const int bumps = uniform(0, 3);
    for (int n = 0; n < bumps; ++n) {
      const int side = uniform(0, 3);
      Index<2> x;
      if (side == 0 && rx - 1 > x0) x = {rx - 1, ry + uniform(0, rh - 1)};
      else if (side == 1 && rx + rw < x1 - 1) x = {rx + rw, ry + uniform(0, rh - 1)};
      else if (side == 2 && ry - 1 > y0) x = {rx + uniform(0, rw - 1), ry - 1};
      else if (side == 3 && ry + rh < y1 - 1) x = {rx + uniform(0, rw - 1), ry + rh};
      else continue;
      e.support.insert(x);
    }
    for (const auto& x : e.support) paint(x, 0);
    for (const auto& hole : holes) {
      const int label = uniform(1, f_.theta.S + 1);
      for (const auto& x : hole) paint(x, label);
      auto& slot = e.interiors[label];
      if (slot.empty()) slot = CellSet<2>(mesh_);
      slot = slot.united(hole);
      if (kind == 2) {
        // Nested object inside the hole, one cell away from its collar.
        int hx0 = 1 << 20, hy0 = 1 << 20, hx1 = -1, hy1 = -1;
        for (const auto& x : hole) {
          hx0 = std::min<int>(hx0, x[0]);
          hy0 = std::min<int>(hy0, x[1]);
          hx1 = std::max<int>(hx1, x[0] + 1);
          hy1 = std::max<int>(hy1, x[1] + 1);
        }
        if (hx1 - hx0 >= 3 && hy1 - hy0 >= 3) object(hx0, hy0, hx1, hy1, label, depth + 1);
      }
    }
    f_.contours.push_back(e);
  }

private:
  void paint(const Index<2>& x, int label) { f_.theta.at(x) = label; }
  Field& f_;
  double mesh_;
  std::mt19937& gen_;
};

inline bool smaller(const CellSet<2>& a, const CellSet<2>& b) { return *a.begin() < *b.begin(); }

// side x side Theta lattice split into four quadrant slots.
inline Field make(unsigned seed, bool periodic, int side = 28, int S = 3) {
  std::mt19937 gen(seed);
  Lattice<2> lat{1.0, {side, side}, periodic};
  Field f;
  f.background = std::uniform_int_distribution<int>(1, S + 1)(gen);
  f.theta = PhaseField<2>(lat, IndicatorKind::theta, S, f.background);
  Painter painter(f, 1.0, gen);
  const int half = side / 2;
  for (int qx = 0; qx < 2; ++qx)
    for (int qy = 0; qy < 2; ++qy) {
      if (painter.uniform(0, 4) == 0) continue;
      painter.object(qx * half, qy * half, (qx + 1) * half, (qy + 1) * half, f.background, 0);
    }
  std::sort(f.contours.begin(), f.contours.end(),
            [](const Expected& a, const Expected& b) { return smaller(a.support, b.support); });
  return f;
}

}  // namespace planted
