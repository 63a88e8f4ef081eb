#pragma once

#include "mfg/types.hpp"

namespace mfg {

/// Uniform grid s_k = t0 + k (T - t0) / K, k = 0..K.
struct TimeGrid {
  double t0 = 0.0;
  double T = 1.0;
  int K = 1;

  TimeGrid() = default;
  TimeGrid(double t0_, double T_, int K_) : t0(t0_), T(T_), K(K_) {
    if (!(T_ > t0_)) throw Error("TimeGrid needs t0 < T");
    if (K_ < 1) throw Error("TimeGrid needs K >= 1");
  }
  double dt() const { return (T - t0) / K; }
  double node(int k) const { return k == K ? T : t0 + k * dt(); }
};

}  // namespace mfg
