#pragma once

#include "mfg/model.hpp"

#include <memory>

namespace testing_support {

using mfg::Mat;
using mfg::MomentModel;
using mfg::MomentModelData;
using mfg::Vec;

inline Mat scalar(double a) { return Mat::Constant(1, 1, a); }
inline Vec vscalar(double a) { return Vec::Constant(1, a); }

/// b = v, sigma = sigma0, f = (x^2 + v^2)/2, g = G x^2/2 on [0, T].
inline MomentModelData tanh_data(double sigma0 = 0.3, double G = 0.0, double T = 1.0) {
  auto D = MomentModelData::zeros(1, 1, T);
  D.kind = "lq";
  D.b2 = scalar(1.0);
  D.s0c[0] = vscalar(sigma0);
  D.F1 = scalar(1.0);
  D.F2 = scalar(1.0);
  D.G = scalar(G);
  D.constants.lambda_v = 0.5;
  D.constants.lambda_x = 0.5;
  D.constants.lambda_g = G / 2;
  return D;
}

inline std::shared_ptr<MomentModel> make(const MomentModelData& D) { return std::make_shared<MomentModel>(D); }

}  // namespace testing_support
