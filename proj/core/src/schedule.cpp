#include "mvvd/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace mvvd {

BetaInterp beta_interp_from_string(const std::string& name) {
  if (name == "linear") return BetaInterp::Linear;
  if (name == "scaled_linear") return BetaInterp::ScaledLinear;
  throw std::invalid_argument("unknown beta interpolation '" + name +
                              "' (expected 'linear' or 'scaled_linear')");
}

std::string to_string(BetaInterp interp) {
  return interp == BetaInterp::Linear ? "linear" : "scaled_linear";
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end,
                                    BetaInterp interp) {
  if (T < 2) throw std::invalid_argument("schedule: T must be >= 2");
  if (!(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");

  NoiseSchedule s;
  s.T = T;
  s.betas.resize(T);
  const double r0 = std::sqrt(beta_start), r1 = std::sqrt(beta_end);
  for (int i = 0; i < T; ++i) {
    const double u = double(i) / double(T - 1);
    if (interp == BetaInterp::Linear) {
      s.betas[i] = beta_start + u * (beta_end - beta_start);
    } else {
      const double r = r0 + u * (r1 - r0);
      s.betas[i] = r * r;
    }
  }
  // The interpolation reproduces the endpoints only up to rounding; pin them.
  s.betas.front() = beta_start;
  s.betas.back() = beta_end;

  s.alphas.resize(T);
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

}  // namespace mvvd
