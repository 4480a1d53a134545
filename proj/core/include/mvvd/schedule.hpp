#pragma once

#include <string>
#include <vector>

namespace mvvd {

// Noise schedule for the denoising diffusion chain. Everything is derived
// from betas; kept in 64-bit so the configured endpoints are representable
// exactly and the alpha_bar products stay accurate at large T.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // running product of alphas
};

// How beta interpolates between its endpoints.
enum class BetaInterp {
  Linear,        // straight line in beta
  ScaledLinear,  // straight line in sqrt(beta)
};

BetaInterp beta_interp_from_string(const std::string& name);
std::string to_string(BetaInterp interp);

// betas[i] = beta_start + i/(T-1) * (beta_end - beta_start) for Linear, the
// squared interpolation of the square roots for ScaledLinear. Both endpoints
// are stored exactly as given.
NoiseSchedule build_linear_schedule(int T, double beta_start = 0.00085,
                                    double beta_end = 0.012,
                                    BetaInterp interp = BetaInterp::Linear);

}  // namespace mvvd
