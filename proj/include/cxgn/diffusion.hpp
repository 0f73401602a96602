#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "cxgn/rng.hpp"
#include "cxgn/tensor.hpp"

namespace cxgn {

// beta/alpha_bar tables over timesteps 1..T (index 0 = t=1).
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0, beta_end = 0.0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  double beta_at(int t) const;       // t in [1, T]
  double alpha_bar_at(int t) const;  // t in [0, T]; alpha_bar(0) := 1

  nlohmann::ordered_json to_json() const;  // {T, beta_start, beta_end}; tables recomputed on load
  static NoiseSchedule from_json(const nlohmann::ordered_json& j);
};

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end);

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, per sample.
// z0/eps: (M, ...) with leading batch axis; t: per-sample timesteps in [1, T].
Tensor q_sample(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                const NoiseSchedule& schedule);

// eps_hat = eps_uncond + s * (eps_cond - eps_uncond)
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double s);

// Deterministic (eta=0) DDIM update from t to t_prev (t > t_prev >= 0).
// Same timestep pair for the whole batch.
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& schedule);

struct GuidanceConfig {
  double scale = 4.0;
};

struct SamplerConfig {
  int steps = 100;
  // Strictly decreasing subsequence of {T..1}; empty -> uniform stride including T.
  std::vector<int> timesteps;
};

// Uniform-stride decreasing subsequence of {1..T} that starts at T.
std::vector<int> ddim_timesteps(int T, int steps);

// Denoiser callback: (z_t, t, conditional?) -> eps prediction for the batch.
// Evaluated twice per step (conditional + unconditional) and combined with
// cfg_combine; z_T is drawn from rng. Fully deterministic given (rng, configs).
Tensor ddim_sample(const std::function<Tensor(const Tensor&, int, bool)>& denoise_fn,
                   const GuidanceConfig& guidance, const SamplerConfig& sampler,
                   const NoiseSchedule& schedule, SeededRng& rng, const Shape& latent_shape);

}  // namespace cxgn
