#include "cxgn/diffusion.hpp"

#include <cmath>

#include "cxgn/ops.hpp"

namespace cxgn {

double NoiseSchedule::beta_at(int t) const {
  CXGN_CHECK(t >= 1 && t <= T, "beta_at: t out of range");
  return beta[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar_at(int t) const {
  CXGN_CHECK(t >= 0 && t <= T, "alpha_bar_at: t out of range");
  if (t == 0) return 1.0;  // convention closing the final DDIM step
  return alpha_bar[static_cast<size_t>(t - 1)];
}

nlohmann::ordered_json NoiseSchedule::to_json() const {
  nlohmann::ordered_json j;
  j["T"] = T;
  j["beta_start"] = beta_start;
  j["beta_end"] = beta_end;
  return j;
}

NoiseSchedule NoiseSchedule::from_json(const nlohmann::ordered_json& j) {
  return linear_schedule(j.at("T").get<int>(), j.at("beta_start").get<double>(),
                         j.at("beta_end").get<double>());
}

NoiseSchedule linear_schedule(int T, double beta_start, double beta_end) {
  CXGN_CHECK(T >= 2, "linear_schedule: T must be >= 2");
  CXGN_CHECK(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
             "linear_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int t = 1; t <= T; ++t) {
    double b = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) /
                                static_cast<double>(T - 1);
    s.beta[static_cast<size_t>(t - 1)] = b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(t - 1)] = prod;
  }
  return s;
}

Tensor q_sample(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                const NoiseSchedule& schedule) {
  CXGN_CHECK(same_shape(z0.shape(), eps.shape()), "q_sample: z0/eps shape mismatch");
  CXGN_CHECK(!z0.shape().empty(), "q_sample: need a batch axis");
  int64_t m = z0.shape()[0];
  CXGN_CHECK(static_cast<int64_t>(t.size()) == m, "q_sample: one timestep per sample");
  int64_t per = z0.numel() / m;

  // per-sample sqrt(alpha_bar) / sqrt(1-alpha_bar) coefficient tensors;
  // broadcasting over trailing axes via (M,1,..,1) shape
  Shape coef_shape(z0.shape().size(), 1);
  coef_shape[0] = m;
  Tensor ca = Tensor::zeros(coef_shape, z0.dtype());
  Tensor ce = Tensor::zeros(coef_shape, z0.dtype());
  for (int64_t i = 0; i < m; ++i) {
    int ti = t[static_cast<size_t>(i)];
    CXGN_CHECK(ti >= 1 && ti <= schedule.T, "q_sample: t out of range");
    double ab = schedule.alpha_bar_at(ti);
    ca.set(i, std::sqrt(ab));
    ce.set(i, std::sqrt(1.0 - ab));
  }
  (void)per;
  return add(mul(ca, z0), mul(ce, eps));
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double s) {
  CXGN_CHECK(same_shape(eps_cond.shape(), eps_uncond.shape()), "cfg_combine: shape mismatch");
  return add(eps_uncond, mul_scalar(sub(eps_cond, eps_uncond), s));
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_hat,
                 const NoiseSchedule& schedule) {
  CXGN_CHECK(same_shape(z_t.shape(), eps_hat.shape()), "ddim_step: shape mismatch");
  CXGN_CHECK(t > t_prev && t_prev >= 0 && t <= schedule.T,
             "ddim_step: need T >= t > t_prev >= 0");
  double ab_t = schedule.alpha_bar_at(t);
  double ab_p = schedule.alpha_bar_at(t_prev);
  double inv_sqrt_ab_t = 1.0 / std::sqrt(ab_t);
  double sq_one_minus_t = std::sqrt(1.0 - ab_t);
  // x0 = (z_t - sqrt(1-ab_t) eps) / sqrt(ab_t)
  Tensor x0 = mul_scalar(sub(z_t, mul_scalar(eps_hat, sq_one_minus_t)), inv_sqrt_ab_t);
  // z_prev = sqrt(ab_prev) x0 + sqrt(1-ab_prev) eps
  return add(mul_scalar(x0, std::sqrt(ab_p)), mul_scalar(eps_hat, std::sqrt(1.0 - ab_p)));
}

std::vector<int> ddim_timesteps(int T, int steps) {
  CXGN_CHECK(steps >= 1 && steps <= T, "ddim_timesteps: invalid step count");
  // uniform stride over {1..T}, decreasing, always starting at T
  std::vector<int> ts(static_cast<size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    int t = T - static_cast<int>(std::llround(frac * (T - 1)));
    ts[static_cast<size_t>(i)] = t;
  }
  // strictly decreasing by construction for steps <= T; guard anyway
  for (size_t i = 1; i < ts.size(); ++i) CXGN_CHECK(ts[i] < ts[i - 1], "ddim_timesteps: not strictly decreasing");
  return ts;
}

Tensor ddim_sample(const std::function<Tensor(const Tensor&, int, bool)>& denoise_fn,
                   const GuidanceConfig& guidance, const SamplerConfig& sampler,
                   const NoiseSchedule& schedule, SeededRng& rng, const Shape& latent_shape) {
  std::vector<int> ts =
      sampler.timesteps.empty() ? ddim_timesteps(schedule.T, sampler.steps) : sampler.timesteps;
  CXGN_CHECK(!ts.empty() && ts.front() == schedule.T, "ddim_sample: subsequence must start at T");
  Tensor z = Tensor::randn(latent_shape, rng, DType::F32);
  for (size_t i = 0; i < ts.size(); ++i) {
    int t = ts[i];
    int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    Tensor eps_hat;
    if (guidance.scale == 0.0) {
      // s=0 drops the conditional branch entirely
      eps_hat = denoise_fn(z, t, false);
    } else if (guidance.scale == 1.0) {
      // s=1 reduces to the purely conditional prediction
      eps_hat = denoise_fn(z, t, true);
    } else {
      Tensor eps_cond = denoise_fn(z, t, true);
      Tensor eps_uncond = denoise_fn(z, t, false);
      eps_hat = cfg_combine(eps_cond, eps_uncond, guidance.scale);
    }
    CXGN_CHECK(same_shape(eps_hat.shape(), z.shape()), "ddim_sample: denoiser shape mismatch");
    z = ddim_step(z, t, t_prev, eps_hat, schedule);
  }
  return z;
}

}  // namespace cxgn
