#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cxgn/ops.hpp"
#include "cxgn/rng.hpp"
#include "cxgn/tensor.hpp"

namespace cxgn {

struct Parameter {
  std::string name;  // dot-separated path
  Tensor value;
  bool trainable = true;

  Tensor grad() const { return value.grad(); }
  bool has_grad() const { return value.has_grad(); }
};

class ParamSet {
 public:
  Tensor add(const std::string& name, Tensor value, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  size_t size() const { return params_.size(); }

  // Trainability also drives requires_grad, so frozen parameters never
  // accumulate gradients at all.
  void set_trainable(const std::string& prefix, bool trainable);
  void set_all_trainable(bool trainable);

  int64_t total_numel(const std::string& prefix = "") const;
  void zero_grads();
  uint64_t content_hash() const;  // over names + raw bytes, in insertion order

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, size_t> index_;
};

// Fan-in scaled Gaussian init.
Tensor init_linear_weight(int64_t in_dim, int64_t out_dim, SeededRng& rng,
                          DType dt = DType::F32);

// A dense layer: y = x @ w + b with x (..., in). Parameters are registered
// into `ps` under `name`.w / `name`.b at construction.
struct Linear {
  Linear() = default;
  Linear(ParamSet& ps, const std::string& name, int64_t in_dim, int64_t out_dim, SeededRng& rng,
         DType dt = DType::F32, bool zero_init = false);
  Tensor forward(const Tensor& x) const;

  Tensor w;  // (in, out)
  Tensor b;  // (out)
};

struct LayerNormParams {
  LayerNormParams() = default;
  LayerNormParams(ParamSet& ps, const std::string& name, int64_t dim, DType dt = DType::F32);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  Tensor gamma, beta;
};

// Max relative error between reverse-mode and central finite differences over
// sampled coordinates of every tensor in `leaves`. fn must be deterministic
// (verified by two forward passes) and should run in float64.
double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& leaves, double h,
                  int max_coords_per_leaf = 0, uint64_t sample_seed = 0);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // global norm; <= 0 disables clipping
};

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // Clips the global gradient norm, applies the decoupled-decay update to all
  // trainable parameters with gradients, then clears those gradients.
  // Throws on NaN gradients, naming the offending parameter.
  void step(ParamSet& params);

  int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  double last_grad_norm() const { return last_grad_norm_; }

  // Checkpoint support: moments keyed by parameter name.
  std::vector<std::pair<std::string, Tensor>> state_tensors() const;
  void load_state(const std::vector<std::pair<std::string, Tensor>>& tensors, int64_t step);

 private:
  struct Slot {
    Tensor m, v;
  };
  AdamWConfig cfg_;
  int64_t step_ = 0;
  double last_grad_norm_ = 0.0;
  std::unordered_map<std::string, Slot> slots_;
};

}  // namespace cxgn
