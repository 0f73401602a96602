#include "cxgn/nn.hpp"

#include <algorithm>
#include <cmath>

#include "cxgn/tape.hpp"

namespace cxgn {

Tensor ParamSet::add(const std::string& name, Tensor value, bool trainable) {
  CXGN_CHECK(!index_.count(name), "duplicate parameter name: " + name);
  value.set_requires_grad(trainable);
  index_[name] = params_.size();
  params_.push_back(Parameter{name, value, trainable});
  return value;
}

Parameter& ParamSet::at(const std::string& name) {
  auto it = index_.find(name);
  CXGN_CHECK(it != index_.end(), "no such parameter: " + name);
  return params_[it->second];
}

const Parameter& ParamSet::at(const std::string& name) const {
  auto it = index_.find(name);
  CXGN_CHECK(it != index_.end(), "no such parameter: " + name);
  return params_[it->second];
}

void ParamSet::set_trainable(const std::string& prefix, bool trainable) {
  for (auto& p : params_) {
    if (p.name.rfind(prefix, 0) == 0) {
      p.trainable = trainable;
      p.value.set_requires_grad(trainable);
    }
  }
}

void ParamSet::set_all_trainable(bool trainable) {
  for (auto& p : params_) {
    p.trainable = trainable;
    p.value.set_requires_grad(trainable);
  }
}

int64_t ParamSet::total_numel(const std::string& prefix) const {
  int64_t n = 0;
  for (const auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) n += p.value.numel();
  return n;
}

void ParamSet::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

uint64_t ParamSet::content_hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params_) {
    h = fnv1a64(p.name, h);
    if (p.value.dtype() == DType::F32)
      h = fnv1a64(p.value.f32(), static_cast<size_t>(p.value.numel()) * 4, h);
    else
      h = fnv1a64(p.value.f64(), static_cast<size_t>(p.value.numel()) * 8, h);
  }
  return h;
}

Tensor init_linear_weight(int64_t in_dim, int64_t out_dim, SeededRng& rng, DType dt) {
  Tensor w = Tensor::randn({in_dim, out_dim}, rng, dt);
  double scale = 1.0 / std::sqrt(static_cast<double>(in_dim));
  int64_t n = w.numel();
  if (dt == DType::F32) {
    float* p = w.f32();
    for (int64_t i = 0; i < n; ++i) p[i] *= static_cast<float>(scale);
  } else {
    double* p = w.f64();
    for (int64_t i = 0; i < n; ++i) p[i] *= scale;
  }
  return w;
}

Linear::Linear(ParamSet& ps, const std::string& name, int64_t in_dim, int64_t out_dim,
               SeededRng& rng, DType dt, bool zero_init) {
  Tensor weight = zero_init ? Tensor::zeros({in_dim, out_dim}, dt)
                            : init_linear_weight(in_dim, out_dim, rng, dt);
  w = ps.add(name + ".w", weight);
  b = ps.add(name + ".b", Tensor::zeros({out_dim}, dt));
}

Tensor Linear::forward(const Tensor& x) const {
  int64_t in_dim = w.shape()[0], out_dim = w.shape()[1];
  CXGN_CHECK(x.shape().back() == in_dim, "Linear: input dim mismatch");
  if (x.rank() == 2) return add(matmul(x, w), b);
  Shape xs = x.shape();
  int64_t rows = x.numel() / in_dim;
  Tensor flat = reshape(x, {rows, in_dim});
  Tensor y = add(matmul(flat, w), b);
  Shape os = xs;
  os.back() = out_dim;
  return reshape(y, os);
}

LayerNormParams::LayerNormParams(ParamSet& ps, const std::string& name, int64_t dim, DType dt) {
  gamma = ps.add(name + ".gamma", Tensor::full({dim}, 1.0, dt));
  beta = ps.add(name + ".beta", Tensor::zeros({dim}, dt));
}

double grad_check(const std::function<Tensor()>& fn, const std::vector<Tensor>& leaves, double h,
                  int max_coords_per_leaf, uint64_t sample_seed) {
  // determinism check
  double f1, f2;
  {
    NoGradScope ng;
    f1 = fn().item();
    f2 = fn().item();
  }
  if (f1 != f2) throw Error("grad_check: fn is not deterministic");

  Tape tape;
  std::vector<Tensor> auto_grads;
  {
    TapeScope scope(tape);
    Tensor loss = fn();
    tape.backward(loss);
  }
  for (const auto& leaf : leaves) {
    auto_grads.push_back(leaf.has_grad() ? Tensor(leaf.impl()->grad).clone()
                                         : Tensor::zeros(leaf.shape(), leaf.dtype()));
  }

  SeededRng rng(sample_seed, 0x67726164);
  double max_rel = 0.0;
  NoGradScope ng;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    int64_t n = leaf.numel();
    std::vector<int64_t> coords;
    if (max_coords_per_leaf > 0 && n > max_coords_per_leaf) {
      for (int i = 0; i < max_coords_per_leaf; ++i) coords.push_back(rng.uniform_int(0, n - 1));
      std::sort(coords.begin(), coords.end());
      coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    }
    for (int64_t c : coords) {
      double orig = leaf.at(c);
      leaf.set(c, orig + h);
      double fp = fn().item();
      leaf.set(c, orig - h);
      double fm = fn().item();
      leaf.set(c, orig);
      double fd = (fp - fm) / (2.0 * h);
      double ga = auto_grads[li].at(c);
      double rel = std::abs(ga - fd) / std::max(1e-12, std::abs(ga) + std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

void AdamW::step(ParamSet& params) {
  // collect live gradients
  std::vector<Parameter*> active;
  for (auto& p : params.all()) {
    if (p.trainable && p.has_grad()) active.push_back(&p);
  }
  // NaN check + global norm
  double sq = 0.0;
  for (Parameter* p : active) {
    Tensor g(p->value.impl()->grad);
    int64_t n = g.numel();
    if (g.dtype() == DType::F32) {
      const float* pg = g.f32();
      for (int64_t i = 0; i < n; ++i) {
        if (std::isnan(pg[i])) throw Error("NaN gradient in parameter " + p->name);
        sq += static_cast<double>(pg[i]) * pg[i];
      }
    } else {
      const double* pg = g.f64();
      for (int64_t i = 0; i < n; ++i) {
        if (std::isnan(pg[i])) throw Error("NaN gradient in parameter " + p->name);
        sq += pg[i] * pg[i];
      }
    }
  }
  double norm = std::sqrt(sq);
  last_grad_norm_ = norm;
  double clip_scale = 1.0;
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) clip_scale = cfg_.clip_norm / norm;

  ++step_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));

  for (Parameter* p : active) {
    auto& slot = slots_[p->name];
    if (!slot.m.defined()) {
      slot.m = Tensor::zeros(p->value.shape(), p->value.dtype());
      slot.v = Tensor::zeros(p->value.shape(), p->value.dtype());
    }
    Tensor g(p->value.impl()->grad);
    int64_t n = g.numel();
    auto update = [&](auto* w, const auto* gr, auto* m, auto* v) {
      using T = std::remove_reference_t<decltype(w[0])>;
      T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
      T cs = static_cast<T>(clip_scale);
      T lr = static_cast<T>(cfg_.lr), wd = static_cast<T>(cfg_.weight_decay);
      T eps = static_cast<T>(cfg_.eps);
      T ibc1 = static_cast<T>(1.0 / bc1), ibc2 = static_cast<T>(1.0 / bc2);
      for (int64_t i = 0; i < n; ++i) {
        T gi = gr[i] * cs;
        m[i] = b1 * m[i] + (T(1) - b1) * gi;
        v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
        T mhat = m[i] * ibc1;
        T vhat = v[i] * ibc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
      }
    };
    if (p->value.dtype() == DType::F32)
      update(p->value.f32(), g.f32(), slot.m.f32(), slot.v.f32());
    else
      update(p->value.f64(), g.f64(), slot.m.f64(), slot.v.f64());
    p->value.zero_grad();
  }
}

std::vector<std::pair<std::string, Tensor>> AdamW::state_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  std::vector<std::string> keys;
  keys.reserve(slots_.size());
  for (const auto& [k, _] : slots_) keys.push_back(k);
  std::sort(keys.begin(), keys.end());
  for (const auto& k : keys) {
    const Slot& s = slots_.at(k);
    out.emplace_back("opt.m." + k, s.m);
    out.emplace_back("opt.v." + k, s.v);
  }
  return out;
}

void AdamW::load_state(const std::vector<std::pair<std::string, Tensor>>& tensors, int64_t step) {
  slots_.clear();
  for (const auto& [name, t] : tensors) {
    if (name.rfind("opt.m.", 0) == 0)
      slots_[name.substr(6)].m = t;
    else if (name.rfind("opt.v.", 0) == 0)
      slots_[name.substr(6)].v = t;
    else
      throw Error("AdamW::load_state: unexpected tensor " + name);
  }
  step_ = step;
}

}  // namespace cxgn
