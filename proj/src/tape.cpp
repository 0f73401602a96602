#include "cxgn/tape.hpp"

#include <unordered_set>

namespace cxgn {

namespace {
thread_local Tape* t_active = nullptr;
thread_local bool t_grad_enabled = true;
}  // namespace

Tape* Tape::active() { return t_active; }
bool Tape::recording() { return t_active != nullptr && t_grad_enabled; }

void Tape::clear() { nodes_.clear(); }

void Tape::accumulate(const std::shared_ptr<TensorImpl>& impl, const Tensor& g) {
  if (!impl->requires_grad) return;
  CXGN_CHECK(same_shape(impl->shape, g.shape()), "grad shape mismatch");
  if (!impl->grad) {
    auto gi = std::make_shared<TensorImpl>();
    gi->shape = impl->shape;
    gi->dtype = impl->dtype;
    gi->storage = std::make_shared<TensorStorage>();
    if (impl->dtype == DType::F32)
      gi->storage->buf = std::vector<float>(static_cast<size_t>(g.numel()), 0.0f);
    else
      gi->storage->buf = std::vector<double>(static_cast<size_t>(g.numel()), 0.0);
    impl->grad = gi;
  }
  int64_t n = g.numel();
  if (impl->dtype == DType::F32) {
    float* dst = impl->grad->data<float>();
    const float* src = g.f32();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  } else {
    double* dst = impl->grad->data<double>();
    const double* src = g.f64();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  }
}

void Tape::backward(const Tensor& loss) {
  CXGN_CHECK(loss.numel() == 1, "backward: loss must be scalar, got " + shape_str(loss.shape()));
  bool on_tape = false;
  for (const auto& node : nodes_) {
    if (node.output.get() == loss.impl().get()) {
      on_tape = true;
      break;
    }
  }
  CXGN_CHECK(on_tape, "backward: loss tensor was not produced on this tape");

  // Reset grads of everything touched by this tape so repeated backward passes
  // are bitwise identical.
  std::unordered_set<TensorImpl*> seen;
  for (auto& node : nodes_) {
    for (auto& in : node.inputs) {
      if (seen.insert(in.get()).second) in->grad = nullptr;
    }
    if (seen.insert(node.output.get()).second) node.output->grad = nullptr;
  }

  Tensor seed = Tensor::full({1}, 1.0, loss.dtype());
  accumulate(loss.impl(), seed);

  NoGradScope no_grad;  // gradient kernels must not re-record
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = *it;
    if (!node.output->grad) continue;  // no path to the loss
    node.backward(*this, node);
  }
}

TapeScope::TapeScope(Tape& tape) : prev_(t_active) { t_active = &tape; }
TapeScope::~TapeScope() { t_active = prev_; }

NoGradScope::NoGradScope() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradScope::~NoGradScope() { t_grad_enabled = prev_; }

}  // namespace cxgn
