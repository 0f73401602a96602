#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cxgn/tensor.hpp"

namespace cxgn {

// Reverse-mode tape. Ops append nodes in execution order; since every node's
// inputs were created before it, reverse insertion order is a valid reverse
// topological order and backward() visits each node exactly once.
//
// A tape is single-threaded; disjoint tapes may run on different threads
// (the active tape pointer is thread_local).
class Tape {
 public:
  struct Node {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    // Consumes output->grad, accumulates into input grads via Tape::accumulate.
    std::function<void(Tape&, Node&)> backward;
    const char* op = "";
  };

  void record(Node node) { nodes_.push_back(std::move(node)); }
  size_t size() const { return nodes_.size(); }
  void clear();

  // Zeroes grads of every tensor on the tape, seeds d(loss)/d(loss)=1 and runs
  // the reverse sweep. Gradients accumulate additively into every tensor with
  // requires_grad (parameters keep theirs until the optimizer clears them).
  void backward(const Tensor& loss);

  // Adds g into impl->grad (allocating zeros first) if impl wants gradients.
  static void accumulate(const std::shared_ptr<TensorImpl>& impl, const Tensor& g);

  static Tape* active();
  static bool recording();  // active tape exists and grad mode enabled

 private:
  std::vector<Node> nodes_;
};

// RAII: makes a tape active on this thread for its scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// RAII: disables recording (inference / oracle passes).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;

 private:
  bool prev_;
};

}  // namespace cxgn
