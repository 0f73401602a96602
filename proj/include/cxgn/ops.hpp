#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cxgn/tape.hpp"
#include "cxgn/tensor.hpp"

namespace cxgn {

// When enabled, every op validates that its inputs are finite and throws
// otherwise (slow; meant for debugging and tests).
void set_strict_finite(bool on);
bool strict_finite();

// Elementwise with trailing-dimension broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Scalar constants (no gradient w.r.t. the constant).
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

// 2-D only; higher-rank callers reshape around it.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x, const std::vector<int>& perm);
// Half-open [start, stop) per axis; must cover every axis.
Tensor slice(const Tensor& x, const std::vector<std::pair<int64_t, int64_t>>& ranges);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdims = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor softmax(const Tensor& x);  // last axis
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);

// ids are row-major indices of shape ids_shape; output ids_shape + [embed_dim].
Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids,
                        const Shape& ids_shape);

// q: (B,H,Tq,Dh), k/v: (B,H,Tk,Dh) -> (B,H,Tq,Dh); exact, scale 1/sqrt(Dh).
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Numerically stable mean of softplus(z) - z*y over all elements (y constant).
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace cxgn
