#include "cxgn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "cxgn/parallel.hpp"

namespace cxgn {

namespace {

bool g_strict_finite = false;

template <typename T>
bool all_finite(const T* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

void check_finite(const Tensor& t, const char* op) {
  if (!g_strict_finite) return;
  bool ok = t.dtype() == DType::F32 ? all_finite(t.f32(), t.numel()) : all_finite(t.f64(), t.numel());
  if (!ok) throw Error(std::string("non-finite input to ") + op);
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw Error(std::string(op) + ": dtype mismatch");
}

Tensor wrap(const std::shared_ptr<TensorImpl>& impl) { return Tensor(impl); }

// Records the node if a tape is active and any input needs gradients.
Tensor record(const char* op, std::vector<Tensor> inputs, Tensor out,
              std::function<void(Tape&, Tape::Node&)> backward) {
  if (Tape::recording()) {
    bool any = false;
    for (const auto& t : inputs)
      if (t.impl()->requires_grad) {
        any = true;
        break;
      }
    if (any) {
      out.set_requires_grad(true);
      Tape::Node node;
      node.inputs.reserve(inputs.size());
      for (auto& t : inputs) node.inputs.push_back(t.impl());
      node.output = out.impl();
      node.backward = std::move(backward);
      node.op = op;
      Tape::active()->record(std::move(node));
    }
  }
  return out;
}

Tensor grad_of(const Tape::Node& node) { return Tensor(node.output->grad); }

// ---- broadcasting helpers ----

// Sums g over broadcast dimensions so the result has `target` shape.
template <typename T>
Tensor reduce_to_shape_t(const Tensor& g, const Shape& target) {
  if (same_shape(g.shape(), target)) return g;
  Tensor out = Tensor::zeros(target, g.dtype());
  const Shape& gs = g.shape();
  auto gstr = row_major_strides(gs);
  auto tstr = row_major_strides(target);
  int gr = static_cast<int>(gs.size());
  int tr = static_cast<int>(target.size());
  const T* src = g.data<T>();
  T* dst = out.data<T>();
  int64_t n = g.numel();
  std::vector<int64_t> idx(gr);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat;
    int64_t toff = 0;
    for (int d = 0; d < gr; ++d) {
      idx[d] = rem / gstr[d];
      rem %= gstr[d];
      int td = d - (gr - tr);
      if (td >= 0) {
        int64_t ti = target[td] == 1 ? 0 : idx[d];
        toff += ti * tstr[td];
      }
    }
    dst[toff] += src[flat];
  }
  return out;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
  return CXGN_DISPATCH_DT(g.dtype(), reduce_to_shape_t<float>(g, target),
                          reduce_to_shape_t<double>(g, target));
}

enum class BinOp { Add, Sub, Mul };

template <typename T>
void binop_same_shape(BinOp op, const T* a, const T* b, T* c, int64_t n) {
  switch (op) {
    case BinOp::Add:
      parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) c[i] = a[i] + b[i];
      });
      break;
    case BinOp::Sub:
      parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) c[i] = a[i] - b[i];
      });
      break;
    case BinOp::Mul:
      parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) c[i] = a[i] * b[i];
      });
      break;
  }
}

template <typename T>
inline T apply_bin(BinOp op, T a, T b) {
  switch (op) {
    case BinOp::Add: return a + b;
    case BinOp::Sub: return a - b;
    default: return a * b;
  }
}

// Generic strided broadcast loop.
template <typename T>
void binop_broadcast(BinOp op, const Tensor& a, const Tensor& b, Tensor& out) {
  const Shape& os = out.shape();
  int r = static_cast<int>(os.size());
  auto ostr = row_major_strides(os);
  // Effective strides with 0 on broadcast axes, aligned to the output rank.
  auto eff = [&](const Tensor& t) {
    std::vector<int64_t> st(r, 0);
    const Shape& s = t.shape();
    auto tst = row_major_strides(s);
    int off = r - static_cast<int>(s.size());
    for (int d = 0; d < static_cast<int>(s.size()); ++d)
      st[off + d] = s[d] == 1 ? 0 : tst[d];
    return st;
  };
  auto astr = eff(a);
  auto bstr = eff(b);
  const T* pa = a.data<T>();
  const T* pb = b.data<T>();
  T* pc = out.data<T>();
  int64_t n = out.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat, ao = 0, bo = 0;
    for (int d = 0; d < r; ++d) {
      int64_t id = rem / ostr[d];
      rem %= ostr[d];
      ao += id * astr[d];
      bo += id * bstr[d];
    }
    pc[flat] = apply_bin(op, pa[ao], pb[bo]);
  }
}

template <typename T>
Tensor binop_t(BinOp op, const Tensor& a, const Tensor& b) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(os, a.dtype());
  if (same_shape(a.shape(), b.shape())) {
    binop_same_shape(op, a.data<T>(), b.data<T>(), out.data<T>(), out.numel());
  } else {
    binop_broadcast<T>(op, a, b, out);
  }
  return out;
}

Tensor binop(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, name);
  check_finite(a, name);
  check_finite(b, name);
  Tensor out = CXGN_DISPATCH_DT(a.dtype(), binop_t<float>(op, a, b), binop_t<double>(op, a, b));
  auto ash = a.shape(), bsh = b.shape();
  return record(name, {a, b}, out, [op, ash, bsh](Tape& tape, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor a_in = wrap(node.inputs[0]);
    Tensor b_in = wrap(node.inputs[1]);
    switch (op) {
      case BinOp::Add:
        Tape::accumulate(node.inputs[0], reduce_to_shape(g, ash));
        Tape::accumulate(node.inputs[1], reduce_to_shape(g, bsh));
        break;
      case BinOp::Sub:
        Tape::accumulate(node.inputs[0], reduce_to_shape(g, ash));
        Tape::accumulate(node.inputs[1], reduce_to_shape(mul_scalar(g, -1.0), bsh));
        break;
      case BinOp::Mul:
        Tape::accumulate(node.inputs[0], reduce_to_shape(mul(g, b_in.detach()), ash));
        Tape::accumulate(node.inputs[1], reduce_to_shape(mul(g, a_in.detach()), bsh));
        break;
    }
  });
}

// ---- unary helpers ----

template <typename T, class F>
Tensor unary_t(const Tensor& x, F f) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  const T* src = x.data<T>();
  T* dst = out.data<T>();
  int64_t n = x.numel();
  parallel_for(n, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) dst[i] = f(src[i]);
  });
  return out;
}

// dx = g * dfdx(x, y)
template <typename T, class D>
Tensor unary_grad_t(const Tensor& g, const Tensor& x, const Tensor& y, D dfdx) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  const T* pg = g.data<T>();
  const T* px = x.data<T>();
  const T* py = y.data<T>();
  T* dst = out.data<T>();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] = pg[i] * dfdx(px[i], py[i]);
  return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

void set_strict_finite(bool on) { g_strict_finite = on; }
bool strict_finite() { return g_strict_finite; }

Tensor add(const Tensor& a, const Tensor& b) { return binop("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binop("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binop("mul", BinOp::Mul, a, b); }

Tensor add_scalar(const Tensor& a, double c) {
  check_finite(a, "add_scalar");
  Tensor out = CXGN_DISPATCH_DT(
      a.dtype(), unary_t<float>(a, [c](float v) { return v + static_cast<float>(c); }),
      unary_t<double>(a, [c](double v) { return v + c; }));
  return record("add_scalar", {a}, out, [](Tape&, Tape::Node& node) {
    Tape::accumulate(node.inputs[0], grad_of(node));
  });
}

Tensor mul_scalar(const Tensor& a, double c) {
  check_finite(a, "mul_scalar");
  Tensor out = CXGN_DISPATCH_DT(
      a.dtype(), unary_t<float>(a, [c](float v) { return v * static_cast<float>(c); }),
      unary_t<double>(a, [c](double v) { return v * c; }));
  return record("mul_scalar", {a}, out, [c](Tape&, Tape::Node& node) {
    Tape::accumulate(node.inputs[0], mul_scalar(grad_of(node), c));
  });
}

// ---- matmul ----

namespace {

template <typename T>
void matmul_kernel(const T* __restrict a, const T* __restrict b, T* __restrict c, int64_t m,
                   int64_t k, int64_t n) {
  parallel_for(m, [&](int64_t r0, int64_t r1) {
    for (int64_t i = r0; i < r1; ++i) {
      T* __restrict ci = c + i * n;
      const T* __restrict ai = a + i * k;
      std::fill_n(ci, n, T(0));
      for (int64_t kk = 0; kk < k; ++kk) {
        T av = ai[kk];
        const T* __restrict bk = b + kk * n;
        for (int64_t j = 0; j < n; ++j) ci[j] += av * bk[j];
      }
    }
  });
}

template <typename T>
Tensor transpose2d_t(const Tensor& x) {
  int64_t m = x.shape()[0], n = x.shape()[1];
  Tensor out = Tensor::zeros({n, m}, x.dtype());
  const T* src = x.data<T>();
  T* dst = out.data<T>();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  return out;
}

Tensor transpose2d(const Tensor& x) {
  return CXGN_DISPATCH_DT(x.dtype(), transpose2d_t<float>(x), transpose2d_t<double>(x));
}

Tensor matmul_raw(const Tensor& a, const Tensor& b) {
  int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  if (a.dtype() == DType::F32)
    matmul_kernel(a.f32(), b.f32(), out.f32(), m, k, n);
  else
    matmul_kernel(a.f64(), b.f64(), out.f64(), m, k, n);
  return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_same_dtype(a, b, "matmul");
  CXGN_CHECK(a.rank() == 2 && b.rank() == 2, "matmul expects 2-D operands");
  CXGN_CHECK(a.shape()[1] == b.shape()[0],
             "matmul inner dims differ: " + shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  check_finite(a, "matmul");
  check_finite(b, "matmul");
  Tensor out = matmul_raw(a, b);
  return record("matmul", {a, b}, out, [](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor a_in = wrap(node.inputs[0]).detach();
    Tensor b_in = wrap(node.inputs[1]).detach();
    // dA = g @ B^T, dB = A^T @ g
    Tape::accumulate(node.inputs[0], matmul_raw(g, transpose2d(b_in)));
    Tape::accumulate(node.inputs[1], matmul_raw(transpose2d(a_in), g));
  });
}

// ---- shape ops ----

Tensor reshape(const Tensor& x, const Shape& shape) {
  Tensor out = x.reshaped(shape);
  Shape in_shape = x.shape();
  return record("reshape", {x}, out, [in_shape](Tape&, Tape::Node& node) {
    Tape::accumulate(node.inputs[0], grad_of(node).reshaped(in_shape));
  });
}

namespace {

template <typename T>
Tensor transpose_t(const Tensor& x, const std::vector<int>& perm) {
  const Shape& xs = x.shape();
  int r = static_cast<int>(xs.size());
  Shape os(r);
  for (int d = 0; d < r; ++d) os[d] = xs[perm[d]];
  Tensor out = Tensor::zeros(os, x.dtype());
  auto xstr = row_major_strides(xs);
  auto ostr = row_major_strides(os);
  // stride of output dim d in the input
  std::vector<int64_t> map(r);
  for (int d = 0; d < r; ++d) map[d] = xstr[perm[d]];
  const T* src = x.data<T>();
  T* dst = out.data<T>();
  int64_t n = x.numel();
  parallel_for(n, [&](int64_t f0, int64_t f1) {
    for (int64_t flat = f0; flat < f1; ++flat) {
      int64_t rem = flat, xo = 0;
      for (int d = 0; d < r; ++d) {
        int64_t id = rem / ostr[d];
        rem %= ostr[d];
        xo += id * map[d];
      }
      dst[flat] = src[xo];
    }
  });
  return out;
}

}  // namespace

Tensor transpose(const Tensor& x, const std::vector<int>& perm) {
  int r = x.rank();
  CXGN_CHECK(static_cast<int>(perm.size()) == r, "transpose: perm rank mismatch");
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    CXGN_CHECK(p >= 0 && p < r && !seen[p], "transpose: invalid permutation");
    seen[p] = true;
  }
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), transpose_t<float>(x, perm), transpose_t<double>(x, perm));
  return record("transpose", {x}, out, [perm](Tape&, Tape::Node& node) {
    std::vector<int> inv(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) inv[perm[d]] = static_cast<int>(d);
    Tape::accumulate(node.inputs[0], transpose(grad_of(node), inv));
  });
}

namespace {

template <typename T>
void slice_copy(const Tensor& x, const std::vector<std::pair<int64_t, int64_t>>& ranges,
                Tensor& out) {
  const Shape& xs = x.shape();
  const Shape& os = out.shape();
  auto xstr = row_major_strides(xs);
  auto ostr = row_major_strides(os);
  int r = static_cast<int>(xs.size());
  int64_t n = out.numel();
  T* po = out.data<T>();
  const T* px = x.data<T>();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat, xo = 0;
    for (int d = 0; d < r; ++d) {
      int64_t id = rem / ostr[d];
      rem %= ostr[d];
      xo += (id + ranges[d].first) * xstr[d];
    }
    po[flat] = px[xo];
  }
}

}  // namespace

Tensor slice(const Tensor& x, const std::vector<std::pair<int64_t, int64_t>>& ranges) {
  int r = x.rank();
  CXGN_CHECK(static_cast<int>(ranges.size()) == r, "slice: need a range per axis");
  Shape os(r);
  for (int d = 0; d < r; ++d) {
    auto [lo, hi] = ranges[d];
    CXGN_CHECK(lo >= 0 && lo < hi && hi <= x.shape()[d], "slice: range out of bounds");
    os[d] = hi - lo;
  }
  Tensor out = Tensor::zeros(os, x.dtype());
  if (x.dtype() == DType::F32)
    slice_copy<float>(x, ranges, out);
  else
    slice_copy<double>(x, ranges, out);
  Shape in_shape = x.shape();
  return record("slice", {x}, out, [ranges, in_shape](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor full = Tensor::zeros(in_shape, g.dtype());
    // scatter g into the window
    auto fstr = row_major_strides(in_shape);
    auto gstr = row_major_strides(g.shape());
    int r = static_cast<int>(in_shape.size());
    int64_t n = g.numel();
    auto scatter = [&](auto* dst, const auto* src) {
      for (int64_t flat = 0; flat < n; ++flat) {
        int64_t rem = flat, fo = 0;
        for (int d = 0; d < r; ++d) {
          int64_t id = rem / gstr[d];
          rem %= gstr[d];
          fo += (id + ranges[d].first) * fstr[d];
        }
        dst[fo] = src[flat];
      }
    };
    if (g.dtype() == DType::F32)
      scatter(full.f32(), g.f32());
    else
      scatter(full.f64(), g.f64());
    Tape::accumulate(node.inputs[0], full);
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  CXGN_CHECK(!parts.empty(), "concat: no inputs");
  int r = parts[0].rank();
  if (axis < 0) axis += r;
  CXGN_CHECK(axis >= 0 && axis < r, "concat: bad axis");
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    CXGN_CHECK(p.rank() == r, "concat: rank mismatch");
    check_same_dtype(parts[0], p, "concat");
    for (int d = 0; d < r; ++d)
      if (d != axis) CXGN_CHECK(p.shape()[d] == os[d], "concat: shape mismatch off-axis");
    total += p.shape()[axis];
  }
  os[axis] = total;
  Tensor out = Tensor::zeros(os, parts[0].dtype());

  // views as (outer, axis_len, inner)
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= os[d];
  for (int d = axis + 1; d < r; ++d) inner *= os[d];
  auto copy_block = [&](auto* dst, const auto* src, int64_t axis_len, int64_t axis_off) {
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(dst + (o * total + axis_off) * inner, src + o * axis_len * inner,
                  sizeof(*dst) * static_cast<size_t>(axis_len * inner));
    }
  };
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t len = p.shape()[axis];
    if (out.dtype() == DType::F32)
      copy_block(out.f32(), p.f32(), len, off);
    else
      copy_block(out.f64(), p.f64(), len, off);
    off += len;
  }

  std::vector<Tensor> ins = parts;
  return record("concat", ins, out, [axis](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    int64_t off = 0;
    for (auto& in : node.inputs) {
      int r = static_cast<int>(in->shape.size());
      std::vector<std::pair<int64_t, int64_t>> ranges(r);
      for (int d = 0; d < r; ++d) {
        if (d == axis)
          ranges[d] = {off, off + in->shape[d]};
        else
          ranges[d] = {0, in->shape[d]};
      }
      Tape::accumulate(in, slice(g, ranges));
      off += in->shape[axis];
    }
  });
}

// ---- reductions ----

namespace {

std::vector<int> normalize_axes(const std::vector<int>& axes, int rank) {
  std::vector<int> out;
  for (int a : axes) {
    int v = a < 0 ? a + rank : a;
    CXGN_CHECK(v >= 0 && v < rank, "reduction axis out of range");
    out.push_back(v);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

template <typename T>
Tensor reduce_sum_t(const Tensor& x, const std::vector<int>& axes, bool keepdims, int64_t* count) {
  const Shape& xs = x.shape();
  int r = static_cast<int>(xs.size());
  std::vector<bool> reduced(r, false);
  for (int a : axes) reduced[a] = true;
  Shape kept;  // keepdims shape
  int64_t c = 1;
  for (int d = 0; d < r; ++d) {
    kept.push_back(reduced[d] ? 1 : xs[d]);
    if (reduced[d]) c *= xs[d];
  }
  *count = c;
  Tensor out = Tensor::zeros(kept, x.dtype());
  auto xstr = row_major_strides(xs);
  auto kstr = row_major_strides(kept);
  const T* src = x.data<T>();
  T* dst = out.data<T>();
  int64_t n = x.numel();
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat, oo = 0;
    for (int d = 0; d < r; ++d) {
      int64_t id = rem / xstr[d];
      rem %= xstr[d];
      oo += (reduced[d] ? 0 : id) * kstr[d];
    }
    dst[oo] += src[flat];
  }
  if (!keepdims) {
    Shape sq;
    for (int d = 0; d < r; ++d)
      if (!reduced[d]) sq.push_back(xs[d]);
    if (sq.empty()) sq.push_back(1);
    out = out.reshaped(sq);
  }
  return out;
}

// Broadcast gradient of a reduction back to the input shape, scaled.
template <typename T>
Tensor spread_grad_t(const Tensor& g, const Shape& in_shape, const std::vector<int>& axes,
                     double scale) {
  int r = static_cast<int>(in_shape.size());
  std::vector<bool> reduced(r, false);
  for (int a : axes) reduced[a] = true;
  Shape kept(r);
  for (int d = 0; d < r; ++d) kept[d] = reduced[d] ? 1 : in_shape[d];
  Tensor gk = g.reshaped(kept);
  Tensor out = Tensor::zeros(in_shape, g.dtype());
  auto istr = row_major_strides(in_shape);
  auto kstr = row_major_strides(kept);
  const T* src = gk.data<T>();
  T* dst = out.data<T>();
  int64_t n = out.numel();
  T s = static_cast<T>(scale);
  for (int64_t flat = 0; flat < n; ++flat) {
    int64_t rem = flat, ko = 0;
    for (int d = 0; d < r; ++d) {
      int64_t id = rem / istr[d];
      rem %= istr[d];
      ko += (reduced[d] ? 0 : id) * kstr[d];
    }
    dst[flat] = src[ko] * s;
  }
  return out;
}

Tensor reduce_impl(const char* name, const Tensor& x, const std::vector<int>& axes_in,
                   bool keepdims, bool is_mean) {
  check_finite(x, name);
  auto axes = normalize_axes(axes_in, x.rank());
  CXGN_CHECK(!axes.empty(), "reduction needs at least one axis");
  int64_t count = 1;
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), reduce_sum_t<float>(x, axes, keepdims, &count),
                                reduce_sum_t<double>(x, axes, keepdims, &count));
  if (is_mean) out = CXGN_DISPATCH_DT(
      x.dtype(),
      unary_t<float>(out, [count](float v) { return v / static_cast<float>(count); }),
      unary_t<double>(out, [count](double v) { return v / static_cast<double>(count); }));
  Shape in_shape = x.shape();
  double scale = is_mean ? 1.0 / static_cast<double>(count) : 1.0;
  return record(name, {x}, out, [in_shape, axes, scale](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor gs = CXGN_DISPATCH_DT(g.dtype(), spread_grad_t<float>(g, in_shape, axes, scale),
                                 spread_grad_t<double>(g, in_shape, axes, scale));
    Tape::accumulate(node.inputs[0], gs);
  });
}

}  // namespace

Tensor sum(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl("sum", x, axes, keepdims, false);
}

Tensor mean(const Tensor& x, const std::vector<int>& axes, bool keepdims) {
  return reduce_impl("mean", x, axes, keepdims, true);
}

Tensor sum_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  return reduce_impl("sum", x, axes, false, false);
}

Tensor mean_all(const Tensor& x) {
  std::vector<int> axes(x.rank());
  for (int d = 0; d < x.rank(); ++d) axes[d] = d;
  return reduce_impl("mean", x, axes, false, true);
}

// ---- softmax / layer_norm ----

namespace {

template <typename T>
Tensor softmax_t(const Tensor& x) {
  const Shape& xs = x.shape();
  int64_t d = xs.back();
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(xs, x.dtype());
  const T* src = x.data<T>();
  T* dst = out.data<T>();
  parallel_for(rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const T* xi = src + r * d;
      T* yi = dst + r * d;
      T mx = xi[0];
      for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
      T s = T(0);
      for (int64_t j = 0; j < d; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        s += yi[j];
      }
      T inv = T(1) / s;
      for (int64_t j = 0; j < d; ++j) yi[j] *= inv;
    }
  });
  return out;
}

template <typename T>
Tensor softmax_grad_t(const Tensor& g, const Tensor& y) {
  int64_t d = y.shape().back();
  int64_t rows = y.numel() / d;
  Tensor out = Tensor::zeros(y.shape(), y.dtype());
  const T* pg = g.data<T>();
  const T* py = y.data<T>();
  T* dst = out.data<T>();
  for (int64_t r = 0; r < rows; ++r) {
    const T* gi = pg + r * d;
    const T* yi = py + r * d;
    T* di = dst + r * d;
    T dot = T(0);
    for (int64_t j = 0; j < d; ++j) dot += gi[j] * yi[j];
    for (int64_t j = 0; j < d; ++j) di[j] = yi[j] * (gi[j] - dot);
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x) {
  check_finite(x, "softmax");
  CXGN_CHECK(x.rank() >= 1, "softmax needs rank >= 1");
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), softmax_t<float>(x), softmax_t<double>(x));
  Tensor saved = out.detach();
  return record("softmax", {x}, out, [saved](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), softmax_grad_t<float>(g, saved),
                                 softmax_grad_t<double>(g, saved));
    Tape::accumulate(node.inputs[0], gx);
  });
}

namespace {

template <typename T>
void layer_norm_fwd(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                    Tensor& out, Tensor& mean_save, Tensor& rstd_save) {
  int64_t d = x.shape().back();
  int64_t rows = x.numel() / d;
  const T* src = x.data<T>();
  const T* pg = gamma.data<T>();
  const T* pb = beta.data<T>();
  T* dst = out.data<T>();
  T* pm = mean_save.data<T>();
  T* pr = rstd_save.data<T>();
  parallel_for(rows, [&](int64_t r0, int64_t r1) {
    for (int64_t r = r0; r < r1; ++r) {
      const T* xi = src + r * d;
      T* yi = dst + r * d;
      T mu = T(0);
      for (int64_t j = 0; j < d; ++j) mu += xi[j];
      mu /= static_cast<T>(d);
      T var = T(0);
      for (int64_t j = 0; j < d; ++j) {
        T c = xi[j] - mu;
        var += c * c;
      }
      var /= static_cast<T>(d);
      T rstd = T(1) / std::sqrt(var + static_cast<T>(eps));
      pm[r] = mu;
      pr[r] = rstd;
      for (int64_t j = 0; j < d; ++j) yi[j] = (xi[j] - mu) * rstd * pg[j] + pb[j];
    }
  });
}

template <typename T>
void layer_norm_bwd(const Tensor& g, const Tensor& x, const Tensor& gamma, const Tensor& mean_s,
                    const Tensor& rstd_s, Tensor& dx, Tensor& dgamma, Tensor& dbeta) {
  int64_t d = x.shape().back();
  int64_t rows = x.numel() / d;
  const T* pgout = g.data<T>();
  const T* px = x.data<T>();
  const T* pgam = gamma.data<T>();
  const T* pm = mean_s.data<T>();
  const T* pr = rstd_s.data<T>();
  T* pdx = dx.data<T>();
  T* pdg = dgamma.data<T>();
  T* pdb = dbeta.data<T>();
  for (int64_t r = 0; r < rows; ++r) {
    const T* gi = pgout + r * d;
    const T* xi = px + r * d;
    T* di = pdx + r * d;
    T mu = pm[r], rstd = pr[r];
    T sum_gg = T(0), sum_ggx = T(0);
    for (int64_t j = 0; j < d; ++j) {
      T xhat = (xi[j] - mu) * rstd;
      T gg = gi[j] * pgam[j];
      sum_gg += gg;
      sum_ggx += gg * xhat;
      pdg[j] += gi[j] * xhat;
      pdb[j] += gi[j];
    }
    T inv_d = T(1) / static_cast<T>(d);
    for (int64_t j = 0; j < d; ++j) {
      T xhat = (xi[j] - mu) * rstd;
      T gg = gi[j] * pgam[j];
      di[j] = rstd * (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx);
    }
  }
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_same_dtype(x, gamma, "layer_norm");
  check_same_dtype(x, beta, "layer_norm");
  int64_t d = x.shape().back();
  CXGN_CHECK(gamma.numel() == d && beta.numel() == d, "layer_norm: scale/shift must match last axis");
  check_finite(x, "layer_norm");
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  Tensor mean_s = Tensor::zeros({rows}, x.dtype());
  Tensor rstd_s = Tensor::zeros({rows}, x.dtype());
  if (x.dtype() == DType::F32)
    layer_norm_fwd<float>(x, gamma, beta, eps, out, mean_s, rstd_s);
  else
    layer_norm_fwd<double>(x, gamma, beta, eps, out, mean_s, rstd_s);
  return record("layer_norm", {x, gamma, beta}, out, [mean_s, rstd_s](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor x_in = wrap(node.inputs[0]).detach();
    Tensor gamma_in = wrap(node.inputs[1]).detach();
    Tensor dx = Tensor::zeros(x_in.shape(), x_in.dtype());
    Tensor dgamma = Tensor::zeros(gamma_in.shape(), x_in.dtype());
    Tensor dbeta = Tensor::zeros(gamma_in.shape(), x_in.dtype());
    if (x_in.dtype() == DType::F32)
      layer_norm_bwd<float>(g, x_in, gamma_in, mean_s, rstd_s, dx, dgamma, dbeta);
    else
      layer_norm_bwd<double>(g, x_in, gamma_in, mean_s, rstd_s, dx, dgamma, dbeta);
    Tape::accumulate(node.inputs[0], dx);
    Tape::accumulate(node.inputs[1], dgamma);
    Tape::accumulate(node.inputs[2], dbeta.reshaped(node.inputs[2]->shape));
  });
}

// ---- pointwise nonlinearities ----

Tensor gelu(const Tensor& x) {
  check_finite(x, "gelu");
  auto fwd = [](auto v) {
    using T = decltype(v);
    double xd = static_cast<double>(v);
    return static_cast<T>(xd * 0.5 * (1.0 + std::erf(xd * kInvSqrt2)));
  };
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), unary_t<float>(x, fwd), unary_t<double>(x, fwd));
  return record("gelu", {x}, out, [](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor x_in = wrap(node.inputs[0]).detach();
    auto dfdx = [](auto xv, auto) {
      double xd = static_cast<double>(xv);
      double phi = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
      return static_cast<decltype(xv)>(phi + xd * pdf);
    };
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), unary_grad_t<float>(g, x_in, x_in, dfdx),
                                 unary_grad_t<double>(g, x_in, x_in, dfdx));
    Tape::accumulate(node.inputs[0], gx);
  });
}

Tensor sigmoid(const Tensor& x) {
  check_finite(x, "sigmoid");
  auto fwd = [](auto v) {
    using T = decltype(v);
    double xd = static_cast<double>(v);
    return static_cast<T>(1.0 / (1.0 + std::exp(-xd)));
  };
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), unary_t<float>(x, fwd), unary_t<double>(x, fwd));
  Tensor saved = out.detach();
  return record("sigmoid", {x}, out, [saved](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    auto dfdx = [](auto, auto yv) { return yv * (decltype(yv)(1) - yv); };
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), unary_grad_t<float>(g, saved, saved, dfdx),
                                 unary_grad_t<double>(g, saved, saved, dfdx));
    Tape::accumulate(node.inputs[0], gx);
  });
}

Tensor exp(const Tensor& x) {
  check_finite(x, "exp");
  auto fwd = [](auto v) { return static_cast<decltype(v)>(std::exp(static_cast<double>(v))); };
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), unary_t<float>(x, fwd), unary_t<double>(x, fwd));
  Tensor saved = out.detach();
  return record("exp", {x}, out, [saved](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    auto dfdx = [](auto, auto yv) { return yv; };
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), unary_grad_t<float>(g, saved, saved, dfdx),
                                 unary_grad_t<double>(g, saved, saved, dfdx));
    Tape::accumulate(node.inputs[0], gx);
  });
}

Tensor log(const Tensor& x) {
  check_finite(x, "log");
  auto fwd = [](auto v) { return static_cast<decltype(v)>(std::log(static_cast<double>(v))); };
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), unary_t<float>(x, fwd), unary_t<double>(x, fwd));
  return record("log", {x}, out, [](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor x_in = wrap(node.inputs[0]).detach();
    auto dfdx = [](auto xv, auto) { return decltype(xv)(1) / xv; };
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), unary_grad_t<float>(g, x_in, x_in, dfdx),
                                 unary_grad_t<double>(g, x_in, x_in, dfdx));
    Tape::accumulate(node.inputs[0], gx);
  });
}

Tensor softplus(const Tensor& x) {
  check_finite(x, "softplus");
  auto fwd = [](auto v) {
    using T = decltype(v);
    double xd = static_cast<double>(v);
    // log(1+e^x) = max(x,0) + log1p(exp(-|x|))
    return static_cast<T>(std::max(xd, 0.0) + std::log1p(std::exp(-std::abs(xd))));
  };
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), unary_t<float>(x, fwd), unary_t<double>(x, fwd));
  return record("softplus", {x}, out, [](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor x_in = wrap(node.inputs[0]).detach();
    auto dfdx = [](auto xv, auto) {
      double xd = static_cast<double>(xv);
      return static_cast<decltype(xv)>(1.0 / (1.0 + std::exp(-xd)));
    };
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), unary_grad_t<float>(g, x_in, x_in, dfdx),
                                 unary_grad_t<double>(g, x_in, x_in, dfdx));
    Tape::accumulate(node.inputs[0], gx);
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  CXGN_CHECK(lo <= hi, "clamp: lo > hi");
  check_finite(x, "clamp");
  auto fwd = [lo, hi](auto v) {
    using T = decltype(v);
    return std::min(std::max(v, static_cast<T>(lo)), static_cast<T>(hi));
  };
  Tensor out = CXGN_DISPATCH_DT(x.dtype(), unary_t<float>(x, fwd), unary_t<double>(x, fwd));
  return record("clamp", {x}, out, [lo, hi](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor x_in = wrap(node.inputs[0]).detach();
    auto dfdx = [lo, hi](auto xv, auto) {
      using T = decltype(xv);
      return (xv >= static_cast<T>(lo) && xv <= static_cast<T>(hi)) ? T(1) : T(0);
    };
    Tensor gx = CXGN_DISPATCH_DT(g.dtype(), unary_grad_t<float>(g, x_in, x_in, dfdx),
                                 unary_grad_t<double>(g, x_in, x_in, dfdx));
    Tape::accumulate(node.inputs[0], gx);
  });
}

// ---- embedding ----

Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids,
                        const Shape& ids_shape) {
  CXGN_CHECK(table.rank() == 2, "embedding_lookup: table must be (vocab, dim)");
  CXGN_CHECK(static_cast<int64_t>(ids.size()) == shape_numel(ids_shape),
             "embedding_lookup: ids/shape mismatch");
  int64_t vocab = table.shape()[0], dim = table.shape()[1];
  for (int32_t id : ids)
    if (id < 0 || id >= vocab) throw Error("embedding_lookup: id out of vocabulary");
  Shape os = ids_shape;
  os.push_back(dim);
  Tensor out = Tensor::zeros(os, table.dtype());
  int64_t n = static_cast<int64_t>(ids.size());
  auto gather = [&](auto* dst, const auto* src) {
    for (int64_t i = 0; i < n; ++i)
      std::memcpy(dst + i * dim, src + ids[i] * dim, sizeof(*dst) * static_cast<size_t>(dim));
  };
  if (table.dtype() == DType::F32)
    gather(out.f32(), table.f32());
  else
    gather(out.f64(), table.f64());
  return record("embedding_lookup", {table}, out, [ids, dim](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor dt = Tensor::zeros(node.inputs[0]->shape, g.dtype());
    int64_t n = static_cast<int64_t>(ids.size());
    auto scatter = [&](auto* dst, const auto* src) {
      for (int64_t i = 0; i < n; ++i) {
        auto* row = dst + ids[i] * dim;
        const auto* grow = src + i * dim;
        for (int64_t j = 0; j < dim; ++j) row[j] += grow[j];
      }
    };
    if (g.dtype() == DType::F32)
      scatter(dt.f32(), g.f32());
    else
      scatter(dt.f64(), g.f64());
    Tape::accumulate(node.inputs[0], dt);
  });
}

// ---- attention ----

namespace {

template <typename T>
void sdpa_fwd(const Tensor& q, const Tensor& k, const Tensor& v, Tensor& probs, Tensor& out) {
  int64_t b = q.shape()[0], h = q.shape()[1], tq = q.shape()[2], dh = q.shape()[3];
  int64_t tk = k.shape()[2];
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T* pq = q.data<T>();
  const T* pk = k.data<T>();
  const T* pv = v.data<T>();
  T* pp = probs.data<T>();
  T* po = out.data<T>();
  parallel_for(b * h, [&](int64_t g0, int64_t g1) {
    for (int64_t g = g0; g < g1; ++g) {
      const T* qg = pq + g * tq * dh;
      const T* kg = pk + g * tk * dh;
      const T* vg = pv + g * tk * dh;
      T* pg = pp + g * tq * tk;
      T* og = po + g * tq * dh;
      for (int64_t i = 0; i < tq; ++i) {
        T* prow = pg + i * tk;
        const T* qi = qg + i * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int64_t j = 0; j < tk; ++j) {
          T s = T(0);
          const T* kj = kg + j * dh;
          for (int64_t d = 0; d < dh; ++d) s += qi[d] * kj[d];
          s *= scale;
          prow[j] = s;
          mx = std::max(mx, s);
        }
        T z = T(0);
        for (int64_t j = 0; j < tk; ++j) {
          prow[j] = std::exp(prow[j] - mx);
          z += prow[j];
        }
        T inv = T(1) / z;
        T* oi = og + i * dh;
        std::fill_n(oi, dh, T(0));
        for (int64_t j = 0; j < tk; ++j) {
          prow[j] *= inv;
          const T* vj = vg + j * dh;
          T p = prow[j];
          for (int64_t d = 0; d < dh; ++d) oi[d] += p * vj[d];
        }
      }
    }
  });
}

template <typename T>
void sdpa_bwd(const Tensor& g, const Tensor& q, const Tensor& k, const Tensor& v,
              const Tensor& probs, Tensor& dq, Tensor& dk, Tensor& dv) {
  int64_t b = q.shape()[0], h = q.shape()[1], tq = q.shape()[2], dh = q.shape()[3];
  int64_t tk = k.shape()[2];
  T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  const T* pg = g.data<T>();
  const T* pq = q.data<T>();
  const T* pk = k.data<T>();
  const T* pv = v.data<T>();
  const T* pp = probs.data<T>();
  T* pdq = dq.data<T>();
  T* pdk = dk.data<T>();
  T* pdv = dv.data<T>();
  std::vector<T> dprow(static_cast<size_t>(tk));
  for (int64_t gidx = 0; gidx < b * h; ++gidx) {
    const T* gg = pg + gidx * tq * dh;
    const T* qg = pq + gidx * tq * dh;
    const T* kg = pk + gidx * tk * dh;
    const T* vg = pv + gidx * tk * dh;
    const T* prg = pp + gidx * tq * tk;
    T* dqg = pdq + gidx * tq * dh;
    T* dkg = pdk + gidx * tk * dh;
    T* dvg = pdv + gidx * tk * dh;
    for (int64_t i = 0; i < tq; ++i) {
      const T* gi = gg + i * dh;
      const T* qi = qg + i * dh;
      const T* prow = prg + i * tk;
      // dV += p^T g ; dp = g V^T
      T dot = T(0);
      for (int64_t j = 0; j < tk; ++j) {
        const T* vj = vg + j * dh;
        T dp = T(0);
        for (int64_t d = 0; d < dh; ++d) dp += gi[d] * vj[d];
        dprow[static_cast<size_t>(j)] = dp;
        dot += dp * prow[j];
        T* dvj = dvg + j * dh;
        T p = prow[j];
        for (int64_t d = 0; d < dh; ++d) dvj[d] += p * gi[d];
      }
      // ds = p * (dp - dot); dQ += ds K * scale; dK += ds q * scale
      T* dqi = dqg + i * dh;
      for (int64_t j = 0; j < tk; ++j) {
        T ds = prow[j] * (dprow[static_cast<size_t>(j)] - dot) * scale;
        const T* kj = kg + j * dh;
        T* dkj = dkg + j * dh;
        for (int64_t d = 0; d < dh; ++d) {
          dqi[d] += ds * kj[d];
          dkj[d] += ds * qi[d];
        }
      }
    }
  }
}

}  // namespace

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  check_same_dtype(q, k, "sdpa");
  check_same_dtype(q, v, "sdpa");
  CXGN_CHECK(q.rank() == 4 && k.rank() == 4 && v.rank() == 4, "sdpa expects (B,H,T,Dh)");
  CXGN_CHECK(q.shape()[0] == k.shape()[0] && q.shape()[1] == k.shape()[1] &&
                 q.shape()[3] == k.shape()[3],
             "sdpa: q/k shape mismatch");
  CXGN_CHECK(same_shape(k.shape(), v.shape()), "sdpa: k/v shape mismatch");
  check_finite(q, "sdpa");
  check_finite(k, "sdpa");
  check_finite(v, "sdpa");
  int64_t b = q.shape()[0], h = q.shape()[1], tq = q.shape()[2], tk = k.shape()[2];
  Tensor probs = Tensor::zeros({b, h, tq, tk}, q.dtype());
  Tensor out = Tensor::zeros(q.shape(), q.dtype());
  if (q.dtype() == DType::F32)
    sdpa_fwd<float>(q, k, v, probs, out);
  else
    sdpa_fwd<double>(q, k, v, probs, out);
  return record("sdpa", {q, k, v}, out, [probs](Tape&, Tape::Node& node) {
    Tensor g = grad_of(node);
    Tensor q_in = wrap(node.inputs[0]).detach();
    Tensor k_in = wrap(node.inputs[1]).detach();
    Tensor v_in = wrap(node.inputs[2]).detach();
    Tensor dq = Tensor::zeros(q_in.shape(), q_in.dtype());
    Tensor dk = Tensor::zeros(k_in.shape(), k_in.dtype());
    Tensor dv = Tensor::zeros(v_in.shape(), v_in.dtype());
    if (g.dtype() == DType::F32)
      sdpa_bwd<float>(g, q_in, k_in, v_in, probs, dq, dk, dv);
    else
      sdpa_bwd<double>(g, q_in, k_in, v_in, probs, dq, dk, dv);
    Tape::accumulate(node.inputs[0], dq);
    Tape::accumulate(node.inputs[1], dk);
    Tape::accumulate(node.inputs[2], dv);
  });
}

// ---- losses ----

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  CXGN_CHECK(same_shape(logits.shape(), targets.shape()), "bce: shape mismatch");
  Tensor t = targets.detach();
  return mean_all(sub(softplus(logits), mul(logits, t)));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean_all(mul(d, d));
}

}  // namespace cxgn
