#include "cxgn/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

#include "cxgn/rng.hpp"

namespace cxgn {

DType dtype_from_name(const std::string& s) {
  if (s == "f32") return DType::F32;
  if (s == "f64") return DType::F64;
  throw Error("unknown dtype: " + s);
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    CXGN_CHECK(d > 0, "shape extents must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    int64_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw Error("broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

static std::shared_ptr<TensorImpl> make_impl(const Shape& shape, DType dt) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dt;
  impl->storage = std::make_shared<TensorStorage>();
  int64_t n = shape_numel(shape);
  if (dt == DType::F32)
    impl->storage->buf = std::vector<float>(static_cast<size_t>(n), 0.0f);
  else
    impl->storage->buf = std::vector<double>(static_cast<size_t>(n), 0.0);
  return impl;
}

Tensor Tensor::zeros(const Shape& shape, DType dt, bool requires_grad) {
  Tensor t(make_impl(shape, dt));
  t.impl()->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  Tensor t = zeros(shape, dt);
  int64_t n = t.numel();
  if (dt == DType::F32) {
    float v = static_cast<float>(value);
    std::fill_n(t.f32(), n, v);
  } else {
    std::fill_n(t.f64(), n, value);
  }
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_vector(const std::vector<float>& v, const Shape& shape) {
  CXGN_CHECK(static_cast<int64_t>(v.size()) == shape_numel(shape), "from_vector: size mismatch");
  Tensor t = zeros(shape, DType::F32);
  std::copy(v.begin(), v.end(), t.f32());
  return t;
}

Tensor Tensor::from_vector(const std::vector<double>& v, const Shape& shape) {
  CXGN_CHECK(static_cast<int64_t>(v.size()) == shape_numel(shape), "from_vector: size mismatch");
  Tensor t = zeros(shape, DType::F64);
  std::copy(v.begin(), v.end(), t.f64());
  return t;
}

Tensor Tensor::randn(const Shape& shape, SeededRng& rng, DType dt) {
  Tensor t = zeros(shape, dt);
  if (dt == DType::F32)
    rng.fill_normal(t.f32(), t.numel());
  else
    rng.fill_normal(t.f64(), t.numel());
  return t;
}

int64_t Tensor::dim(int i) const {
  int r = rank();
  if (i < 0) i += r;
  CXGN_CHECK(i >= 0 && i < r, "dim index out of range");
  return impl_->shape[i];
}

double Tensor::at(int64_t i) const {
  CXGN_CHECK(i >= 0 && i < numel(), "flat index out of range");
  return dtype() == DType::F32 ? static_cast<double>(f32()[i]) : f64()[i];
}

void Tensor::set(int64_t i, double v) {
  CXGN_CHECK(i >= 0 && i < numel(), "flat index out of range");
  if (dtype() == DType::F32)
    impl_->data<float>()[i] = static_cast<float>(v);
  else
    impl_->data<double>()[i] = v;
}

double Tensor::item() const {
  CXGN_CHECK(numel() == 1, "item() requires a scalar tensor, got " + shape_str(shape()));
  return at(0);
}

Tensor Tensor::grad() const {
  if (!impl_->grad) impl_->grad = make_impl(impl_->shape, impl_->dtype);
  return Tensor(impl_->grad);
}

void Tensor::zero_grad() { impl_->grad = nullptr; }

Tensor Tensor::clone() const {
  Tensor t = zeros(shape(), dtype());
  if (dtype() == DType::F32)
    std::copy_n(f32(), numel(), t.f32());
  else
    std::copy_n(f64(), numel(), t.f64());
  return t;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->storage = impl_->storage;
  impl->requires_grad = false;
  return Tensor(impl);
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype()) return clone();
  Tensor t = zeros(shape(), dt);
  int64_t n = numel();
  if (dt == DType::F64) {
    const float* src = f32();
    double* dst = t.f64();
    for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
  } else {
    const double* src = f64();
    float* dst = t.f32();
    for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
  }
  return t;
}

Tensor Tensor::reshaped(const Shape& s) const {
  CXGN_CHECK(shape_numel(s) == numel(), "reshape: numel mismatch " + shape_str(shape()) + " -> " + shape_str(s));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->dtype = impl_->dtype;
  impl->storage = impl_->storage;
  impl->requires_grad = false;
  return Tensor(impl);
}

uint64_t Tensor::content_hash() const {
  if (dtype() == DType::F32) return fnv1a64(f32(), static_cast<size_t>(numel()) * 4);
  return fnv1a64(f64(), static_cast<size_t>(numel()) * 8);
}

}  // namespace cxgn
