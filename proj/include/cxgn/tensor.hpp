#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "cxgn/common.hpp"

namespace cxgn {

enum class DType : uint8_t { F32, F64 };

inline const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }
inline size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }
DType dtype_from_name(const std::string& s);

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);
// numpy trailing-dimension rule; throws on incompatibility
Shape broadcast_shape(const Shape& a, const Shape& b);
std::vector<int64_t> row_major_strides(const Shape& s);

struct TensorStorage {
  std::variant<std::vector<float>, std::vector<double>> buf;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  std::shared_ptr<TensorStorage> storage;
  bool requires_grad = false;
  // Lazily allocated by the tape; same shape/dtype as the value.
  std::shared_ptr<TensorImpl> grad;

  template <typename T>
  T* data() {
    return std::get<std::vector<T>>(storage->buf).data();
  }
  template <typename T>
  const T* data() const {
    return std::get<std::vector<T>>(storage->buf).data();
  }
  int64_t numel() const { return shape_numel(shape); }
};

// Value-semantic handle over shared storage. Tensors are immutable once created
// except through the optimizer (which mutates parameter storage in place).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dt = DType::F32, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, DType dt = DType::F32);
  static Tensor scalar(double value, DType dt = DType::F32);
  static Tensor from_vector(const std::vector<float>& v, const Shape& shape);
  static Tensor from_vector(const std::vector<double>& v, const Shape& shape);
  static Tensor randn(const Shape& shape, class SeededRng& rng, DType dt = DType::F32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim(int i) const;
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return impl_->numel(); }
  DType dtype() const { return impl_->dtype; }

  template <typename T>
  T* data() {
    return impl_->data<T>();
  }
  template <typename T>
  const T* data() const {
    return impl_->data<T>();
  }
  float* f32() { return impl_->data<float>(); }
  const float* f32() const { return impl_->data<float>(); }
  double* f64() { return impl_->data<double>(); }
  const double* f64() const { return impl_->data<double>(); }

  // element read as double regardless of dtype (row-major flat index)
  double at(int64_t i) const;
  void set(int64_t i, double v);
  double item() const;  // numel()==1

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }

  // Grad as a tensor view (allocates zeros on first access).
  Tensor grad() const;
  bool has_grad() const { return impl_->grad != nullptr; }
  void zero_grad();

  Tensor clone() const;                 // deep copy, drops grad
  Tensor detach() const;                // shares storage, requires_grad=false
  Tensor astype(DType dt) const;        // copy with cast
  Tensor reshaped(const Shape& s) const;  // shares storage, off-tape

  std::shared_ptr<TensorImpl> impl() const { return impl_; }
  bool same_storage(const Tensor& o) const {
    return impl_->storage.get() == o.impl_->storage.get();
  }

  uint64_t content_hash() const;  // bytes of the raw buffer

 private:
  std::shared_ptr<TensorImpl> impl_;
};

#define CXGN_DISPATCH_DT(dt, expr_f32, expr_f64) \
  ((dt) == ::cxgn::DType::F32 ? (expr_f32) : (expr_f64))

}  // namespace cxgn
