#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <vector>

#include "musiq/common.hpp"

namespace musiq {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative extent in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

// Dense row-major array. Copies share the underlying buffer; all ops
// allocate fresh outputs, so shared buffers are never mutated except by
// the optimizer, which is the single writer of parameter storage.
template <typename T>
class Tensor {
 public:
  Tensor() : shape_{0}, buf_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(shape_numel(shape_), T(0))) {}

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<T>>(std::move(data))) {
    if (static_cast<int64_t>(buf_->size()) != shape_numel(shape_))
      throw ShapeError("data length does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.buf_->begin(), t.buf_->end(), v);
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i); }
  int64_t numel() const { return static_cast<int64_t>(buf_->size()); }
  bool empty() const { return buf_->empty(); }

  T* data() { return buf_->data(); }
  const T* data() const { return buf_->data(); }
  std::span<T> view() { return {buf_->data(), buf_->size()}; }
  std::span<const T> view() const { return {buf_->data(), buf_->size()}; }

  T& operator[](int64_t i) { return (*buf_)[i]; }
  const T& operator[](int64_t i) const { return (*buf_)[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape_));
    return (*buf_)[0];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.buf_ = std::make_shared<std::vector<T>>(*buf_);
    return t;
  }

  // Same buffer, new shape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                       " changes element count");
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(buf_->size());
    for (size_t i = 0; i < buf_->size(); ++i) out[i] = static_cast<U>((*buf_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (T v : *buf_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> buf_;
};

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else return "float64";
}

}  // namespace musiq
