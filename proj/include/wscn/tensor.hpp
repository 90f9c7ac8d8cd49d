#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wscn {

using Shape = std::vector<std::size_t>;

/// Raised when tensor extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an operation's precondition (other than shape) is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::Float32 : DType::Float64;
}

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

template <class T>
class Tape;

/// Dense row-major n-dimensional array. Copies are shallow handles onto
/// shared storage; use clone() for a deep copy. Image tensors are N,C,H,W.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{})
      : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(wscn::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    if (wscn::numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T{0}); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T{1}); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return static_cast<bool>(impl_); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t i) const { return impl().shape.at(i); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<T> data() { return impl().data; }
  std::span<const T> data() const { return impl().data; }
  T* ptr() { return impl().data.data(); }
  const T* ptr() const { return impl().data.data(); }
  T& operator[](std::size_t i) { return impl().data[i]; }
  const T& operator[](std::size_t i) const { return impl().data[i]; }

  T item() const {
    if (numel() != 1)
      throw ContractError("item() on non-scalar tensor " + to_string(shape()));
    return impl().data[0];
  }

  const std::string& name() const { return impl().name; }
  Tensor& set_name(std::string n) {
    impl().name = std::move(n);
    return *this;
  }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl().requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  /// Gradient buffer, zero-allocated on first access. Const because the
  /// handle is shallow: backward closures hold const copies.
  std::span<T> grad_mut() const {
    auto& g = shared().grad;
    if (g.empty()) g.assign(shared().data.size(), T{0});
    return g;
  }
  void zero_grad() {
    auto& g = impl().grad;
    std::fill(g.begin(), g.end(), T{0});
  }
  void clear_grad() { std::vector<T>().swap(impl().grad); }

  /// Deep copy of shape, data and name; the copy has no grad and no tape.
  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(impl().data));
    out.impl_->name = impl().name;
    out.impl_->requires_grad = impl().requires_grad;
    return out;
  }

  /// Same extents count, new shape; copies data.
  Tensor reshaped(Shape s) const {
    return Tensor(std::move(s), std::vector<T>(impl().data));
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

  // Tape bookkeeping; set only by Tape::record.
  const void* tape_id() const { return impl().tape; }
  std::size_t node_index() const { return impl().node; }

 private:
  friend class Tape<T>;

  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    std::string name;
    bool requires_grad = false;
    const void* tape = nullptr;
    std::size_t node = 0;
  };

  Impl& impl() {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }
  const Impl& impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }
  Impl& shared() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

/// Converts element type; used to lift float32 models into float64 for
/// gradient checking and back.
template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> d(t.numel());
  std::transform(t.data().begin(), t.data().end(), d.begin(),
                 [](From v) { return static_cast<To>(v); });
  Tensor<To> out(t.shape(), std::move(d));
  out.set_name(t.name());
  out.set_requires_grad(t.requires_grad());
  return out;
}

}  // namespace wscn
