#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace distil {

// Training runs in f32. f64 exists so gradients can be verified against
// central differences without float rounding swamping the comparison.
enum class DType { f32, f64 };

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
const char* dtype_name(DType dtype);

struct TensorImpl;

// One recorded operation in the autograd graph. backward() reads the output
// gradient and accumulates into the gradients of `inputs`.
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f32;
  std::variant<std::vector<float>, std::vector<double>> data;
  std::variant<std::vector<float>, std::vector<double>> grad;
  bool requires_grad = false;
  std::shared_ptr<GradNode> grad_fn;

  bool has_grad() const;
  template <typename T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(data);
  }
  template <typename T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(data);
  }
  // Gradient buffer, allocated as zeros on first use.
  template <typename T>
  std::vector<T>& grad_buffer() {
    auto& g = std::get<std::vector<T>>(grad);
    if (g.size() != shape_numel(shape)) g.assign(shape_numel(shape), T(0));
    return g;
  }
};

// Reference-counted handle to a tensor. Copying a Tensor aliases the same
// storage; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, DType dtype = DType::f32);
  static Tensor full(Shape shape, double value, DType dtype = DType::f32);
  static Tensor from_vector(Shape shape, std::vector<float> values);
  static Tensor from_vector(Shape shape, std::vector<double> values);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<T> data() {
    return std::span<T>(impl_->values<T>());
  }
  template <typename T>
  std::span<const T> data() const {
    return std::span<const T>(impl_->values<T>());
  }
  template <typename T>
  std::span<const T> grad() const {
    return std::span<const T>(std::get<std::vector<T>>(impl_->grad));
  }
  template <typename T>
  std::span<T> mutable_grad() {
    return std::span<T>(impl_->grad_buffer<T>());
  }

  // Element access as double regardless of dtype.
  double at(std::size_t flat_index) const;
  double grad_at(std::size_t flat_index) const;
  std::vector<double> to_vector() const;
  std::vector<double> grad_vector() const;
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool has_grad() const;
  bool is_leaf() const;
  void zero_grad();
  void clear_grad();

  // Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  // Little-endian bytes of the values in storage dtype.
  std::vector<std::uint8_t> raw_bytes() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared_impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

bool grad_enabled();

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Allocates an op output and, when any input needs gradients and recording is
// enabled, attaches a graph node with the given backward closure.
Tensor make_output(Shape shape, DType dtype, std::initializer_list<Tensor> inputs,
                   const char* op, std::function<void(TensorImpl& out)> backward);

// Runs f.template operator()<T>() with T matching dtype.
template <typename F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) return f.template operator()<float>();
  return f.template operator()<double>();
}

}  // namespace detail

}  // namespace distil
