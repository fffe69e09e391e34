#include "distil/tensor.hpp"

#include <bit>
#include <cstring>
#include <sstream>
#include <unordered_set>

#include "distil/errors.hpp"

namespace distil {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
std::variant<std::vector<float>, std::vector<double>> empty_storage() {
  return std::vector<T>{};
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

bool TensorImpl::has_grad() const {
  return std::visit([&](const auto& g) { return !g.empty(); }, grad);
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return full(std::move(shape), 0.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = dtype;
  const auto n = shape_numel(shape);
  impl->shape = std::move(shape);
  if (dtype == DType::f32) {
    impl->data = std::vector<float>(n, static_cast<float>(value));
    impl->grad = std::vector<float>{};
  } else {
    impl->data = std::vector<double>(n, value);
    impl->grad = std::vector<double>{};
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != values.size() || values.empty()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = DType::f32;
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->grad = std::vector<float>{};
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size() || values.empty()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->dtype = DType::f64;
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->grad = std::vector<double>{};
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return shape_numel(impl_->shape); }

DType Tensor::dtype() const { return impl_->dtype; }

double Tensor::at(std::size_t i) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(i)); }, impl_->data);
}

double Tensor::grad_at(std::size_t i) const {
  return std::visit(
      [&](const auto& g) { return g.empty() ? 0.0 : static_cast<double>(g.at(i)); }, impl_->grad);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    impl_->data);
}

std::vector<double> Tensor::grad_vector() const {
  if (!has_grad()) return std::vector<double>(numel(), 0.0);
  return std::visit([](const auto& g) { return std::vector<double>(g.begin(), g.end()); },
                    impl_->grad);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw DimensionError("item() requires a single-element tensor, got " + shape_str(shape()));
  }
  return at(0);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_->grad_fn) throw UsageError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl_->has_grad(); }

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

void Tensor::zero_grad() {
  std::visit([](auto& g) { std::fill(g.begin(), g.end(), 0); }, impl_->grad);
}

void Tensor::clear_grad() {
  std::visit([](auto& g) { g.clear(); g.shrink_to_fit(); }, impl_->grad);
}

void Tensor::backward() const {
  if (!impl_ || !impl_->grad_fn) {
    throw UsageError("backward() called on a tensor with no recorded graph");
  }
  if (numel() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto& inputs = node->grad_fn->inputs;
    if (next < inputs.size()) {
      TensorImpl* child = inputs[next++].get();
      if (child->grad_fn && child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are recomputed on every sweep so that only leaves
  // accumulate across calls.
  for (auto* node : order) {
    std::visit([&](auto& g) { g.assign(shape_numel(node->shape), 0); }, node->grad);
  }
  std::visit([](auto& g) { g[0] = 1; }, impl_->grad);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    (*it)->grad_fn->backward(**it);
  }
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  impl->grad = impl_->dtype == DType::f32 ? empty_storage<float>() : empty_storage<double>();
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor out = detach();
  out.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return out;
}

Tensor Tensor::to(DType dtype) const {
  if (dtype == impl_->dtype) return clone();
  auto values = to_vector();
  Tensor out;
  if (dtype == DType::f32) {
    out = from_vector(impl_->shape, std::vector<float>(values.begin(), values.end()));
  } else {
    out = from_vector(impl_->shape, std::move(values));
  }
  out.impl_->requires_grad = impl_->requires_grad && !impl_->grad_fn;
  return out;
}

std::vector<std::uint8_t> Tensor::raw_bytes() const {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  return std::visit(
      [](const auto& v) {
        std::vector<std::uint8_t> bytes(v.size() * sizeof(v[0]));
        std::memcpy(bytes.data(), v.data(), bytes.size());
        return bytes;
      },
      impl_->data);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Tensor make_output(Shape shape, DType dtype, std::initializer_list<Tensor> inputs, const char* op,
                   std::function<void(TensorImpl& out)> backward) {
  Tensor out = Tensor::zeros(std::move(shape), dtype);
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) needs = true;
  }
  if (!needs) return out;
  auto node = std::make_shared<GradNode>();
  node->op = op;
  for (const auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.shared_impl());
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

}  // namespace detail

}  // namespace distil
