#include "ssmstyle/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ssmstyle/errors.hpp"

namespace ssmstyle {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) raise(ErrorKind::kNumeric, std::string("non-finite value produced by ") + what);
  }
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) raise(ErrorKind::kDimension, "zero extent in shape " + shape_str(shape));
  }
  if (shape.empty()) raise(ErrorKind::kDimension, "tensor shape must have at least one axis");
  if (numel(shape) != values.size()) {
    raise(ErrorKind::kDimension, "shape " + shape_str(shape) + " does not match " +
                                     std::to_string(values.size()) + " values");
  }
  check_finite(values, "tensor construction");
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) raise(ErrorKind::kDimension, "axis out of range");
  return impl_->shape[axis];
}

std::size_t Tensor::size() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() {
  if (!impl_->is_leaf) raise(ErrorKind::kContract, "only leaf tensors may be mutated");
  return impl_->data;
}

double Tensor::item() const {
  if (size() != 1) raise(ErrorKind::kContract, "item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

std::vector<double> Tensor::to_vector() const { return impl_->data; }

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!impl_->is_leaf) raise(ErrorKind::kContract, "requires_grad can only be set on leaves");
  impl_->requires_grad = value;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

double* grad_sink(const std::shared_ptr<Tensor::Impl>& t) {
  if (!t->requires_grad) return nullptr;
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad.data();
}

Tensor make_op_result(Tape& tape, Shape shape, std::vector<double> values,
                      std::initializer_list<const Tensor*> inputs, const char* op_name) {
  check_finite(values, op_name);
  auto impl = std::make_shared<Tensor::Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->is_leaf = false;
  for (const Tensor* in : inputs) {
    if (in == nullptr || !in->defined()) continue;
    if (in->requires_grad()) {
      impl->requires_grad = true;
      if (in->impl()->is_leaf) tape.note_leaf(*in);
    }
  }
  if (impl->requires_grad) impl->producer = &tape;
  return Tensor(std::move(impl));
}

void Tape::record(std::function<void()> vjp) { nodes_.push_back(std::move(vjp)); }

void Tape::note_leaf(const Tensor& leaf) {
  const auto& impl = leaf.impl();
  if (std::find(leaves_.begin(), leaves_.end(), impl) == leaves_.end()) leaves_.push_back(impl);
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    raise(ErrorKind::kContract, "backward requires a scalar loss");
  }
  for (const auto& leaf : leaves_) grad_sink(leaf);
  const auto& impl = loss.impl();
  if (!impl->requires_grad) return;  // constant loss: all gradients stay zero
  if (!impl->is_leaf && impl->producer != this) {
    raise(ErrorKind::kContract, "loss was not produced on this tape");
  }
  grad_sink(impl)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::clear() {
  nodes_.clear();
  leaves_.clear();
}

}  // namespace ssmstyle
