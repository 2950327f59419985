#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ssmstyle {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense row-major array of doubles with an optional gradient slot.
///
/// A Tensor is a shared handle: copies alias the same storage. Values are
/// fixed once an op produces them; only leaves are mutated in place, by the
/// optimizer and by finite-difference probes.
class Tensor {
 public:
  struct Impl;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  // Empty span when no gradient has been accumulated.
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Same values, fresh storage, no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;

  friend class Tape;
  friend Tensor make_op_result(Tape&, Shape, std::vector<double>,
                               std::initializer_list<const Tensor*>,
                               const char*);
};

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  const Tape* producer = nullptr;
};

/// Records vector-Jacobian closures in forward order and replays them in
/// reverse. Single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> vjp);
  void note_leaf(const Tensor& leaf);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure newest first.
  // Every requires_grad leaf that took part ends with a populated gradient.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<Tensor::Impl>> leaves_;
};

// Op-authoring helpers, used by modules that define fused ops.

// Builds an op output. Rejects non-finite values, propagates requires_grad,
// and registers leaf inputs with the tape.
Tensor make_op_result(Tape& tape, Shape shape, std::vector<double> values,
                      std::initializer_list<const Tensor*> inputs,
                      const char* op_name);

// Gradient buffer of `t`, allocated on first use; nullptr when `t` does not
// require a gradient.
double* grad_sink(const std::shared_ptr<Tensor::Impl>& t);

void check_finite(std::span<const double> values, const char* what);

}  // namespace ssmstyle
