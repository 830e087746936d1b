#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace unicompress {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& dims);
std::size_t shape_numel(const Shape& dims);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape dims;
  // Shared so that parameter leaves can alias the owning ParamSet storage.
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value->size(), 0.0);
    return grad;
  }
};

}  // namespace detail

// Dense row-major float64 array with an optional gradient slot.
//
// Copies are shallow: two Tensor handles may refer to the same node. Use
// clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape dims, std::vector<double> data, bool requires_grad = false);
  Tensor(Shape dims, std::shared_ptr<std::vector<double>> storage, bool requires_grad);

  static Tensor zeros(Shape dims, bool requires_grad = false);
  static Tensor full(Shape dims, double v, bool requires_grad = false);
  static Tensor scalar(double v);
  // rows x cols from nested initializer, handy in tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> v);

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t numel() const { return node_->value->size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return *node_->value; }
  std::span<double> mutable_data() { return *node_->value; }
  double item() const;
  double at(std::size_t r, std::size_t c) const { return (*node_->value)[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const;

  bool requires_grad() const { return node_->requires_grad; }
  // Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  std::vector<double> to_vector() const { return *node_->value; }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Records backward closures for every differentiable op executed while it is
// the active tape. Creation order is a topological order, so backward() runs
// the closures once each in reverse.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::function<void()> backward_fn);
  // Seeds d(loss)/d(loss) with `seed` (default 1) and propagates.
  void backward(const Tensor& loss, double seed = 1.0);
  std::size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
  Tape* previous_;
  bool consumed_ = false;
};

// Suspends recording for the current thread (inference paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

namespace detail {

// True when an op over `inputs` must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
Tensor make_result(Shape dims, std::vector<double> values, bool track);

}  // namespace detail

}  // namespace unicompress
