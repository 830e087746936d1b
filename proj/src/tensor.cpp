#include "unicompress/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace unicompress {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) os << 'x';
    os << dims[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

Tensor::Tensor(Shape dims, std::vector<double> data, bool requires_grad)
    : Tensor(std::move(dims), std::make_shared<std::vector<double>>(std::move(data)),
             requires_grad) {}

Tensor::Tensor(Shape dims, std::shared_ptr<std::vector<double>> storage, bool requires_grad) {
  if (dims.empty()) throw ShapeError("tensor needs at least one dimension");
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims));
  }
  if (shape_numel(dims) != storage->size()) {
    throw ShapeError("tensor dims " + shape_str(dims) + " do not match " +
                     std::to_string(storage->size()) + " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->dims = std::move(dims);
  node_->value = std::move(storage);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape dims, bool requires_grad) { return full(std::move(dims), 0.0, requires_grad); }

Tensor Tensor::full(Shape dims, double v, bool requires_grad) {
  const auto n = shape_numel(dims);
  return Tensor(std::move(dims), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

Tensor Tensor::vector(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }

std::size_t Tensor::rows() const {
  const auto& d = node_->dims;
  if (d.size() == 1) return 1;
  if (d.size() == 2) return d[0];
  throw ShapeError("expected rank 1 or 2, got " + shape_str(d));
}

std::size_t Tensor::cols() const { return node_->dims.back(); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(dims()));
  return (*node_->value)[0];
}

std::span<const double> Tensor::row(std::size_t r) const {
  const auto n = cols();
  return std::span<const double>(*node_->value).subspan(r * n, n);
}

Tensor Tensor::clone() const { return Tensor(dims(), *node_->value, requires_grad()); }

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

void Tape::backward(const Tensor& loss, double seed) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar, got " + shape_str(loss.dims()));
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.node()->ensure_grad()[0] += seed;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

namespace detail {

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor make_result(Shape dims, std::vector<double> values, bool track) {
  return Tensor(std::move(dims), std::move(values), track);
}

}  // namespace detail

}  // namespace unicompress
