#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "unicompress/tensor.hpp"

namespace unicompress {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of
// x. `x` is perturbed in place and restored before returning.
//
// Stop-gradient subexpressions (detach) are held at their values from the
// unperturbed evaluation, so the oracle differentiates the same function the
// analytic backward does.
std::vector<double> finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x,
                                     double h = 1e-4);

// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-8);

namespace detail {

// Storage for the detach() replay used by finite_diff_grad.
class DetachReplay {
 public:
  enum class Mode { kOff, kRecord, kReplay };

  static DetachReplay& current();
  Mode mode() const { return mode_; }
  void start_record();
  void start_replay();
  void stop();
  // Called by detach(); returns the value the op should produce.
  std::vector<double> intercept(const std::vector<double>& value);

 private:
  Mode mode_ = Mode::kOff;
  std::vector<std::vector<double>> saved_;
  std::size_t cursor_ = 0;
};

}  // namespace detail

}  // namespace unicompress
