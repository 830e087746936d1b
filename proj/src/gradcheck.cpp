#include "unicompress/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace unicompress {

namespace detail {

DetachReplay& DetachReplay::current() {
  thread_local DetachReplay replay;
  return replay;
}

void DetachReplay::start_record() {
  mode_ = Mode::kRecord;
  saved_.clear();
  cursor_ = 0;
}

void DetachReplay::start_replay() {
  mode_ = Mode::kReplay;
  cursor_ = 0;
}

void DetachReplay::stop() { mode_ = Mode::kOff; }

std::vector<double> DetachReplay::intercept(const std::vector<double>& value) {
  if (mode_ == Mode::kRecord) {
    saved_.push_back(value);
    return value;
  }
  if (cursor_ >= saved_.size() || saved_[cursor_].size() != value.size()) {
    throw OracleError("detach replay diverged from the recorded evaluation at call " +
                      std::to_string(cursor_));
  }
  return saved_[cursor_++];
}

}  // namespace detail

namespace {

class ReplayScope {
 public:
  ReplayScope() : replay_(detail::DetachReplay::current()) {}
  ~ReplayScope() { replay_.stop(); }
  detail::DetachReplay& operator*() { return replay_; }

 private:
  detail::DetachReplay& replay_;
};

double checked(double v, const char* where) {
  if (!std::isfinite(v)) throw OracleError(std::string("non-finite function value at ") + where);
  return v;
}

}  // namespace

std::vector<double> finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
  if (!(h > 0.0)) throw OracleError("finite_diff_grad needs h > 0");
  NoGradGuard no_grad;
  ReplayScope scope;
  (*scope).start_record();
  checked(f(x), "x");

  auto values = x.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + h;
    (*scope).start_replay();
    const double up = checked(f(x), "x + h e_i");
    values[i] = orig - h;
    (*scope).start_replay();
    const double down = checked(f(x), "x - h e_i");
    values[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  if (analytic.size() != numeric.size()) throw OracleError("gradient length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace unicompress
