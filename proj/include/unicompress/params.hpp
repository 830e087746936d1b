#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "unicompress/rng.hpp"
#include "unicompress/tensor.hpp"

namespace unicompress {

// Named registry of learnable tensors. Iteration order is lexicographic by
// name, which is also the checkpoint order.
class ParamSet {
 public:
  struct Entry {
    Shape dims;
    std::shared_ptr<std::vector<double>> value;
    bool trainable = true;
  };

  void add(const std::string& name, Shape dims, std::vector<double> values);
  void add_uniform(const std::string& name, Shape dims, double bound, Rng& rng);
  void add_normal(const std::string& name, Shape dims, double stddev, Rng& rng);
  void add_constant(const std::string& name, Shape dims, double v);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& entry(const std::string& name) const;
  Entry& entry(const std::string& name);
  // Read-only tensor aliasing the stored values.
  Tensor tensor(const std::string& name) const;
  std::vector<std::string> names() const;
  std::vector<std::string> names_with_prefix(std::string_view prefix) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries_mutable() { return entries_; }
  std::size_t total_size() const;

  // Marks every tensor whose name starts with `prefix`.
  void set_trainable(std::string_view prefix, bool trainable);

  // Deep copy of the values (independent storage).
  ParamSet clone() const;
  // Copies values in from `other` for every name present in both.
  void assign_from(const ParamSet& other);

 private:
  std::map<std::string, Entry> entries_;
};

using GradMap = std::map<std::string, std::vector<double>>;

// Per-pass view of a ParamSet: each requested parameter becomes a leaf tensor
// sharing the stored values and owning a private gradient slot. Separate
// bindings can therefore run backward independently.
class ParamBinding {
 public:
  explicit ParamBinding(const ParamSet& params) : params_(&params) {}

  const Tensor& operator[](const std::string& name);
  const ParamSet& params() const { return *params_; }

  // Adds every bound gradient into `grads` (names missing from `grads` are
  // created). Throws if a frozen parameter received a gradient.
  void accumulate_into(GradMap& grads, double weight = 1.0) const;

 private:
  const ParamSet* params_;
  std::map<std::string, Tensor> leaves_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
  // Updates trainable parameters present in `grads`; missing ones count as 0.
  void step(ParamSet& params, const GradMap& grads);
  std::uint64_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace unicompress
