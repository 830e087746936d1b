#include "unicompress/params.hpp"

#include <cmath>
#include <stdexcept>

namespace unicompress {

void ParamSet::add(const std::string& name, Shape dims, std::vector<double> values) {
  if (entries_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  if (shape_numel(dims) != values.size()) {
    throw ShapeError("parameter " + name + " dims " + shape_str(dims) + " vs " +
                     std::to_string(values.size()) + " values");
  }
  entries_.emplace(name, Entry{std::move(dims), std::make_shared<std::vector<double>>(std::move(values)), true});
}

void ParamSet::add_uniform(const std::string& name, Shape dims, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(dims));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  add(name, std::move(dims), std::move(v));
}

void ParamSet::add_normal(const std::string& name, Shape dims, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(dims));
  for (auto& x : v) x = stddev * rng.normal();
  add(name, std::move(dims), std::move(v));
}

void ParamSet::add_constant(const std::string& name, Shape dims, double c) {
  const auto n = shape_numel(dims);
  add(name, std::move(dims), std::vector<double>(n, c));
}

const ParamSet::Entry& ParamSet::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

ParamSet::Entry& ParamSet::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor ParamSet::tensor(const std::string& name) const {
  const auto& e = entry(name);
  return Tensor(e.dims, e.value, false);
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::vector<std::string> ParamSet::names_with_prefix(std::string_view prefix) const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) {
    if (std::string_view(k).substr(0, prefix.size()) == prefix) out.push_back(k);
  }
  return out;
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value->size();
  return n;
}

void ParamSet::set_trainable(std::string_view prefix, bool trainable) {
  for (auto& [k, e] : entries_) {
    if (std::string_view(k).substr(0, prefix.size()) == prefix) e.trainable = trainable;
  }
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [k, e] : entries_) {
    out.entries_.emplace(k, Entry{e.dims, std::make_shared<std::vector<double>>(*e.value), e.trainable});
  }
  return out;
}

void ParamSet::assign_from(const ParamSet& other) {
  for (auto& [k, e] : entries_) {
    auto it = other.entries_.find(k);
    if (it == other.entries_.end()) continue;
    if (it->second.dims != e.dims) {
      throw ShapeError("parameter " + k + ": " + shape_str(it->second.dims) + " vs " + shape_str(e.dims));
    }
    *e.value = *it->second.value;
  }
}

const Tensor& ParamBinding::operator[](const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const auto& e = params_->entry(name);
  return leaves_.emplace(name, Tensor(e.dims, e.value, e.trainable)).first->second;
}

void ParamBinding::accumulate_into(GradMap& grads, double weight) const {
  for (const auto& [name, leaf] : leaves_) {
    const auto g = leaf.grad();
    if (g.empty()) continue;
    if (!params_->entry(name).trainable) {
      throw std::logic_error("frozen parameter received a gradient: " + name);
    }
    auto& dst = grads[name];
    if (dst.empty()) dst.assign(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += weight * g[i];
  }
}

void Adam::step(ParamSet& params, const GradMap& grads) {
  ++t_;
  double scale = 1.0;
  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [_, g] : grads)
      for (double x : g) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, e] : params.entries_mutable()) {
    if (!e.trainable) continue;
    auto it = grads.find(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) {
      m.assign(e.value->size(), 0.0);
      v.assign(e.value->size(), 0.0);
    }
    auto& w = *e.value;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = it == grads.end() ? 0.0 : it->second[i] * scale;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

}  // namespace unicompress
