#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/tensor.hpp"

namespace modex {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named parameters in insertion order, each with its Adam moments.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    Tensor<T> first_moment;
    Tensor<T> second_moment;
  };

  Tensor<T>& add(std::string name, Tensor<T> value) {
    if (contains(name)) throw UsageError("duplicate parameter name: " + name);
    Shape shape = value.shape();
    entries_.push_back(Entry{std::move(name), std::move(value), Tensor<T>(shape),
                             Tensor<T>(shape)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const {
    for (const Entry& e : entries_)
      if (e.name == name) return true;
    return false;
  }

  Tensor<T>& get(const std::string& name) {
    for (Entry& e : entries_)
      if (e.name == name) return e.value;
    throw UsageError("unknown parameter: " + name);
  }
  const Tensor<T>& get(const std::string& name) const {
    return const_cast<ParamStore*>(this)->get(name);
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.value.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  void zero_grad() {
    for (Entry& e : entries_) e.value.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::uint64_t step_ = 0;
};

/// One bias-corrected Adam update over every parameter, then zeroes grads.
template <class T>
void adam_step(ParamStore<T>& params, const AdamConfig& cfg) {
  for (const auto& e : params) {
    if (!e.value.has_grad()) {
      throw UsageError("parameter '" + e.name + "' has no gradient");
    }
  }
  params.set_step(params.step() + 1);
  const double t = static_cast<double>(params.step());
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& e : params) {
    auto grad = e.value.grad();
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = grad[i];
      const double m = cfg.beta1 * e.first_moment[i] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * e.second_moment[i] + (1.0 - cfg.beta2) * g * g;
      e.first_moment[i] = static_cast<T>(m);
      e.second_moment[i] = static_cast<T>(v);
      const double m_hat = m / correction1;
      const double v_hat = v / correction2;
      e.value[i] -= static_cast<T>(cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps));
    }
    e.value.zero_grad();
  }
}

}  // namespace modex
