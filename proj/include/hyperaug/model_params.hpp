#pragma once

// Named parameter collection with a canonical flat view. The flat order is
// the entry order, each tensor laid out contiguously; flatten/unflatten
// round-trip bit-exactly. Gradient vectors, curvature products and optimizer
// state all use this one ordering.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hyperaug/tensor.hpp"

namespace hyperaug {

template <typename Real>
class ModelParams {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> value;
  };

  ModelParams() = default;

  void add(std::string name, Tensor<Real> value) {
    entries_.push_back(Entry{std::move(name), std::move(value)});
  }

  size_t count() const { return entries_.size(); }
  const Entry& entry(size_t i) const { return entries_[i]; }
  Entry& entry(size_t i) { return entries_[i]; }
  const std::vector<Entry>& entries() const { return entries_; }

  const Tensor<Real>& operator[](std::string_view name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.value;
    throw ValueError("ModelParams: no parameter named '" + std::string(name) +
                     "'");
  }

  int64_t total_dim() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

  std::vector<Real> flatten() const {
    std::vector<Real> flat;
    flat.reserve(size_t(total_dim()));
    for (const auto& e : entries_) {
      auto v = e.value.values();
      flat.insert(flat.end(), v.begin(), v.end());
    }
    return flat;
  }

  // Replaces every tensor's values from the flat vector; shapes are kept.
  void unflatten(std::span<const Real> flat) {
    if (int64_t(flat.size()) != total_dim())
      throw ShapeError("unflatten: got " + std::to_string(flat.size()) +
                       " values for " + std::to_string(total_dim()) +
                       " parameters");
    size_t off = 0;
    for (auto& e : entries_) {
      size_t n = size_t(e.value.numel());
      e.value = Tensor<Real>::constant(
          e.value.shape(),
          std::vector<Real>(flat.begin() + off, flat.begin() + off + n));
      off += n;
    }
  }

  ModelParams clone() const { return *this; }

 private:
  std::vector<Entry> entries_;
};

}  // namespace hyperaug
