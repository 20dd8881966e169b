#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedchat/error.hpp"

namespace fedchat {

template <class Real>
struct BasicTensor {
  std::vector<std::size_t> shape;
  std::vector<Real> data;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<std::size_t> s, Real fill = Real(0))
      : shape(std::move(s)), data(count(shape), fill) {}
  BasicTensor(std::vector<std::size_t> s, std::vector<Real> values)
      : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != count(shape)) {
      throw Error(ErrorCode::kInvalidArgument, "tensor data does not match shape");
    }
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
};

// Flat named-tensor store. Iteration is lexicographic by name.
template <class Real>
class BasicParamSet {
 public:
  struct Entry {
    BasicTensor<Real> tensor;
    bool trainable = true;
  };
  using Map = std::map<std::string, Entry>;

  void insert(const std::string& name, BasicTensor<Real> tensor, bool trainable = true) {
    entries_[name] = Entry{std::move(tensor), trainable};
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const BasicTensor<Real>& at(const std::string& name) const { return lookup(name).tensor; }
  BasicTensor<Real>& at(const std::string& name) { return lookup(name).tensor; }

  bool trainable(const std::string& name) const { return lookup(name).trainable; }
  void set_trainable(const std::string& name, bool value) { lookup(name).trainable = value; }
  void set_all_trainable(bool value) {
    for (auto& [_, e] : entries_) e.trainable = value;
  }

  void erase(const std::string& name) { entries_.erase(name); }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  const Map& entries() const { return entries_; }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.tensor.numel();
    return n;
  }

  // Identical name and shape sets.
  bool aligned_with(const BasicParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.tensor.shape != b->second.tensor.shape) return false;
    }
    return true;
  }

  // Same names, shapes and trainable flags; all tensors zero.
  BasicParamSet zeros_like() const {
    BasicParamSet out;
    for (const auto& [name, e] : entries_) out.insert(name, BasicTensor<Real>(e.tensor.shape), e.trainable);
    return out;
  }

  template <class Other>
  BasicParamSet<Other> cast() const {
    BasicParamSet<Other> out;
    for (const auto& [name, e] : entries_) {
      BasicTensor<Other> t(e.tensor.shape);
      for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<Other>(e.tensor.data[i]);
      out.insert(name, std::move(t), e.trainable);
    }
    return out;
  }

 private:
  Entry& lookup(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error(ErrorCode::kUnknownTarget, "no parameter named '" + name + "'");
    return it->second;
  }
  const Entry& lookup(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error(ErrorCode::kUnknownTarget, "no parameter named '" + name + "'");
    return it->second;
  }

  Map entries_;
};

using Tensor = BasicTensor<float>;
using ParamSet = BasicParamSet<float>;
using ParamSet64 = BasicParamSet<double>;

// Names, shapes, trainable flags and every value byte match.
template <class Real>
bool bitwise_equal(const BasicParamSet<Real>& a, const BasicParamSet<Real>& b) {
  if (!a.aligned_with(b)) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->second.trainable != ib->second.trainable) return false;
    const auto& da = ia->second.tensor.data;
    const auto& db = ib->second.tensor.data;
    if (std::memcmp(da.data(), db.data(), da.size() * sizeof(Real)) != 0) return false;
  }
  return true;
}

inline void require_aligned(const ParamSet& a, const ParamSet& b, const char* what) {
  if (!a.aligned_with(b)) throw Error(ErrorCode::kMisalignedParams, what);
}

}  // namespace fedchat
