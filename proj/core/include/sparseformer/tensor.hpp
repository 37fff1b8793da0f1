#pragma once

#include <atomic>
#include <cassert>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sparseformer/error.hpp"

namespace spf {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Storage {
  std::vector<T> data;
  std::atomic<bool> frozen{false};  // set once the buffer is recorded on a tape
  bool requires_grad = false;       // shared across all views of the buffer
};

// Dense row-major tensor over shared storage. Copies are cheap handles;
// reshaped() views the same buffer under different extents. Once a tensor is
// recorded on a tape its storage is frozen; raw() asserts against mutation
// until thaw() (used by the optimizer between tapes).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), st_(std::make_shared<Storage<T>>()) {
    validate_shape(shape_);
    st_->data.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

  static Tensor from(Shape shape, std::vector<T> values) {
    validate_shape(shape);
    if (static_cast<long long>(values.size()) != shape_numel(shape)) {
      throw DimError("data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.st_ = std::make_shared<Storage<T>>();
    t.st_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return st_ != nullptr; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const {
    return shape_[static_cast<std::size_t>(i < 0 ? ndim() + i : i)];
  }
  const Shape& shape() const { return shape_; }
  long long numel() const { return shape_numel(shape_); }

  const T* data() const { return st_->data.data(); }
  const std::vector<T>& vec() const { return st_->data; }

  T* raw() {
    assert(st_ && !st_->frozen.load(std::memory_order_relaxed) &&
           "tensor recorded on a tape is immutable");
    return st_->data.data();
  }

  void freeze() const { st_->frozen.store(true, std::memory_order_relaxed); }
  void thaw() const { st_->frozen.store(false, std::memory_order_relaxed); }
  bool frozen() const { return st_->frozen.load(std::memory_order_relaxed); }

  T item() const {
    if (numel() != 1) throw DimError("item() on non-scalar " + shape_str(shape_));
    return st_->data[0];
  }

  T at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != ndim()) {
      throw DimError("index rank mismatch for " + shape_str(shape_));
    }
    long long off = 0;
    int axis = 0;
    for (int i : idx) {
      off = off * shape_[static_cast<std::size_t>(axis)] + i;
      ++axis;
    }
    return st_->data[static_cast<std::size_t>(off)];
  }

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    st_->requires_grad = b;
    return *this;
  }

  // Storage identity; tapes key gradient buffers by this.
  const void* id() const { return st_.get(); }

  Tensor reshaped(Shape s) const {
    validate_shape(s);
    if (shape_numel(s) != numel()) {
      throw DimError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    Tensor v = *this;
    v.shape_ = std::move(s);
    return v;
  }

  Tensor clone() const {
    Tensor c;
    c.shape_ = shape_;
    c.st_ = std::make_shared<Storage<T>>();
    c.st_->data = st_->data;
    c.st_->requires_grad = st_->requires_grad;
    return c;
  }

  template <typename U>
  Tensor<U> astype() const {
    std::vector<U> out(st_->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(st_->data[i]);
    return Tensor<U>::from(shape_, std::move(out));
  }

 private:
  static void validate_shape(const Shape& s) {
    if (s.empty()) throw DimError("tensor rank must be >= 1");
    for (int d : s) {
      if (d < 1) throw DimError("tensor extents must be >= 1, got " + shape_str(s));
    }
  }

  Shape shape_;
  std::shared_ptr<Storage<T>> st_;
};

// Reverse-mode tape. Nodes are recorded in forward order (inputs before
// consumers) and replayed exactly once in reverse. Gradient buffers are owned
// by the tape, so independent tapes may run concurrently over shared
// read-only weights; summing across tapes is the caller's job.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

  std::vector<T>& grad(const Tensor<T>& t) {
    auto& g = grads_[t.id()];
    if (g.empty()) g.assign(static_cast<std::size_t>(t.numel()), T(0));
    return g;
  }

  const std::vector<T>* find_grad(const Tensor<T>& t) const {
    auto it = grads_.find(t.id());
    return it == grads_.end() ? nullptr : &it->second;
  }

  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw DimError("backward expects a scalar loss, got " + shape_str(loss.shape()));
    }
    grad(loss)[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  std::size_t size() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    grads_.clear();
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::unordered_map<const void*, std::vector<T>> grads_;
};

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;     // accumulated across a batch by the training loop
  bool decay = true;  // weight-decay eligibility
};

// Named parameters in stable insertion order; checkpoints and the optimizer
// traverse this order.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Tensor<T> value, bool decay = true) {
    if (by_name_.count(name)) throw StateError("duplicate parameter name: " + name);
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->value = std::move(value);
    p->value.set_requires_grad(true);
    p->grad = Tensor<T>(p->value.shape());
    p->decay = decay;
    Param<T>& ref = *p;
    by_name_[name] = p.get();
    items_.push_back(std::move(p));
    return ref;
  }

  Param<T>* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  std::size_t size() const { return items_.size(); }
  Param<T>& operator[](std::size_t i) { return *items_[i]; }
  const Param<T>& operator[](std::size_t i) const { return *items_[i]; }

  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::unique_ptr<Param<T>>> items_;
  std::unordered_map<std::string, Param<T>*> by_name_;
};

}  // namespace spf
