#pragma once

// Dense rank<=4 tensor with tape-based reverse-mode differentiation.
// Tensors are immutable values with shared storage; ops (see ops.hpp) record
// nodes on a TapeT and backward() replays them in exact reverse order.
// The scalar type is a template parameter: float for runtime training,
// double for gradient checks and numeric tests.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sdpl/error.hpp"

namespace sdpl {

using i64 = std::int64_t;

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<i64> dims) {
    if (dims.size() > 4) fail(ErrorCode::ShapeMismatch, "rank > 4");
    for (i64 d : dims) {
      if (d < 0) fail(ErrorCode::ShapeMismatch, "negative extent");
      dims_[rank_++] = d;
    }
  }
  static Shape of(std::span<const i64> dims) {
    Shape s;
    if (dims.size() > 4) fail(ErrorCode::ShapeMismatch, "rank > 4");
    for (i64 d : dims) s.dims_[s.rank_++] = d;
    return s;
  }

  int rank() const { return rank_; }
  i64 operator[](int i) const {
    if (i < 0 || i >= rank_) fail(ErrorCode::IndexOutOfRange, "shape axis");
    return dims_[i];
  }
  i64 numel() const {
    i64 n = 1;
    for (int i = 0; i < rank_; ++i) n *= dims_[i];
    return n;
  }
  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i)
      if (dims_[i] != o.dims_[i]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) os << (i ? "," : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  std::array<i64, 4> dims_{};
  int rank_ = 0;
};

template <typename T>
class TapeT;

template <typename T>
class TensorT {
 public:
  using Storage = std::vector<T>;

  TensorT() = default;

  static TensorT constant(Shape shape, Storage values) {
    check_size(shape, values.size());
    TensorT t;
    t.shape_ = shape;
    t.data_ = std::make_shared<Storage>(std::move(values));
    return t;
  }
  static TensorT full(Shape shape, T value) {
    return constant(shape, Storage(static_cast<size_t>(shape.numel()), value));
  }
  static TensorT zeros(Shape shape) { return full(shape, T(0)); }
  static TensorT scalar(T value) { return constant(Shape{1}, {value}); }

  /// Leaf registered on a tape; backward() accumulates dLoss/dLeaf into grad().
  static TensorT leaf(TapeT<T>& tape, Shape shape, Storage values) {
    check_size(shape, values.size());
    TensorT t;
    t.shape_ = shape;
    t.data_ = std::make_shared<Storage>(std::move(values));
    t.grad_ = std::make_shared<Storage>(static_cast<size_t>(shape.numel()), T(0));
    t.tape_ = &tape;
    t.node_ = tape.add_leaf(shape.numel(), t.grad_);
    return t;
  }

  /// Leaf whose value/grad storage is shared with a persistent parameter.
  static TensorT leaf_shared(TapeT<T>& tape, Shape shape,
                             std::shared_ptr<Storage> values,
                             std::shared_ptr<Storage> grad) {
    check_size(shape, values->size());
    TensorT t;
    t.shape_ = shape;
    t.data_ = std::move(values);
    t.grad_ = std::move(grad);
    t.tape_ = &tape;
    t.node_ = tape.add_leaf(shape.numel(), t.grad_);
    return t;
  }

  static TensorT from_node(Shape shape, std::shared_ptr<const Storage> data,
                           TapeT<T>* tape, int node) {
    TensorT t;
    t.shape_ = shape;
    t.data_ = std::move(data);
    t.tape_ = tape;
    t.node_ = node;
    return t;
  }

  const Shape& shape() const { return shape_; }
  i64 numel() const { return shape_.numel(); }
  bool defined() const { return data_ != nullptr; }

  std::span<const T> data() const {
    return {data_->data(), data_->size()};
  }
  std::shared_ptr<const Storage> storage() const { return data_; }
  Storage vec() const { return *data_; }

  T item() const {
    if (numel() != 1) fail(ErrorCode::NotScalar, "item() on " + shape_.str());
    return (*data_)[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  TapeT<T>* tape() const { return tape_; }
  int node() const { return node_; }
  bool requires_grad() const { return tape_ != nullptr; }

  bool has_grad() const { return grad_ != nullptr; }
  /// Leaf gradient accumulated by the last backward pass.
  TensorT grad() const {
    if (!grad_) fail(ErrorCode::DetachedGraph, "grad() requires a leaf tensor");
    return constant(shape_, *grad_);
  }
  std::shared_ptr<Storage> grad_buffer() const { return grad_; }

  /// Same values, detached from any tape.
  TensorT detached() const {
    TensorT t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

 private:
  static void check_size(const Shape& s, size_t n) {
    if (static_cast<size_t>(s.numel()) != n)
      fail(ErrorCode::ShapeMismatch,
           "storage size " + std::to_string(n) + " != shape " + s.str());
  }

  Shape shape_;
  std::shared_ptr<const Storage> data_;
  std::shared_ptr<Storage> grad_;  // leaves only
  TapeT<T>* tape_ = nullptr;
  int node_ = -1;
};

template <typename T>
class TapeT {
 public:
  /// Resolves the gradient buffer of a parent slot, allocating zeros on first use.
  using GradFetch = std::function<std::span<T>(int)>;
  using BackFn = std::function<void(std::span<const T>, const GradFetch&)>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  int add_leaf(i64 size, std::shared_ptr<std::vector<T>> external_grad) {
    nodes_.push_back(Node{{}, size, nullptr, std::move(external_grad)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int add_node(std::vector<int> parents, i64 size, BackFn back) {
    nodes_.push_back(Node{std::move(parents), size, std::move(back), nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from a scalar loss. Leaf gradients accumulate additively
  /// into their external buffers; a tape can be swept only once.
  void backward(const TensorT<T>& loss) {
    if (!loss.on_tape() || loss.tape() != this)
      fail(ErrorCode::DetachedGraph, "loss is not connected to this tape");
    if (loss.numel() != 1) fail(ErrorCode::NotScalar, "loss shape " + loss.shape().str());
    if (consumed_)
      fail(ErrorCode::StaleTape, "backward() called twice without re-running forward");
    consumed_ = true;

    const int root = loss.node();
    std::vector<uint8_t> needed(nodes_.size(), 0);
    needed[static_cast<size_t>(root)] = 1;
    for (int i = root; i >= 0; --i) {
      if (!needed[static_cast<size_t>(i)]) continue;
      for (int p : nodes_[static_cast<size_t>(i)].parents) needed[static_cast<size_t>(p)] = 1;
    }

    std::vector<std::vector<T>> grads(nodes_.size());
    grads[static_cast<size_t>(root)].assign(1, T(1));

    for (int i = root; i >= 0; --i) {
      auto& node = nodes_[static_cast<size_t>(i)];
      auto& g = grads[static_cast<size_t>(i)];
      if (!needed[static_cast<size_t>(i)] || g.empty()) continue;
      if (node.leaf_grad) {
        auto& dst = *node.leaf_grad;
        for (size_t j = 0; j < dst.size(); ++j) dst[j] += g[j];
      }
      if (node.back) {
        auto fetch = [&](int slot) -> std::span<T> {
          const int pid = node.parents[static_cast<size_t>(slot)];
          auto& pg = grads[static_cast<size_t>(pid)];
          if (pg.empty()) pg.assign(static_cast<size_t>(nodes_[static_cast<size_t>(pid)].size), T(0));
          return {pg.data(), pg.size()};
        };
        node.back({g.data(), g.size()}, fetch);
      }
      g.clear();
      g.shrink_to_fit();
    }
  }

 private:
  struct Node {
    std::vector<int> parents;
    i64 size;
    BackFn back;                                  // null for leaves
    std::shared_ptr<std::vector<T>> leaf_grad;    // leaves only
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// A named trainable value. Forward passes view it either as a tape leaf
/// (training) or as a constant (inference); the optimizer mutates value and
/// reads/clears grad between passes.
template <typename T>
struct ParameterT {
  std::string name;
  Shape shape;
  std::shared_ptr<std::vector<T>> value;
  std::shared_ptr<std::vector<T>> grad;
  bool decay = true;  // weight-decay eligible

  static ParameterT create(std::string name, Shape shape, std::vector<T> init,
                           bool decay = true) {
    if (static_cast<size_t>(shape.numel()) != init.size())
      fail(ErrorCode::ShapeMismatch, "parameter " + name + " init size");
    ParameterT p;
    p.name = std::move(name);
    p.shape = shape;
    p.value = std::make_shared<std::vector<T>>(std::move(init));
    p.grad = std::make_shared<std::vector<T>>(static_cast<size_t>(shape.numel()), T(0));
    p.decay = decay;
    return p;
  }

  i64 numel() const { return shape.numel(); }

  TensorT<T> use(TapeT<T>& tape) const {
    return TensorT<T>::leaf_shared(tape, shape, value, grad);
  }
  TensorT<T> constant_view() const {
    return TensorT<T>::from_node(shape, value, nullptr, -1);
  }
  void zero_grad() { std::fill(grad->begin(), grad->end(), T(0)); }
};

/// Per-pass environment threaded through modules: the tape when gradients are
/// wanted, training-mode flag, and the RNG that draws dropout masks.
template <typename T>
struct PassContext {
  TapeT<T>* tape = nullptr;
  bool training = false;
  std::mt19937_64* rng = nullptr;

  TensorT<T> view(const ParameterT<T>& p) const {
    return tape ? p.use(*tape) : p.constant_view();
  }
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;
using Parameter = ParameterT<float>;

}  // namespace sdpl
