#pragma once

#include <array>
#include <deque>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "movelab/array.hpp"

namespace movelab {

/// Primitive operations recorded on the tape.
enum class Op : uint8_t {
  leaf,
  constant,
  add,
  mul,
  mul_bcast_last,
  scale,
  matmul,
  transpose,
  reshape,
  sigmoid,
  softmax_lastdim,
  causal_softmax,
  gelu,
  rmsnorm,
  rope,
  gather,
  cross_entropy,
  reduce_sum,
  gated_slot_mix,
};

const char* op_name(Op op);

/// Flat double buffer for node storage. Allocation skips value-init where the
/// producing kernel overwrites every element; reshape nodes alias the same
/// storage instead of copying.
class DBuffer {
 public:
  DBuffer() = default;
  static DBuffer uninitialized(size_t n) {
    DBuffer b;
    b.ptr_ = std::shared_ptr<double[]>(new double[n]);  // default-init: no zero fill
    b.size_ = n;
    return b;
  }
  static DBuffer zeros(size_t n) {
    DBuffer b;
    b.ptr_ = std::shared_ptr<double[]>(new double[n]());  // value-init
    b.size_ = n;
    return b;
  }
  static DBuffer copy_of(std::span<const double> src) {
    DBuffer b = uninitialized(src.size());
    std::copy(src.begin(), src.end(), b.data());
    return b;
  }
  size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  double* data() { return ptr_.get(); }
  const double* data() const { return ptr_.get(); }
  double& operator[](size_t i) { return ptr_[i]; }
  double operator[](size_t i) const { return ptr_[i]; }
  double* begin() { return ptr_.get(); }
  double* end() { return ptr_.get() + size_; }
  const double* begin() const { return ptr_.get(); }
  const double* end() const { return ptr_.get() + size_; }
  std::span<const double> cspan() const { return {ptr_.get(), size_}; }

 private:
  std::shared_ptr<double[]> ptr_;
  size_t size_ = 0;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
class Value {
 public:
  Value() = default;
  Value(Tape* tape, int32_t index) : tape_(tape), index_(index) {}
  Tape* tape() const { return tape_; }
  int32_t index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }
  const Shape& shape() const;
  std::span<const double> data() const;
  Array array() const;

 private:
  Tape* tape_ = nullptr;
  int32_t index_ = -1;
};

/// Append-only record of primitive operations with eagerly computed forward
/// values. Single-owner: a tape must not be shared across concurrent tasks.
/// One backward pass populates a gradient for every leaf reachable from the
/// loss node; unreachable leaves report zero gradients.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Value leaf(const Array& init);
  Value constant(const Array& value);
  Value constant(Array&& value);

  /// Reverse-mode sweep from a scalar loss. Rejects non-scalar losses.
  void backward(Value loss);

  Array value(Value v) const;
  Array grad(Value v) const;  // zeros if the node was not reached
  std::span<const double> value_data(Value v) const;
  std::span<const double> grad_data(Value v) const;
  const Shape& shape(Value v) const;

  size_t node_count() const { return nodes_.size(); }
  bool backward_run() const { return backward_run_; }

  /// Introspection for cost accounting: op kind, output shape, input shapes,
  /// and the multiply-add count of the node's forward pass (matmul only;
  /// other ops report 0).
  struct NodeInfo {
    Op op;
    Shape shape;
    std::vector<Shape> inputs;
    int64_t madds = 0;
  };
  NodeInfo node_info(size_t index) const;

  struct Node {
    Op op;
    Shape shape;
    std::array<int32_t, 3> in{{-1, -1, -1}};
    DBuffer val;
    DBuffer grad;
    std::vector<double> aux;     // op-specific cached intermediates
    std::vector<int64_t> iattr;  // op-specific integer attributes
    double dattr = 0.0;
  };

 private:
  friend struct TapeAccess;

  std::deque<Node> nodes_;  // stable element references across appends
  bool backward_run_ = false;
};

// ---- primitive operations ---------------------------------------------------
// All of these record a node on the operands' tape and compute the forward
// value eagerly. Shape violations throw std::invalid_argument with both
// shapes in the message.

/// Batched matrix product a[..,m,k] x b[..,k,n] -> [..,m,n]. Leading batch
/// extents broadcast numpy-style (size-1 extents stretch, missing extents
/// pad on the left).
Value matmul(Value a, Value b);
Value add(Value a, Value b);
/// Element-wise product, same shape.
Value mul(Value a, Value b);
/// y[..., j] = x[..., j] * s[...]; s has x's shape minus the last extent.
Value mul_bcast_last(Value x, Value s);
Value scale(Value x, double c);
Value sigmoid(Value x);
/// Numerically stable softmax over the last extent (max-subtraction).
Value softmax_lastdim(Value x);
/// Softmax over the last extent restricted to columns j <= r + (C - R) for
/// row r of the trailing [R, C] block; masked entries are exactly zero.
/// R == C gives the causal attention pattern; R == 1 allows every column.
Value causal_softmax(Value x);
Value gelu(Value x);
/// Root-mean-square normalization over the last extent with a learned gain.
Value rmsnorm(Value x, Value gain, double eps = 1e-8);
/// Rotary position transform on layout [..., T, H, W] (W even); position of
/// row t is t + offset.
Value rope(Value x, int64_t offset, double base = 10000.0);
/// Row gather: table[V, W] indexed by ids -> [N, W]. Gradients scatter-add
/// into the gathered rows only. Out-of-range ids are rejected with the index.
Value gather(Value table, std::span<const int64_t> ids);
/// Per-row negative log-softmax at the target index: logits[N, V] -> [N].
Value cross_entropy(Value logits, std::span<const int64_t> targets);
/// Sum of all elements -> scalar (empty shape).
Value reduce_sum(Value x);
/// Gated slot mixing over groups: v[..., G, W], mt[..., M, G, W],
/// gates[..., G, K]. With gates_include_std, K == M+1 and
///   out = gates[...,g,0] * v + sum_i gates[...,g,i] * mt[...,i-1,g,:];
/// otherwise K == M and the standard term enters ungated.
Value gated_slot_mix(Value v, Value mt, Value gates, bool gates_include_std);

Value reshape(Value x, Shape shape);
Value transpose(Value x, std::span<const int64_t> perm);
Value transpose(Value x, std::initializer_list<int64_t> perm);

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }
inline Value operator*(Value a, double c) { return scale(a, c); }
inline Value operator*(double c, Value a) { return scale(a, c); }

}  // namespace movelab
