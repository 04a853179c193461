#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "crossray/error.hpp"

namespace crossray {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;

inline constexpr NodeId kNoNode = -1;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <std::floating_point T>
class Tape;

/// Dense row-major array. Values are shared and immutable once a tensor is
/// recorded on a tape; `tape()`/`node()` identify the recorded node, if any.
template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
    check_shape();
    if (data_->size() != shape_numel(shape_)) {
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_->size()) + " values");
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_->size(); }

  std::span<const T> values() const noexcept { return *data_; }
  const T* data() const noexcept { return data_->data(); }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape_) + " is not a scalar");
    return (*data_)[0];
  }

  /// Writable view. Untracked tensors only; shared storage is copied first.
  std::span<T> mutable_values() {
    if (tape_ != nullptr) throw Error("tensor: cannot mutate a tape-tracked value");
    if (data_.use_count() > 1) data_ = std::make_shared<std::vector<T>>(*data_);
    return *data_;
  }

  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape<T>* tape() const noexcept { return tape_; }
  NodeId node() const noexcept { return node_; }

  /// Same values, detached from any tape.
  Tensor detach() const {
    Tensor out = *this;
    out.tape_ = nullptr;
    out.node_ = kNoNode;
    return out;
  }

  Tensor clone() const {
    Tensor out(shape_, std::vector<T>(*data_));
    return out;
  }

  std::shared_ptr<const std::vector<T>> storage() const noexcept { return data_; }

  /// Internal: attaches this value to a recorded node.
  Tensor attached(Tape<T>* tape, NodeId node) const {
    Tensor out = *this;
    out.tape_ = tape;
    out.node_ = node;
    return out;
  }

  /// Internal: reinterprets the same storage under a new shape.
  Tensor with_shape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
    }
    Tensor out = detach();
    out.shape_ = std::move(shape);
    out.check_shape();
    return out;
  }

 private:
  void check_shape() const {
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  Tape<T>* tape_ = nullptr;
  NodeId node_ = kNoNode;
};

enum class OpKind {
  kLeaf,
  kMatmul,
  kConv2d,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kRelu,
  kSoftplus,
  kSigmoid,
  kSin,
  kCos,
  kExp,
  kMean,
  kSum,
  kReshape,
  kConcat,
  kAdaptiveAvgPool,
  kSpatialCovariance,
  kL1Norm,
  kSquaredL2Norm,
  kBilinearSample,
  kTranspose,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScalarMul: return "scalar-mul";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSin: return "sin";
    case OpKind::kCos: return "cos";
    case OpKind::kExp: return "exp";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcat: return "concat";
    case OpKind::kAdaptiveAvgPool: return "adaptive-average-pool";
    case OpKind::kSpatialCovariance: return "spatial-covariance";
    case OpKind::kL1Norm: return "l1-norm";
    case OpKind::kSquaredL2Norm: return "squared-l2-norm";
    case OpKind::kBilinearSample: return "bilinear-sample";
    case OpKind::kTranspose: return "transpose";
  }
  return "unknown";
}

/// Gradient buffers of a node's inputs during the backward pass; a null
/// entry means the input is a constant.
template <std::floating_point T>
using GradSlots = std::vector<T*>;

/// Append-only record of differentiable operations. Single writer.
template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(std::span<const T> grad_out, const GradSlots<T>& grad_in)>;

  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    std::size_t numel = 0;
    Shape shape;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf (a parameter).
  Tensor<T> leaf(const Tensor<T>& value) {
    Node n;
    n.kind = OpKind::kLeaf;
    n.numel = value.numel();
    n.shape = value.shape();
    nodes_.push_back(std::move(n));
    return value.detach().attached(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  NodeId record(OpKind kind, std::vector<NodeId> inputs, const Shape& shape, Backward backward) {
    const auto id = static_cast<NodeId>(nodes_.size());
    for (auto in : inputs) {
      if (in >= id) throw Error("tape: input node " + std::to_string(in) + " is not older than node " + std::to_string(id));
    }
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.numel = shape_numel(shape);
    n.shape = shape;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return id;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  Node& node_mut(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
  bool is_leaf(NodeId id) const { return node(id).kind == OpKind::kLeaf; }

 private:
  std::vector<Node> nodes_;
};

}  // namespace crossray
