// Copyright 2026 The petsynth Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Reverse-mode automatic differentiation over small dense arrays.
//
// Execution is eager: every op computes its value when it is recorded and
// registers a closure that maps the node's output gradient onto its parents.
// Nodes are stored in creation order, which is a topological order, so
// backward() is a single reverse sweep.

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace petsynth::ad {

/// Row-major shape of rank 0..5. Volumes use (h, w, d, c) with c varying
/// fastest in memory; conv kernels use (k, k, k, c_in, c_out).
struct Shape {
  static constexpr int kMaxRank = 5;

  std::array<int, kMaxRank> dims{};
  int rank = 0;

  Shape() = default;
  Shape(std::initializer_list<int> extents);

  static Shape scalar() { return {}; }
  static Shape volume(int h, int w, int d, int c) { return {h, w, d, c}; }

  std::size_t size() const;
  int operator[](int i) const { return dims[static_cast<std::size_t>(i)]; }

  int h() const { return dims[0]; }
  int w() const { return dims[1]; }
  int d() const { return dims[2]; }
  int c() const { return dims[3]; }
  std::size_t voxels() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  friend bool operator==(const Shape& a, const Shape& b);
};

std::string to_string(const Shape& s);

struct NodeId {
  std::uint32_t value = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class OpKind : std::uint8_t {
  Input,
  Parameter,
  Conv3d,
  MaxPool3d,
  UpsampleTrilinear,
  GroupNorm,
  Relu,
  Sigmoid,
  Add,
  Multiply,
  ConcatChannels,
  Sum,
  Scale,
  Custom,
};

std::string_view op_name(OpKind op);

template <class T>
class Tape;
template <class T>
class Gradients;
template <class T>
Gradients<T> backward(Tape<T>& tape, NodeId seed);

template <class T>
class Tape {
 public:
  /// Called during backward with the node's accumulated output gradient
  /// available through grad(self). Must add into parent gradient slots.
  using BackwardFn = std::function<void(Tape& tape, NodeId self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// Constant leaf; never receives a gradient.
  NodeId input(Shape shape, std::vector<T> values);
  /// Weight leaf; backward() reports its gradient.
  NodeId parameter(Shape shape, std::vector<T> values);

  /// Records a computed node. requires_grad is inherited from the parents.
  /// With gradients disabled the closure is dropped.
  NodeId record(OpKind op, Shape shape, std::vector<T> value, std::vector<NodeId> parents,
                BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(NodeId id) const { return node(id).shape; }
  std::span<const T> value(NodeId id) const { return node(id).value; }
  OpKind op(NodeId id) const { return node(id).op; }
  const std::vector<NodeId>& parents(NodeId id) const { return node(id).parents; }
  bool requires_grad(NodeId id) const { return node(id).requires_grad; }
  bool is_parameter(NodeId id) const { return node(id).op == OpKind::Parameter; }

  /// With gradients disabled no closures are kept, which is the inference mode.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Frees a node's value. Only legal in inference mode, for intermediates
  /// that will not be read again.
  void release(NodeId id);

  // Gradient slots, used by backward closures.
  std::span<T> grad_slot(NodeId id);
  std::span<const T> grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  void clear_grads();

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    OpKind op = OpKind::Input;
    std::vector<NodeId> parents;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(NodeId id) const;
  Node& node(NodeId id);

  template <class U>
  friend class Gradients;
  template <class U>
  friend Gradients<U> backward(Tape<U>& tape, NodeId seed);

  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool grad_enabled_ = true;
};

/// Gradients of a scalar seed with respect to every parameter node.
template <class T>
class Gradients {
 public:
  std::span<const T> operator[](NodeId id) const;
  bool contains(NodeId id) const { return grads_.contains(id.value); }
  std::size_t size() const { return grads_.size(); }

 private:
  template <class U>
  friend Gradients<U> backward(Tape<U>& tape, NodeId seed);
  std::unordered_map<std::uint32_t, std::vector<T>> grads_;
};

/// Reverse sweep from a scalar node. Every parameter on the tape gets an
/// entry, zero-filled when it does not influence the seed.
template <class T>
Gradients<T> backward(Tape<T>& tape, NodeId seed);

extern template class Tape<float>;
extern template class Tape<double>;
extern template class Gradients<float>;
extern template class Gradients<double>;
extern template Gradients<float> backward(Tape<float>&, NodeId);
extern template Gradients<double> backward(Tape<double>&, NodeId);

}  // namespace petsynth::ad
