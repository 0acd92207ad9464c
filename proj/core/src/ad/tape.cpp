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

#include "petsynth/ad/tape.hpp"

#include <algorithm>
#include <sstream>

#include "petsynth/error.hpp"

namespace petsynth::ad {

Shape::Shape(std::initializer_list<int> extents) {
  if (extents.size() > static_cast<std::size_t>(kMaxRank))
    throw ShapeError("shape rank exceeds " + std::to_string(kMaxRank));
  for (int e : extents) {
    if (e <= 0) throw ShapeError("shape extents must be positive");
    dims[static_cast<std::size_t>(rank++)] = e;
  }
}

std::size_t Shape::size() const {
  std::size_t n = 1;
  for (int i = 0; i < rank; ++i) n *= static_cast<std::size_t>(dims[static_cast<std::size_t>(i)]);
  return n;
}

bool operator==(const Shape& a, const Shape& b) {
  if (a.rank != b.rank) return false;
  for (int i = 0; i < a.rank; ++i)
    if (a[i] != b[i]) return false;
  return true;
}

std::string to_string(const Shape& s) {
  std::ostringstream out;
  out << "(";
  for (int i = 0; i < s.rank; ++i) out << (i ? "," : "") << s[i];
  out << ")";
  return out.str();
}

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Parameter: return "parameter";
    case OpKind::Conv3d: return "conv3d";
    case OpKind::MaxPool3d: return "maxpool3d";
    case OpKind::UpsampleTrilinear: return "upsample_trilinear";
    case OpKind::GroupNorm: return "group_norm";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Add: return "add";
    case OpKind::Multiply: return "multiply";
    case OpKind::ConcatChannels: return "concat_channels";
    case OpKind::Sum: return "sum";
    case OpKind::Scale: return "scale";
    case OpKind::Custom: return "custom";
  }
  return "unknown";
}

template <class T>
const typename Tape<T>::Node& Tape<T>::node(NodeId id) const {
  if (id.value >= nodes_.size()) throw ContractError("node id out of range");
  return nodes_[id.value];
}

template <class T>
typename Tape<T>::Node& Tape<T>::node(NodeId id) {
  if (id.value >= nodes_.size()) throw ContractError("node id out of range");
  return nodes_[id.value];
}

template <class T>
NodeId Tape<T>::input(Shape shape, std::vector<T> values) {
  if (values.size() != shape.size()) throw ShapeError("input value size does not match shape");
  Node n;
  n.shape = shape;
  n.value = std::move(values);
  n.op = OpKind::Input;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
NodeId Tape<T>::parameter(Shape shape, std::vector<T> values) {
  if (values.size() != shape.size()) throw ShapeError("parameter value size does not match shape");
  Node n;
  n.shape = shape;
  n.value = std::move(values);
  n.op = OpKind::Parameter;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
NodeId Tape<T>::record(OpKind op, Shape shape, std::vector<T> value, std::vector<NodeId> parents,
                       BackwardFn backward) {
  if (value.size() != shape.size()) throw ShapeError("recorded value size does not match shape");
  Node n;
  n.shape = shape;
  n.value = std::move(value);
  n.op = op;
  if (grad_enabled_) {
    n.requires_grad = std::any_of(parents.begin(), parents.end(),
                                  [&](NodeId p) { return node(p).requires_grad; });
    if (n.requires_grad) n.backward = std::move(backward);
  }
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
void Tape<T>::release(NodeId id) {
  auto& n = node(id);
  if (n.requires_grad) throw ContractError("cannot release a node that backward still needs");
  std::vector<T>().swap(n.value);
}

template <class T>
std::span<T> Tape<T>::grad_slot(NodeId id) {
  const auto& n = node(id);
  if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
  auto& g = grads_[id.value];
  if (g.empty()) g.assign(n.shape.size(), T(0));
  return g;
}

template <class T>
std::span<const T> Tape<T>::grad(NodeId id) const {
  if (id.value >= grads_.size() || grads_[id.value].empty())
    throw ContractError("node has no gradient");
  return grads_[id.value];
}

template <class T>
bool Tape<T>::has_grad(NodeId id) const {
  return id.value < grads_.size() && !grads_[id.value].empty();
}

template <class T>
void Tape<T>::clear_grads() {
  grads_.clear();
}

template <class T>
std::span<const T> Gradients<T>::operator[](NodeId id) const {
  auto it = grads_.find(id.value);
  if (it == grads_.end()) throw ContractError("no gradient recorded for node");
  return it->second;
}

template <class T>
Gradients<T> backward(Tape<T>& tape, NodeId seed) {
  if (tape.shape(seed).size() != 1) throw ContractError("backward seed must be scalar");
  tape.clear_grads();
  Gradients<T> out;
  if (tape.requires_grad(seed)) {
    tape.grad_slot(seed)[0] = T(1);
    for (std::uint32_t i = seed.value + 1; i-- > 0;) {
      const NodeId id{i};
      auto& n = tape.node(id);
      if (!n.requires_grad || !n.backward || !tape.has_grad(id)) continue;
      n.backward(tape, id);
    }
  }
  for (std::uint32_t i = 0; i < tape.nodes_.size(); ++i) {
    const auto& n = tape.nodes_[i];
    if (n.op != OpKind::Parameter) continue;
    if (tape.has_grad(NodeId{i}))
      out.grads_.emplace(i, std::move(tape.grads_[i]));
    else
      out.grads_.emplace(i, std::vector<T>(n.shape.size(), T(0)));
  }
  tape.clear_grads();
  return out;
}

template class Tape<float>;
template class Tape<double>;
template class Gradients<float>;
template class Gradients<double>;
template Gradients<float> backward(Tape<float>&, NodeId);
template Gradients<double> backward(Tape<double>&, NodeId);

}  // namespace petsynth::ad
