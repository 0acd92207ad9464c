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

// Differentiable primitives over volume-shaped nodes (h, w, d, c).
// Shape errors are raised before anything is computed or recorded.

#include "petsynth/ad/tape.hpp"

namespace petsynth::ad {

enum class Padding : std::uint8_t { Same, Valid };

struct Conv3dOptions {
  int stride = 1;
  Padding padding = Padding::Same;
};

/// Cross-correlation of a (h,w,d,ci) input with a (k,k,k,ci,co) kernel plus a
/// (co) bias. Same padding gives ceil(dim/stride) outputs per axis, split
/// with the smaller half before the data.
template <class T>
NodeId conv3d(Tape<T>& tape, NodeId input, NodeId kernel, NodeId bias, Conv3dOptions opts = {});

/// 2x2x2 window, stride 2. The gradient of each block goes to its first
/// maximizing voxel in x-fastest order.
template <class T>
NodeId maxpool3d(Tape<T>& tape, NodeId input);

/// Doubles every spatial axis with the half-pixel (align-corners = false)
/// convention: output o samples input coordinate (o + 0.5) / 2 - 0.5, clamped.
template <class T>
NodeId upsample_trilinear(Tape<T>& tape, NodeId input);

/// Smallest admissible group count for c channels: gcd(min(8, c), c).
int default_groups(int channels);

template <class T>
NodeId group_norm(Tape<T>& tape, NodeId input, NodeId gamma, NodeId beta, int groups,
                  double eps = 1e-5);

enum class Activation : std::uint8_t { Relu, Sigmoid };

/// relu'(0) is taken as 0.
template <class T>
NodeId activation(Tape<T>& tape, Activation kind, NodeId input);

template <class T>
NodeId relu(Tape<T>& tape, NodeId input) {
  return activation(tape, Activation::Relu, input);
}
template <class T>
NodeId sigmoid(Tape<T>& tape, NodeId input) {
  return activation(tape, Activation::Sigmoid, input);
}

enum class Combine : std::uint8_t { Add, Multiply, ConcatChannels };

/// Add needs identical shapes. Multiply also accepts one single-channel
/// operand, broadcast across the other's channels. Concat needs identical
/// spatial dims and stacks a's channels before b's.
template <class T>
NodeId combine(Tape<T>& tape, Combine kind, NodeId a, NodeId b);

template <class T>
NodeId add(Tape<T>& tape, NodeId a, NodeId b) {
  return combine(tape, Combine::Add, a, b);
}
template <class T>
NodeId multiply(Tape<T>& tape, NodeId a, NodeId b) {
  return combine(tape, Combine::Multiply, a, b);
}
template <class T>
NodeId concat_channels(Tape<T>& tape, NodeId a, NodeId b) {
  return combine(tape, Combine::ConcatChannels, a, b);
}

/// Scalar sum of every element, accumulated in double.
template <class T>
NodeId sum(Tape<T>& tape, NodeId input);

template <class T>
NodeId scale(Tape<T>& tape, NodeId input, double factor);

}  // namespace petsynth::ad
