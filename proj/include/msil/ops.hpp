#pragma once

#include "msil/tensor.hpp"

namespace msil {

// Elementwise. `b` may also be N×C×1×1 and is then broadcast over H and W.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// Channel-axis concatenation; `a` fills [0,Ca), `b` fills [Ca,Ca+Cb).
Tensor concat_channels(const Tensor& a, const Tensor& b);
// Channels [begin, begin+count).
Tensor slice_channels(const Tensor& x, int begin, int count);

Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);

// N×C×H×W -> N×C×1×1. Max ties resolve to the first row-major position.
Tensor global_avg_pool(const Tensor& x);
Tensor global_max_pool(const Tensor& x);
// Non-overlapping 2×2 mean; H and W must be even.
Tensor avg_pool2x2(const Tensor& x);

// Sum of every entry, as a 1×1×1×1 scalar.
Tensor sum(const Tensor& x);
// Sum of x * weights where `weights` is a constant (no gradient to it).
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);

// Stride-1 cross-correlation with zero padding (k-1)/2, k odd.
// weight: Cout×Cin×k×k, bias: 1×Cout×1×1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);

void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace msil
