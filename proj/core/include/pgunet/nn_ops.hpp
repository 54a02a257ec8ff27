#pragma once

// Layer vocabulary for the U-net: convolution, pooling, nearest upsampling,
// ReLU, channel concatenation and the pixel-wise cross-entropy loss.
// Image tensors are channels-first, [N, C, H, W].

#include <cstdint>
#include <span>

#include "pgunet/tensor.hpp"

namespace pgu {

template <typename T>
struct Conv2dParams {
  BasicTensor<T> weight;  // [C_out, C_in, k, k]
  BasicTensor<T> bias;    // [C_out]
  std::size_t stride = 1;
  std::size_t padding = 1;
};

/// Direct cross-correlation, computed as patch-matrix x weight GEMM.
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const Conv2dParams<T>& params);

/// Disjoint 2x2 max. Gradient goes to the first maximum in row-major window order.
template <typename T>
BasicTensor<T> maxpool2(const BasicTensor<T>& input);

/// Disjoint 2x2 mean (used for the input image pyramid).
template <typename T>
BasicTensor<T> avgpool2(const BasicTensor<T>& input);

/// out[n,c,i,j] = in[n,c,i/2,j/2].
template <typename T>
BasicTensor<T> upsample2_nearest(const BasicTensor<T>& input);

/// max(0, x); the subgradient at 0 is 0.
template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Channels [begin, end) of a [N,C,H,W] tensor.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, std::size_t begin, std::size_t end);

/// Mean over all N*H*W pixels of -log softmax(logits)[label]. `labels` is
/// row-major [N,H,W] with values in [0, C).
template <typename T>
BasicTensor<T> softmax_ce_loss(const BasicTensor<T>& logits, std::span<const std::uint8_t> labels);

namespace testing {

// Corrupts the conv2d weight gradient. Exists so the gradient-check suite can
// be shown to catch a broken backward rule.
void set_conv2d_backward_fault(bool enabled);
bool conv2d_backward_fault();

}  // namespace testing

}  // namespace pgu
