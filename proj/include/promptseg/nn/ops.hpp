#pragma once

#include <optional>
#include <type_traits>
#include <vector>

#include "promptseg/nn/autograd.hpp"

namespace promptseg::nn {

// Every op records itself for backward when any input requires a gradient.
// Spatial tensors are channel-first [C,H,W] for convolutions and resampling;
// layer_norm and linear act on the trailing axis of any rank.

inline constexpr double kLayerNormEps = 1e-6;

// Optional operand (bias). Non-deduced so a plain Var converts implicitly.
template <typename T>
using OptVar = std::type_identity_t<std::optional<Var<T>>>;

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, double s);
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
// [H,W,C] -> [C,H,W]
template <typename T>
Var<T> hwc_to_chw(const Var<T>& a);
// [C,H,W] -> [H,W,C]
template <typename T>
Var<T> chw_to_hwc(const Var<T>& a);
// Channels [begin, end) of a [C,H,W] tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& a, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts);

// x [C_in,H,W], w [C_out, C_in/groups, k, k], b [C_out] (optional).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const OptVar<T>& b, int stride, int padding,
              int groups = 1);

// x [C_in,H,W], w [C_in,C_out,2,2], b [C_out] -> [C_out,2H,2W]. Only kernel 2
// with stride 2 is supported.
template <typename T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w, const OptVar<T>& b, int stride = 2);

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, double eps = kLayerNormEps);

// Exact form x * Phi(x) with Phi the standard normal CDF (erf based).
template <typename T>
Var<T> gelu(const Var<T>& x);

// x [..., C_in], w [C_out, C_in], b [C_out] (optional) -> [..., C_out]
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const OptVar<T>& b);

// Scaled dot-product self-attention over all L tokens of x [L,C]. Projection
// matrices are [C,C], applied as y = W x per token (same as linear without
// bias).
template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const Var<T>& wq, const Var<T>& wk, const Var<T>& wv,
                            const Var<T>& wo, int heads);

// Softmax matrices of multi_head_attention, shape [heads, L, L]. Not recorded.
template <typename T>
TensorT<T> attention_probs(const TensorT<T>& x, const TensorT<T>& wq, const TensorT<T>& wk, int heads);

// Bilinear resize of [C,H,W] with align_corners=false sampling:
// src = (dst + 0.5) * in/out - 0.5, clamped at the low edge.
template <typename T>
Var<T> bilinear_upsample(const Var<T>& x, std::size_t out_h, std::size_t out_w);

}  // namespace promptseg::nn
