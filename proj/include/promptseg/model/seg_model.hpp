#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "promptseg/model/config.hpp"
#include "promptseg/nn/ops.hpp"

namespace promptseg::model {

template <typename T>
using Param = nn::Parameter<T>;

template <typename T>
struct LayerNormParams {
  Param<T> gamma, beta;
};

// Frozen. Strided conv with kernel = stride = patch, plus an absolute
// positional embedding laid out on the token grid.
template <typename T>
struct PatchEmbedParams {
  Param<T> weight;     // [C, 3, patch, patch]
  Param<T> bias;       // [C]
  Param<T> pos_embed;  // [H_p, W_p, C]
};

// Frozen pre-norm block: x + Attn(LN1(x)), then + MLP(LN2(.)).
template <typename T>
struct TransformerBlockParams {
  LayerNormParams<T> ln1;
  Param<T> wq, wk, wv, wo;  // [C, C], no bias
  LayerNormParams<T> ln2;
  Param<T> mlp_w1, mlp_b1;  // [M, C], [M]
  Param<T> mlp_w2, mlp_b2;  // [C, M], [C]
};

// Trainable bottleneck on the token grid:
//   GELU(LN(W_out(GELU(LN(DW3(GELU(LN(W_in(f)))))))))
// W_in and W_out are separate 1x1 convs (C -> C_h -> C).
template <typename T>
struct PromptLayerParams {
  Param<T> w_in, b_in;  // [C_h, C, 1, 1], [C_h]
  LayerNormParams<T> ln_in;
  Param<T> dw, b_dw;  // [C_h, 1, 3, 3], [C_h]
  LayerNormParams<T> ln_dw;
  Param<T> w_out, b_out;  // [C, C_h, 1, 1], [C]
  LayerNormParams<T> ln_out;
};

inline constexpr std::array<int, 4> kMultiScaleKernels{1, 3, 5, 7};

// Trainable. Two 2x2/stride-2 transpose convs (C -> C/2 -> C/4), a 4-group
// multi-scale conv with kernels {1,3,5,7}, and a per-pixel linear classifier.
template <typename T>
struct TaskHeadParams {
  Param<T> up1_w, up1_b;  // [C, C/2, 2, 2], [C/2]
  Param<T> up2_w, up2_b;  // [C/2, C/4, 2, 2], [C/4]
  std::array<Param<T>, 4> ms_w;  // [C/16, C/16, k, k]
  std::array<Param<T>, 4> ms_b;  // [C/16]
  Param<T> cls_w, cls_b;  // [K, C/4], [K]
};

template <typename T>
struct SegModel {
  ViTConfig config;
  PatchEmbedParams<T> patch_embed;
  std::vector<TransformerBlockParams<T>> blocks;
  std::vector<PromptLayerParams<T>> prompts;
  TaskHeadParams<T> head;

  // Stable order: patch embedding, blocks 0..N-1, prompts 0..N-1, head.
  std::vector<Param<T>*> parameters();
  std::vector<const Param<T>*> parameters() const;
  // Prompts 0..N-1 (each in declaration order) followed by the head.
  std::vector<Param<T>*> trainable_parameters();
  std::vector<const Param<T>*> backbone_parameters() const;

  void zero_grad() const;

  template <typename U>
  SegModel<U> cast() const;
};

struct ParameterCounts {
  std::size_t backbone = 0;
  std::size_t prompts = 0;
  std::size_t head = 0;
  std::size_t trainable() const { return prompts + head; }
  std::size_t total() const { return backbone + prompts + head; }
};

template <typename T>
ParameterCounts count_parameters(const SegModel<T>& m);

// Backbone weights and prompt conv weights: truncated normal (std 0.02).
// Head weights: truncated normal with std sqrt(2/fan_in). All biases zero,
// layer-norm gamma 1 / beta 0 except the prompt's output norm, whose gamma is
// 0 so every prompt layer outputs exactly zero at init.
template <typename T>
SegModel<T> init_model(const ViTConfig& config, std::uint64_t seed);

// Test-only switches for the prompt layer's stages. stage_norm_act[i] gates
// the LN+GELU after W_in (0), DW3 (1) and W_out (2).
struct PromptVariant {
  bool depthwise = true;
  std::array<bool, 3> stage_norm_act{true, true, true};
};

template <typename T>
nn::Var<T> patch_embed(const nn::Var<T>& image, const PatchEmbedParams<T>& p, const ViTConfig& cfg);

template <typename T>
nn::Var<T> prompt_forward(const nn::Var<T>& f, const PromptLayerParams<T>& p, const PromptVariant& variant = {});

template <typename T>
nn::Var<T> transformer_block(const nn::Var<T>& f, const TransformerBlockParams<T>& b, std::size_t heads);

struct EncodeOptions {
  bool use_prompts = true;
};

// f_1 = P(x); f_{i+1} = T_i(f_i + Prompt_i(f_i)). Returns [H_p, W_p, C].
template <typename T>
nn::Var<T> encode(const nn::Var<T>& image, const SegModel<T>& m, const EncodeOptions& opts = {});

// Task head up to the class logits on the 4x token grid: [K, 4H_p, 4W_p].
// Features are layer-normalized (no affine) before the first transpose conv.
template <typename T>
nn::Var<T> head_logits(const nn::Var<T>& f, const TaskHeadParams<T>& h);

// head_logits followed by a bilinear resize to out_size x out_size.
template <typename T>
nn::Var<T> head_forward(const nn::Var<T>& f, const TaskHeadParams<T>& h, std::size_t out_size);

// Full pipeline on a [3,S,S] image: logits [K,S,S].
template <typename T>
nn::Var<T> forward(const nn::TensorT<T>& image, const SegModel<T>& m, const EncodeOptions& opts = {});

// Per-pixel argmax of [K,S,S] logits (ties go to the lower class).
template <typename T>
std::vector<std::uint8_t> argmax_classes(const nn::TensorT<T>& logits);

}  // namespace promptseg::model
