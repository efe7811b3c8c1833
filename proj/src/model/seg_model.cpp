#include "promptseg/model/seg_model.hpp"

#include <cmath>

namespace promptseg::model {

using nn::Shape;
using nn::TensorT;
using nn::Var;

namespace {

// Visits groups in the stable order. `Fn(param, group)` with group 0 for the
// backbone, 1 for prompt layers, 2 for the head.
template <typename Model, typename Fn>
void visit(Model& m, Fn&& fn) {
  auto& pe = m.patch_embed;
  fn(pe.weight, 0);
  fn(pe.bias, 0);
  fn(pe.pos_embed, 0);
  for (auto& b : m.blocks) {
    for (auto* p : {&b.ln1.gamma, &b.ln1.beta, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2.gamma, &b.ln2.beta, &b.mlp_w1,
                    &b.mlp_b1, &b.mlp_w2, &b.mlp_b2}) {
      fn(*p, 0);
    }
  }
  for (auto& p : m.prompts) {
    for (auto* q : {&p.w_in, &p.b_in, &p.ln_in.gamma, &p.ln_in.beta, &p.dw, &p.b_dw, &p.ln_dw.gamma, &p.ln_dw.beta,
                    &p.w_out, &p.b_out, &p.ln_out.gamma, &p.ln_out.beta}) {
      fn(*q, 1);
    }
  }
  auto& h = m.head;
  fn(h.up1_w, 2);
  fn(h.up1_b, 2);
  fn(h.up2_w, 2);
  fn(h.up2_b, 2);
  for (std::size_t g = 0; g < 4; ++g) {
    fn(h.ms_w[g], 2);
    fn(h.ms_b[g], 2);
  }
  fn(h.cls_w, 2);
  fn(h.cls_b, 2);
}

template <typename T>
class Initializer {
 public:
  Initializer(std::uint64_t seed) : rng_(seed) {}

  Param<T> normal(std::string name, Shape shape, double std, bool trainable) {
    TensorT<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(rng_.truncated_normal(std));
    return {std::move(name), std::move(t), trainable, {}};
  }
  static Param<T> fill(std::string name, Shape shape, double v, bool trainable) {
    return {std::move(name), TensorT<T>(std::move(shape), static_cast<T>(v)), trainable, {}};
  }
  static LayerNormParams<T> layer_norm(const std::string& prefix, std::size_t c, bool trainable, double gamma = 1) {
    return {fill(prefix + ".gamma", {c}, gamma, trainable), fill(prefix + ".beta", {c}, 0.0, trainable)};
  }

 private:
  nn::Rng rng_;
};

constexpr double kInitStd = 0.02;

template <typename T>
Var<T> conv1x1(const Var<T>& hwc, const Param<T>& w, const Param<T>& b) {
  return nn::chw_to_hwc(nn::conv2d(nn::hwc_to_chw(hwc), nn::param(w), nn::param(b), 1, 0));
}

}  // namespace

template <typename T>
std::vector<Param<T>*> SegModel<T>::parameters() {
  std::vector<Param<T>*> out;
  visit(*this, [&](Param<T>& p, int) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<const Param<T>*> SegModel<T>::parameters() const {
  std::vector<const Param<T>*> out;
  visit(*this, [&](const Param<T>& p, int) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<Param<T>*> SegModel<T>::trainable_parameters() {
  std::vector<Param<T>*> out;
  visit(*this, [&](Param<T>& p, int group) {
    if (group != 0) out.push_back(&p);
  });
  return out;
}

template <typename T>
std::vector<const Param<T>*> SegModel<T>::backbone_parameters() const {
  std::vector<const Param<T>*> out;
  visit(*this, [&](const Param<T>& p, int group) {
    if (group == 0) out.push_back(&p);
  });
  return out;
}

template <typename T>
void SegModel<T>::zero_grad() const {
  visit(*this, [](const Param<T>& p, int) { p.zero_grad(); });
}

template <typename T>
template <typename U>
SegModel<U> SegModel<T>::cast() const {
  SegModel<U> out = init_model<U>(config, 0);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->trainable = src[i]->trainable;
  }
  return out;
}

template <typename T>
ParameterCounts count_parameters(const SegModel<T>& m) {
  ParameterCounts c;
  visit(m, [&](const Param<T>& p, int group) {
    const std::size_t n = p.value.numel();
    if (group == 0) c.backbone += n;
    if (group == 1) c.prompts += n;
    if (group == 2) c.head += n;
  });
  return c;
}

template <typename T>
SegModel<T> init_model(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  using Init = Initializer<T>;
  Init init(seed);
  const std::size_t c = cfg.embed_dim, ch = cfg.prompt_hidden, p = cfg.patch_size, g = cfg.grid();
  const std::size_t m = cfg.mlp_hidden();

  SegModel<T> model;
  model.config = cfg;
  model.patch_embed.weight = init.normal("patch_embed.weight", {c, 3, p, p}, kInitStd, false);
  model.patch_embed.bias = Init::fill("patch_embed.bias", {c}, 0.0, false);
  model.patch_embed.pos_embed = init.normal("patch_embed.pos_embed", {g, g, c}, kInitStd, false);

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string pre = "blocks." + std::to_string(i);
    TransformerBlockParams<T> b;
    b.ln1 = Init::layer_norm(pre + ".ln1", c, false);
    b.wq = init.normal(pre + ".attn.wq", {c, c}, kInitStd, false);
    b.wk = init.normal(pre + ".attn.wk", {c, c}, kInitStd, false);
    b.wv = init.normal(pre + ".attn.wv", {c, c}, kInitStd, false);
    b.wo = init.normal(pre + ".attn.wo", {c, c}, kInitStd, false);
    b.ln2 = Init::layer_norm(pre + ".ln2", c, false);
    b.mlp_w1 = init.normal(pre + ".mlp.w1", {m, c}, kInitStd, false);
    b.mlp_b1 = Init::fill(pre + ".mlp.b1", {m}, 0.0, false);
    b.mlp_w2 = init.normal(pre + ".mlp.w2", {c, m}, kInitStd, false);
    b.mlp_b2 = Init::fill(pre + ".mlp.b2", {c}, 0.0, false);
    model.blocks.push_back(std::move(b));
  }

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string pre = "prompts." + std::to_string(i);
    PromptLayerParams<T> q;
    q.w_in = init.normal(pre + ".w_in.weight", {ch, c, 1, 1}, kInitStd, true);
    q.b_in = Init::fill(pre + ".w_in.bias", {ch}, 0.0, true);
    q.ln_in = Init::layer_norm(pre + ".ln_in", ch, true);
    q.dw = init.normal(pre + ".dw.weight", {ch, 1, 3, 3}, kInitStd, true);
    q.b_dw = Init::fill(pre + ".dw.bias", {ch}, 0.0, true);
    q.ln_dw = Init::layer_norm(pre + ".ln_dw", ch, true);
    q.w_out = init.normal(pre + ".w_out.weight", {c, ch, 1, 1}, kInitStd, true);
    q.b_out = Init::fill(pre + ".w_out.bias", {c}, 0.0, true);
    q.ln_out = Init::layer_norm(pre + ".ln_out", c, true, 0.0);
    model.prompts.push_back(std::move(q));
  }

  const std::size_t c2 = c / 2, c4 = c / 4, cg = c4 / 4, k = cfg.num_classes;
  auto& h = model.head;
  auto fan = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  h.up1_w = init.normal("head.up1.weight", {c, c2, 2, 2}, fan(c), true);
  h.up1_b = Init::fill("head.up1.bias", {c2}, 0.0, true);
  h.up2_w = init.normal("head.up2.weight", {c2, c4, 2, 2}, fan(c2), true);
  h.up2_b = Init::fill("head.up2.bias", {c4}, 0.0, true);
  for (std::size_t gi = 0; gi < 4; ++gi) {
    const auto ks = static_cast<std::size_t>(kMultiScaleKernels[gi]);
    const std::string pre = "head.msconv." + std::to_string(gi);
    h.ms_w[gi] = init.normal(pre + ".weight", {cg, cg, ks, ks}, fan(cg * ks * ks), true);
    h.ms_b[gi] = Init::fill(pre + ".bias", {cg}, 0.0, true);
  }
  h.cls_w = init.normal("head.classifier.weight", {k, c4}, fan(c4), true);
  h.cls_b = Init::fill("head.classifier.bias", {k}, 0.0, true);
  return model;
}

template <typename T>
Var<T> patch_embed(const Var<T>& image, const PatchEmbedParams<T>& p, const ViTConfig& cfg) {
  const Shape expect{3, cfg.image_size, cfg.image_size};
  if (image.shape() != expect) {
    throw ShapeError("patch_embed: image shape " + nn::shape_str(image.shape()) + ", model expects " +
                     nn::shape_str(expect));
  }
  const int patch = static_cast<int>(cfg.patch_size);
  auto tokens = nn::conv2d(image, nn::param(p.weight), nn::param(p.bias), patch, 0);
  return nn::add(nn::chw_to_hwc(tokens), nn::param(p.pos_embed));
}

template <typename T>
Var<T> prompt_forward(const Var<T>& f, const PromptLayerParams<T>& p, const PromptVariant& variant) {
  if (f.value().rank() != 3 || f.shape()[2] != p.w_in.value.dim(1)) {
    throw ShapeError("prompt_forward: features " + nn::shape_str(f.shape()) + " do not match prompt input width " +
                     std::to_string(p.w_in.value.dim(1)));
  }
  auto norm_act = [&](const Var<T>& x, const LayerNormParams<T>& ln, std::size_t stage) {
    if (!variant.stage_norm_act[stage]) return x;
    return nn::gelu(nn::layer_norm(x, nn::param(ln.gamma), nn::param(ln.beta)));
  };
  auto h = norm_act(conv1x1(f, p.w_in, p.b_in), p.ln_in, 0);
  if (variant.depthwise) {
    const int groups = static_cast<int>(p.dw.value.dim(0));
    h = nn::chw_to_hwc(nn::conv2d(nn::hwc_to_chw(h), nn::param(p.dw), nn::param(p.b_dw), 1, 1, groups));
  }
  h = norm_act(h, p.ln_dw, 1);
  return norm_act(conv1x1(h, p.w_out, p.b_out), p.ln_out, 2);
}

template <typename T>
Var<T> transformer_block(const Var<T>& f, const TransformerBlockParams<T>& b, std::size_t heads) {
  if (f.value().rank() != 3) throw ShapeError("transformer_block: expected [H,W,C], got " + nn::shape_str(f.shape()));
  const Shape grid = f.shape();
  auto x = nn::reshape(f, {grid[0] * grid[1], grid[2]});
  auto a = nn::multi_head_attention(nn::layer_norm(x, nn::param(b.ln1.gamma), nn::param(b.ln1.beta)),
                                    nn::param(b.wq), nn::param(b.wk), nn::param(b.wv), nn::param(b.wo),
                                    static_cast<int>(heads));
  x = nn::add(x, a);
  auto hidden = nn::gelu(nn::linear(nn::layer_norm(x, nn::param(b.ln2.gamma), nn::param(b.ln2.beta)),
                                    nn::param(b.mlp_w1), nn::param(b.mlp_b1)));
  x = nn::add(x, nn::linear(hidden, nn::param(b.mlp_w2), nn::param(b.mlp_b2)));
  return nn::reshape(x, grid);
}

template <typename T>
Var<T> encode(const Var<T>& image, const SegModel<T>& m, const EncodeOptions& opts) {
  auto f = patch_embed(image, m.patch_embed, m.config);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    if (opts.use_prompts) f = nn::add(f, prompt_forward(f, m.prompts[i]));
    f = transformer_block(f, m.blocks[i], m.config.heads);
  }
  return f;
}

template <typename T>
Var<T> head_logits(const Var<T>& f, const TaskHeadParams<T>& h) {
  if (f.value().rank() != 3 || f.shape()[2] != h.up1_w.value.dim(0)) {
    throw ShapeError("head_forward: features " + nn::shape_str(f.shape()) + " do not match head input width " +
                     std::to_string(h.up1_w.value.dim(0)));
  }
  // Parameter-free norm: the random frozen encoder emits features of std ~0.1,
  // far too small for the head to train quickly at the fixed learning rate.
  const std::size_t c = f.shape()[2];
  auto fn = nn::layer_norm(f, nn::constant(TensorT<T>({c}, T(1))), nn::constant(TensorT<T>({c})));
  auto x = nn::gelu(nn::conv_transpose2d(nn::hwc_to_chw(fn), nn::param(h.up1_w), nn::param(h.up1_b)));
  x = nn::gelu(nn::conv_transpose2d(x, nn::param(h.up2_w), nn::param(h.up2_b)));
  const std::size_t cg = h.ms_w[0].value.dim(0);
  std::vector<Var<T>> scales;
  for (std::size_t g = 0; g < 4; ++g) {
    const int pad = (kMultiScaleKernels[g] - 1) / 2;
    scales.push_back(nn::conv2d(nn::slice_channels(x, g * cg, (g + 1) * cg), nn::param(h.ms_w[g]),
                                nn::param(h.ms_b[g]), 1, pad));
  }
  x = nn::gelu(nn::concat_channels(scales));
  return nn::hwc_to_chw(nn::linear(nn::chw_to_hwc(x), nn::param(h.cls_w), nn::param(h.cls_b)));
}

template <typename T>
Var<T> head_forward(const Var<T>& f, const TaskHeadParams<T>& h, std::size_t out_size) {
  return nn::bilinear_upsample(head_logits(f, h), out_size, out_size);
}

template <typename T>
Var<T> forward(const TensorT<T>& image, const SegModel<T>& m, const EncodeOptions& opts) {
  return head_forward(encode(nn::constant(image), m, opts), m.head, m.config.image_size);
}

template <typename T>
std::vector<std::uint8_t> argmax_classes(const TensorT<T>& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_classes: expected [K,H,W], got " + nn::shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), plane = logits.dim(1) * logits.dim(2);
  std::vector<std::uint8_t> out(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    T best = logits[i];
    for (std::size_t c = 1; c < k; ++c) {
      if (logits[c * plane + i] > best) {
        best = logits[c * plane + i];
        out[i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

#define PROMPTSEG_INSTANTIATE_MODEL(T)                                                                     \
  template struct SegModel<T>;                                                                             \
  template ParameterCounts count_parameters<T>(const SegModel<T>&);                                       \
  template SegModel<T> init_model<T>(const ViTConfig&, std::uint64_t);                                    \
  template Var<T> patch_embed<T>(const Var<T>&, const PatchEmbedParams<T>&, const ViTConfig&);            \
  template Var<T> prompt_forward<T>(const Var<T>&, const PromptLayerParams<T>&, const PromptVariant&);    \
  template Var<T> transformer_block<T>(const Var<T>&, const TransformerBlockParams<T>&, std::size_t);     \
  template Var<T> encode<T>(const Var<T>&, const SegModel<T>&, const EncodeOptions&);                     \
  template Var<T> head_logits<T>(const Var<T>&, const TaskHeadParams<T>&);                                \
  template Var<T> head_forward<T>(const Var<T>&, const TaskHeadParams<T>&, std::size_t);                  \
  template Var<T> forward<T>(const TensorT<T>&, const SegModel<T>&, const EncodeOptions&);                \
  template std::vector<std::uint8_t> argmax_classes<T>(const TensorT<T>&);

PROMPTSEG_INSTANTIATE_MODEL(float)
PROMPTSEG_INSTANTIATE_MODEL(double)

template SegModel<double> SegModel<float>::cast<double>() const;
template SegModel<float> SegModel<double>::cast<float>() const;
template SegModel<float> SegModel<float>::cast<float>() const;
template SegModel<double> SegModel<double>::cast<double>() const;

}  // namespace promptseg::model
