#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "closed_form.hpp"
#include "gradcheck.hpp"
#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "promptseg/model/seg_model.hpp"

using namespace promptseg;
using namespace promptseg::model;
using nn::Shape;
using nn::Tensor;
using nn::Tensor64;
namespace pt = promptseg::testing;

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny_preset().validate());
  CHECK_NOTHROW(base_preset(5).validate());
  auto bad = [](auto mutate) {
    ViTConfig c = tiny_preset();
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.image_size = 60; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.heads = 3; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.depth = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.patch_size = 2; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.num_classes = 1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.prompt_hidden = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](ViTConfig& c) { c.embed_dim = 24; c.heads = 4; }).validate(), ConfigError);
  CHECK_THROWS_AS(init_model<float>(bad([](ViTConfig& c) { c.depth = 0; }), 1), ConfigError);
  CHECK_THROWS_AS(preset("huge", 2), ConfigError);
}

TEST_CASE("init: partition counts by construction and determinism") {
  const ViTConfig cfg = [] {
    ViTConfig c = tiny_preset();
    c.depth = 2;
    c.embed_dim = 32;
    c.prompt_hidden = 8;
    return c;
  }();
  auto m = init_model<float>(cfg, 7);
  const auto counts = count_parameters(m);
  CHECK(counts.trainable() == pt::trainable_count(cfg));
  CHECK(counts.backbone == pt::backbone_count(cfg));
  CHECK(counts.prompts == 2 * pt::prompt_layer_count(32, 8));

  auto again = init_model<float>(cfg, 7);
  auto a = m.parameters();
  auto b = again.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK(a[i]->value == b[i]->value);
  }
  auto other = init_model<float>(cfg, 8);
  CHECK_FALSE(other.blocks[0].wq.value == m.blocks[0].wq.value);

  for (const auto* p : m.backbone_parameters()) CHECK_FALSE(p->trainable);
  for (auto* p : m.trainable_parameters()) CHECK(p->trainable);
  CHECK(m.blocks.size() == cfg.depth);
  CHECK(m.prompts.size() == cfg.depth);
}

TEST_CASE("trainable_parameters: disjoint from backbone, stable order") {
  auto m = init_model<float>(tiny_preset(), 1);
  auto t1 = m.trainable_parameters();
  auto t2 = m.trainable_parameters();
  REQUIRE(t1.size() == t2.size());
  for (std::size_t i = 0; i < t1.size(); ++i) CHECK(t1[i] == t2[i]);

  std::set<const void*> backbone;
  for (const auto* p : m.backbone_parameters()) backbone.insert(p);
  std::size_t n = 0;
  for (auto* p : t1) {
    CHECK(backbone.count(p) == 0);
    n += p->value.numel();
  }
  CHECK(n == pt::trainable_count(tiny_preset()));
  CHECK(t1.front()->name == "prompts.0.w_in.weight");
  CHECK(t1.back()->name == "head.classifier.bias");
}

TEST_CASE("patch_embed geometry") {
  ViTConfig cfg = tiny_preset();
  auto m = init_model<float>(cfg, 3);
  auto f = patch_embed(nn::constant(pt::random_image<float>(1, 64)), m.patch_embed, cfg);
  CHECK(f.shape() == Shape{8, 8, 32});

  m.patch_embed.pos_embed.value = Tensor(m.patch_embed.pos_embed.value.shape());
  auto z = patch_embed(nn::constant(Tensor({3, 64, 64})), m.patch_embed, cfg);
  for (float v : z.value().vec()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(patch_embed(nn::constant(Tensor({3, 32, 32})), m.patch_embed, cfg), ShapeError);

  ViTConfig sam = cfg;
  sam.image_size = 1024;
  sam.patch_size = 16;
  sam.embed_dim = 16;
  sam.heads = 1;
  sam.depth = 1;
  sam.prompt_hidden = 4;
  auto ms = init_model<float>(sam, 3);
  auto fs = patch_embed(nn::constant(Tensor({3, 1024, 1024}, 0.5f)), ms.patch_embed, sam);
  CHECK(fs.shape() == Shape{64, 64, 16});
}

TEST_CASE("prompt_forward: zero fixed point, parameter count, shape") {
  ViTConfig cfg = tiny_preset();
  cfg.embed_dim = 64;
  cfg.prompt_hidden = 16;
  auto m = init_model<float>(cfg, 2);
  const auto& p = m.prompts[0];
  std::size_t n = 0;
  for (const auto* q : {&p.w_in, &p.b_in, &p.ln_in.gamma, &p.ln_in.beta, &p.dw, &p.b_dw, &p.ln_dw.gamma,
                        &p.ln_dw.beta, &p.w_out, &p.b_out, &p.ln_out.gamma, &p.ln_out.beta}) {
    n += q->value.numel();
  }
  CHECK(n == 2480);

  // Zero features through a prompt with every gamma = 1 still give zero.
  auto live = m.prompts[0];
  live.ln_out.gamma.value = Tensor({64}, 1.0f);
  auto z = prompt_forward(nn::constant(Tensor({5, 3, 64})), live);
  for (float v : z.value().vec()) CHECK(v == 0.0f);

  nn::Rng rng(3);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {4, 7}, {9, 2}}) {
    auto y = prompt_forward(nn::constant(pt::random_tensor<float>(rng, {h, w, 64})), live);
    CHECK(y.shape() == Shape{h, w, 64});
  }
  CHECK_THROWS_AS(prompt_forward(nn::constant(Tensor({4, 4, 32})), live), ShapeError);
}

TEST_CASE("prompt_forward structure: stages off reduce to W_out W_in") {
  auto m = init_model<double>(pt::small_config(), 5);
  pt::randomize_trainable(m, 9);
  const auto& p = m.prompts[0];
  nn::Rng rng(4);
  auto f = pt::random_tensor<double>(rng, {3, 3, 16});

  // Oracle: per token, W_out (W_in x + b_in) + b_out.
  auto linear_oracle = [&](const std::vector<double>& tok) {
    std::vector<double> mid(4, 0.0), out(16, 0.0);
    for (std::size_t o = 0; o < 4; ++o) {
      mid[o] = p.b_in.value[o];
      for (std::size_t i = 0; i < 16; ++i) mid[o] += p.w_in.value.at({o, i, 0, 0}) * tok[i];
    }
    for (std::size_t o = 0; o < 16; ++o) {
      out[o] = p.b_out.value[o];
      for (std::size_t i = 0; i < 4; ++i) out[o] += p.w_out.value.at({o, i, 0, 0}) * mid[i];
    }
    return out;
  };

  PromptVariant off;
  off.depthwise = false;
  off.stage_norm_act = {false, false, false};
  auto lin = prompt_forward(nn::constant(f), p, off);
  PromptVariant outer_only = off;
  outer_only.stage_norm_act[2] = true;
  auto outer = prompt_forward(nn::constant(f), p, outer_only);

  for (std::size_t t = 0; t < 9; ++t) {
    std::vector<double> tok(f.vec().begin() + t * 16, f.vec().begin() + (t + 1) * 16);
    auto ref = linear_oracle(tok);
    auto normed = pt::layer_norm_oracle(ref, p.ln_out.gamma.value.vec(), p.ln_out.beta.value.vec(), nn::kLayerNormEps);
    for (std::size_t c = 0; c < 16; ++c) {
      CHECK(lin.value()[t * 16 + c] == doctest::Approx(ref[c]).epsilon(1e-12));
      CHECK(outer.value()[t * 16 + c] == doctest::Approx(pt::gelu_oracle(normed[c])).epsilon(1e-10));
    }
  }
}

TEST_CASE("prompt_forward gradients match finite differences (64-bit)") {
  ViTConfig cfg = pt::small_config();
  auto m = init_model<double>(cfg, 6);
  pt::randomize_trainable(m, 10);
  auto& p = m.prompts[1];
  nn::Rng rng(12);
  auto f = pt::random_tensor<double>(rng, {4, 4, 16});
  auto target = nn::constant(pt::random_tensor<double>(rng, {4, 4, 16}));
  auto objective = [&] { return nn::sum(nn::mul(prompt_forward(nn::constant(f), p), target)); };
  auto res = pt::grad_check<double>({&p.w_in, &p.b_in, &p.ln_in.gamma, &p.ln_in.beta, &p.dw, &p.b_dw,
                                     &p.ln_dw.gamma, &p.ln_dw.beta, &p.w_out, &p.b_out, &p.ln_out.gamma,
                                     &p.ln_out.beta},
                                    objective);
  INFO(res.worst_param << "[" << res.worst_index << "] " << res.worst_analytic << " vs " << res.worst_numeric);
  CHECK(res.max_rel_error <= 1e-6);
}

TEST_CASE("transformer_block: identity with zero weights, oracle match") {
  ViTConfig cfg = pt::small_config();
  auto m = init_model<double>(cfg, 2);
  nn::Rng rng(5);
  auto f = pt::random_tensor<double>(rng, {2, 3, 16});

  auto zero = m.blocks[0];
  for (auto* q : {&zero.wq, &zero.wk, &zero.wv, &zero.wo, &zero.mlp_w1, &zero.mlp_w2}) {
    q->value = Tensor64(q->value.shape());
  }
  auto id = transformer_block(nn::constant(f), zero, cfg.heads);
  CHECK(id.shape() == f.shape());
  CHECK(id.value() == f);

  auto b = m.blocks[1];
  for (auto* q : {&b.ln1.gamma, &b.ln1.beta, &b.ln2.gamma, &b.ln2.beta, &b.wq, &b.wk, &b.wv, &b.wo, &b.mlp_w1,
                  &b.mlp_b1, &b.mlp_w2, &b.mlp_b2}) {
    for (auto& v : q->value.vec()) v = rng.uniform(-0.5, 0.5);
  }
  auto out = transformer_block(nn::constant(f), b, cfg.heads);

  pt::BlockOracleParams op;
  op.ln1_g = b.ln1.gamma.value.vec();
  op.ln1_b = b.ln1.beta.value.vec();
  op.ln2_g = b.ln2.gamma.value.vec();
  op.ln2_b = b.ln2.beta.value.vec();
  op.wq = pt::to_mat(b.wq.value);
  op.wk = pt::to_mat(b.wk.value);
  op.wv = pt::to_mat(b.wv.value);
  op.wo = pt::to_mat(b.wo.value);
  op.w1 = pt::to_mat(b.mlp_w1.value);
  op.w2 = pt::to_mat(b.mlp_w2.value);
  op.b1 = b.mlp_b1.value.vec();
  op.b2 = b.mlp_b2.value.vec();
  op.heads = static_cast<int>(cfg.heads);
  pt::Mat tokens(6, std::vector<double>(16));
  for (std::size_t l = 0; l < 6; ++l)
    for (std::size_t c = 0; c < 16; ++c) tokens[l][c] = f[l * 16 + c];
  auto ref = pt::transformer_block_oracle(tokens, op, nn::kLayerNormEps);
  for (std::size_t l = 0; l < 6; ++l)
    for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(out.value()[l * 16 + c] - ref[l][c]) <= 1e-6);
}

TEST_CASE("encode: prompts are transparent at init, depth-1 unrolls") {
  auto m = init_model<float>(tiny_preset(), 4);
  auto img = nn::constant(pt::random_image<float>(2, 64));
  auto with = encode(img, m);
  auto without = encode(img, m, EncodeOptions{false});
  CHECK(with.value() == without.value());
  CHECK(with.shape() == Shape{8, 8, 32});

  ViTConfig one = pt::small_config();
  one.depth = 1;
  auto d1 = init_model<double>(one, 5);
  pt::randomize_trainable(d1, 3);
  auto image = nn::constant(pt::random_image<double>(3, 16));
  auto pe = patch_embed(image, d1.patch_embed, one);
  auto manual = transformer_block(nn::add(pe, prompt_forward(pe, d1.prompts[0])), d1.blocks[0], one.heads);
  CHECK(encode(image, d1).value() == manual.value());
  // After perturbation the prompt path is no longer transparent.
  CHECK_FALSE(encode(image, d1).value() == encode(image, d1, EncodeOptions{false}).value());
}

TEST_CASE("head_forward geometry and zero map") {
  auto m = init_model<float>(tiny_preset(3), 4);
  nn::Rng rng(1);
  auto f = nn::constant(pt::random_tensor<float>(rng, {8, 8, 32}));
  auto grid = head_logits(f, m.head);
  CHECK(grid.shape() == Shape{3, 32, 32});
  auto full = head_forward(f, m.head, 64);
  CHECK(full.shape() == Shape{3, 64, 64});

  auto zero = head_forward(nn::constant(Tensor({8, 8, 32})), m.head, 64);
  for (float v : zero.value().vec()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(head_logits(nn::constant(Tensor({8, 8, 16})), m.head), ShapeError);
}

TEST_CASE("forward: tiny preset shape, determinism, finiteness") {
  auto m = init_model<float>(tiny_preset(), 11);
  auto img = pt::random_image<float>(5, 64);
  auto a = forward(img, m);
  CHECK(a.shape() == Shape{2, 64, 64});
  CHECK(a.value().all_finite());
  auto m2 = init_model<float>(tiny_preset(), 11);
  CHECK(forward(img, m2).value() == a.value());
  CHECK(argmax_classes(a.value()).size() == 64 * 64);
}

TEST_CASE("shape algebra holds for valid configs") {
  for (std::size_t patch : {4, 8, 16, 32}) {
    for (std::size_t mult : {1, 2, 3, 4, 64}) {
      ViTConfig c = pt::small_config();
      c.patch_size = patch;
      c.image_size = patch * mult;
      const auto plan = plan_shapes(c);
      CHECK(plan.token_grid == c.image_size / patch);
      CHECK(plan.logit_grid == 4 * c.image_size / patch);
      CHECK(plan.output_size == c.image_size);
      if (c.image_size <= 64) {
        auto m = init_model<float>(c, 1);
        nn::NoGradGuard guard;
        auto f = encode(nn::constant(pt::random_image<float>(1, c.image_size)), m);
        CHECK(f.dim(0) == plan.token_grid);
        auto g = head_logits(f, m.head);
        CHECK(g.dim(1) == plan.logit_grid);
        CHECK(nn::bilinear_upsample(g, plan.output_size, plan.output_size).dim(2) == c.image_size);
      }
    }
  }
}

TEST_CASE("end-to-end mean-logit gradients match finite differences (small config)") {
  auto m = init_model<double>(pt::small_config(), 21);
  pt::randomize_trainable(m, 22);
  auto img = pt::random_image<double>(23, 16);
  auto objective = [&] { return nn::mean(forward(img, m)); };
  auto params = m.trainable_parameters();
  auto res = pt::grad_check<double>(params, objective);
  INFO(res.worst_param << "[" << res.worst_index << "] " << res.worst_analytic << " vs " << res.worst_numeric);
  CHECK(res.max_rel_error <= 1e-5);
  for (const auto* p : m.backbone_parameters()) CHECK_FALSE(p->grad.has_value());
}

TEST_CASE("precision cast keeps values and flags") {
  auto m = init_model<float>(pt::small_config(), 2);
  auto d = m.cast<double>();
  auto a = m.parameters();
  auto b = d.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->trainable == b[i]->trainable);
    for (std::size_t j = 0; j < a[i]->value.numel(); ++j) CHECK(static_cast<double>(a[i]->value[j]) == b[i]->value[j]);
  }
}
