#include "promptseg/training/train.hpp"

#include <chrono>
#include <cmath>

#include "promptseg/error.hpp"
#include "promptseg/metrics/metrics.hpp"

namespace promptseg::training {

using nn::TensorT;
using nn::Var;

void TrainConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid train config: " + what);
  };
  check(init_lr > 0.0 && std::isfinite(init_lr), "init_lr must be > 0");
  check(power >= 0.0 && std::isfinite(power), "power must be >= 0");
  check(max_iter >= 1, "max_iter must be >= 1");
  check(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  check(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay must be >= 0");
  for (double w : class_weights) check(w >= 0.0 && std::isfinite(w), "class weights must be finite and >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"init_lr", c.init_lr},   {"power", c.power},       {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay}, {"max_iter", c.max_iter}, {"seed", c.seed},
                     {"class_weights", c.class_weights}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("init_lr")) j.at("init_lr").get_to(c.init_lr);
  if (j.contains("power")) j.at("power").get_to(c.power);
  if (j.contains("momentum")) j.at("momentum").get_to(c.momentum);
  if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
  if (j.contains("max_iter")) j.at("max_iter").get_to(c.max_iter);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("class_weights")) j.at("class_weights").get_to(c.class_weights);
}

double poly_lr(std::size_t iter, const TrainConfig& cfg) {
  if (iter > cfg.max_iter) {
    throw ConfigError("poly_lr: iter " + std::to_string(iter) + " exceeds max_iter " + std::to_string(cfg.max_iter));
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
  return cfg.init_lr * std::pow(frac, cfg.power);
}

template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, const data::ClassMask& mask, std::span<const double> weights) {
  const auto& z = logits.value();
  if (z.rank() != 3) throw ShapeError("cross_entropy_loss: logits must be [K,H,W], got " + nn::shape_str(z.shape()));
  const std::size_t K = z.dim(0), H = z.dim(1), W = z.dim(2), P = H * W;
  if (mask.height != H || mask.width != W) {
    throw ShapeError("cross_entropy_loss: mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                     " does not match logits " + nn::shape_str(z.shape()));
  }
  if (!weights.empty() && weights.size() != K) {
    throw ConfigError("cross_entropy_loss: " + std::to_string(weights.size()) + " class weights for " +
                      std::to_string(K) + " classes");
  }
  const auto zd = z.data();

  // Softmax probabilities per pixel, kept for the backward pass.
  std::vector<double> prob(K * P);
  std::vector<double> pix_w(P, 1.0);
  double total = 0.0, wsum = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const std::size_t y = mask.labels[p];
    if (y >= K) {
      throw DataError(DataError::Kind::kClassRange, "cross_entropy_loss: mask class " + std::to_string(y) +
                                                        " out of range for " + std::to_string(K) + " classes");
    }
    double mx = static_cast<double>(zd[p]);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(zd[k * P + p]));
    double se = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double e = std::exp(static_cast<double>(zd[k * P + p]) - mx);
      prob[k * P + p] = e;
      se += e;
    }
    for (std::size_t k = 0; k < K; ++k) prob[k * P + p] /= se;
    const double nll = -(static_cast<double>(zd[y * P + p]) - mx - std::log(se));
    if (!weights.empty()) pix_w[p] = weights[y];
    total += pix_w[p] * nll;
    wsum += pix_w[p];
  }
  if (wsum <= 0.0) throw ConfigError("cross_entropy_loss: class weights sum to zero over the mask");

  TensorT<T> out({}, static_cast<T>(total / wsum));
  std::vector<std::uint8_t> labels = mask.labels;
  return nn::make_op<T>(
      "cross_entropy", std::move(out), {logits},
      [prob = std::move(prob), pix_w = std::move(pix_w), labels = std::move(labels), K, P, z_shape = z.shape(),
       wsum](const TensorT<T>& g, std::vector<TensorT<T>*>& pg) {
        if (!pg[0]) return;
        auto gd = pg[0]->data();
        const double go = static_cast<double>(g.data()[0]) / wsum;
        for (std::size_t p = 0; p < P; ++p) {
          const double s = go * pix_w[p];
          for (std::size_t k = 0; k < K; ++k) {
            const double d = prob[k * P + p] - (k == labels[p] ? 1.0 : 0.0);
            gd[k * P + p] += static_cast<T>(s * d);
          }
        }
      });
}

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros(const std::vector<model::Param<T>*>& params) {
  OptimizerState s;
  for (const auto* p : params) s.velocity.emplace_back(p->value.shape());
  return s;
}

template <typename T>
void sgd_step(const std::vector<model::Param<T>*>& params, OptimizerState<T>& state, double lr,
              const TrainConfig& cfg) {
  if (state.velocity.size() != params.size()) {
    throw ConfigError("sgd_step: optimizer state has " + std::to_string(state.velocity.size()) +
                      " slots for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.grad) throw ConfigError("sgd_step: parameter '" + p.name + "' has no gradient");
    auto& v = state.velocity[i];
    if (v.shape() != p.value.shape() || p.grad->shape() != p.value.shape()) {
      throw ShapeError("sgd_step: shape mismatch for parameter '" + p.name + "'");
    }
    auto vd = v.data();
    auto xd = p.value.data();
    const auto gd = p.grad->data();
    for (std::size_t j = 0; j < xd.size(); ++j) {
      const double step = cfg.momentum * static_cast<double>(vd[j]) + static_cast<double>(gd[j]) +
                          cfg.weight_decay * static_cast<double>(xd[j]);
      vd[j] = static_cast<T>(step);
      xd[j] = static_cast<T>(static_cast<double>(xd[j]) - lr * static_cast<double>(vd[j]));
    }
  }
  ++state.iter;
}

nlohmann::json fit_report_json(const FitReport& r, const TrainConfig& cfg, const model::ViTConfig& model_cfg) {
  return {{"iterations", r.loss_curve.size()},
          {"loss_curve", r.loss_curve},
          {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()},
          {"final_train_dice", r.final_train_dice},
          {"train_config", cfg},
          {"model_config", model_cfg}};
}

template <typename T>
double pooled_dice(const model::SegModel<T>& model, std::span<const data::Sample> samples) {
  std::vector<std::string> names(model.config.num_classes);
  metrics::ReportAccumulator acc(names);
  nn::NoGradGuard guard;
  for (const auto& s : samples) {
    const auto logits = model::forward(s.image.template cast<T>(), model);
    acc.add(model::argmax_classes(logits.value()), s.mask.labels);
  }
  return acc.finish().mean_dice();
}

template <typename T>
FitReport fit_one_shot(model::SegModel<T>& model, std::span<const data::Sample> samples, const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ConfigError("fit_one_shot: no training samples");
  const std::size_t S = model.config.image_size;
  for (const auto& s : samples) {
    if (s.image.shape() != nn::Shape{3, S, S} || s.mask.height != S || s.mask.width != S) {
      throw DataError(DataError::Kind::kSizeMismatch, "fit_one_shot: sample '" + s.id + "' is not " +
                                                          std::to_string(S) + "x" + std::to_string(S));
    }
  }
  if (!cfg.class_weights.empty() && cfg.class_weights.size() != model.config.num_classes) {
    throw ConfigError("fit_one_shot: class_weights has " + std::to_string(cfg.class_weights.size()) +
                      " entries for " + std::to_string(model.config.num_classes) + " classes");
  }

  std::vector<TensorT<T>> images;
  for (const auto& s : samples) images.push_back(s.image.template cast<T>());

  const auto t0 = std::chrono::steady_clock::now();
  auto params = model.trainable_parameters();
  auto state = OptimizerState<T>::zeros(params);
  FitReport report;
  model.zero_grad();
  for (std::size_t it = 0; it < cfg.max_iter; ++it) {
    const auto& sample = samples[it % samples.size()];
    try {
      const auto logits = model::forward(images[it % images.size()], model);
      const auto loss = cross_entropy_loss(logits, sample.mask, cfg.class_weights);
      const double lv = static_cast<double>(loss.value().data()[0]);
      if (!std::isfinite(lv)) throw NumericError("cross_entropy", "non-finite loss");
      report.loss_curve.push_back(lv);
      nn::backward(loss);
      sgd_step(params, state, poly_lr(it, cfg), cfg);
      model.zero_grad();
    } catch (const NumericError& e) {
      throw NumericError(e.op(), "iteration " + std::to_string(it) + ": " + e.what(), static_cast<long>(it));
    }
  }
  report.final_train_dice = pooled_dice(model, samples);
  report.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

#define PROMPTSEG_INSTANTIATE(T)                                                                                \
  template Var<T> cross_entropy_loss<T>(const Var<T>&, const data::ClassMask&, std::span<const double>);      \
  template struct OptimizerState<T>;                                                                        \
  template void sgd_step<T>(const std::vector<model::Param<T>*>&, OptimizerState<T>&, double,                \
                            const TrainConfig&);                                                            \
  template double pooled_dice<T>(const model::SegModel<T>&, std::span<const data::Sample>);                  \
  template FitReport fit_one_shot<T>(model::SegModel<T>&, std::span<const data::Sample>, const TrainConfig&);

PROMPTSEG_INSTANTIATE(float)
PROMPTSEG_INSTANTIATE(double)

#undef PROMPTSEG_INSTANTIATE

}  // namespace promptseg::training
