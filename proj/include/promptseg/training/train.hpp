#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "promptseg/data/sample.hpp"
#include "promptseg/model/seg_model.hpp"
#include "promptseg/nn/autograd.hpp"

namespace promptseg::training {

struct TrainConfig {
  double init_lr = 0.05;
  double power = 0.9;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t max_iter = 200;
  std::uint64_t seed = 0;
  // Empty means unweighted. Otherwise one weight per class.
  std::vector<double> class_weights;

  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// init_lr * (1 - iter/max_iter)^power. Throws ConfigError for iter > max_iter.
double poly_lr(std::size_t iter, const TrainConfig& cfg);

// Mean over pixels of -log softmax(logits)[mask]. With weights w the mean
// becomes sum_p w[y_p] * l_p / sum_p w[y_p]. logits is [K, H, W].
template <typename T>
nn::Var<T> cross_entropy_loss(const nn::Var<T>& logits, const data::ClassMask& mask,
                              std::span<const double> weights = {});

template <typename T>
struct OptimizerState {
  std::vector<nn::TensorT<T>> velocity;  // parallel to the parameter list
  std::size_t iter = 0;

  static OptimizerState zeros(const std::vector<model::Param<T>*>& params);
};

// Coupled weight decay: v = m*v + (g + wd*value); value -= lr*v. Throws
// ConfigError when a parameter has no gradient or the state does not match.
template <typename T>
void sgd_step(const std::vector<model::Param<T>*>& params, OptimizerState<T>& state, double lr,
              const TrainConfig& cfg);

struct FitReport {
  std::vector<double> loss_curve;
  double final_train_dice = 0.0;
  double wall_time = 0.0;  // seconds
};

// Loss curve, final metric and config echo. Wall time is left out so the
// document is reproducible byte for byte.
nlohmann::json fit_report_json(const FitReport& r, const TrainConfig& cfg, const model::ViTConfig& model_cfg);

// Runs cfg.max_iter iterations cycling over `samples`, updating only the
// trainable partition. A non-finite loss or gradient raises NumericError with
// the iteration index.
template <typename T>
FitReport fit_one_shot(model::SegModel<T>& model, std::span<const data::Sample> samples, const TrainConfig& cfg);

// Mean foreground Dice of the model's argmax prediction on each sample,
// pooled over all samples.
template <typename T>
double pooled_dice(const model::SegModel<T>& model, std::span<const data::Sample> samples);

}  // namespace promptseg::training
