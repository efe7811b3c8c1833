#pragma once

#include "promptseg/nn/autograd.hpp"

namespace promptseg::testing {

template <typename T>
nn::TensorT<T> random_tensor(nn::Rng& rng, nn::Shape shape, double lo = -1.0, double hi = 1.0) {
  nn::TensorT<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
nn::Parameter<T> random_param(nn::Rng& rng, std::string name, nn::Shape shape, bool trainable = true,
                              double lo = -1.0, double hi = 1.0) {
  return nn::Parameter<T>{std::move(name), random_tensor<T>(rng, std::move(shape), lo, hi), trainable, {}};
}

}  // namespace promptseg::testing
