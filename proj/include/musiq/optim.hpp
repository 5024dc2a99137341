#pragma once

#include <cmath>
#include <map>
#include <string>

#include "musiq/params.hpp"
#include "musiq/tensor.hpp"

namespace musiq {

enum class OptimizerKind { Adam, SgdMomentum };

inline OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd" || s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  throw ConfigError("unknown optimizer: " + s);
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double base_lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

// base * 0.5 * (1 + cos(pi * step / total)).
inline double cosine_lr(double base, int64_t step, int64_t total_steps) {
  if (total_steps <= 0) return base;
  double t = static_cast<double>(step) / static_cast<double>(total_steps);
  if (t > 1.0) t = 1.0;
  return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

// Adam with decoupled weight decay, or SGD with momentum (v <- m*v + g,
// theta <- theta - lr*v) with coupled decay. Updates are in-place over the
// parameter store; state tensors mirror parameter shapes.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, int64_t total_steps)
      : cfg_(cfg), total_steps_(total_steps) {}

  const OptimizerConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }
  double current_lr() const { return cosine_lr(cfg_.base_lr, step_, total_steps_); }

  void step(ParamStore<T>& params, const Gradients<T>& grads) {
    double lr = current_lr();
    for (auto& e : const_cast<std::vector<typename ParamStore<T>::Entry>&>(params.entries())) {
      auto it = grads.find(e.name);
      if (it == grads.end()) throw Error("optimizer_step: missing gradient for " + e.name);
      const Tensor<T>& g = it->second;
      if (!g.same_shape(e.value))
        throw ShapeError("optimizer_step: gradient shape mismatch for " + e.name);
      if (cfg_.kind == OptimizerKind::Adam)
        adam_update(e.name, e.value, g, lr);
      else
        sgd_update(e.name, e.value, g, lr);
    }
    ++step_;
  }

 private:
  void adam_update(const std::string& name, Tensor<T>& theta, const Tensor<T>& g, double lr) {
    Tensor<T>& m = moment(m1_, name, theta);
    Tensor<T>& v = moment(m2_, name, theta);
    double t = static_cast<double>(step_) + 1.0;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t);
    for (int64_t i = 0; i < theta.numel(); ++i) {
      double gi = static_cast<double>(g[i]);
      double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
      double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double th = static_cast<double>(theta[i]);
      if (cfg_.weight_decay != 0.0) th *= 1.0 - lr * cfg_.weight_decay;
      th -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
      theta[i] = static_cast<T>(th);
    }
  }

  void sgd_update(const std::string& name, Tensor<T>& theta, const Tensor<T>& g, double lr) {
    Tensor<T>& v = moment(m1_, name, theta);
    for (int64_t i = 0; i < theta.numel(); ++i) {
      double gi = static_cast<double>(g[i]);
      if (cfg_.weight_decay != 0.0) gi += cfg_.weight_decay * static_cast<double>(theta[i]);
      double vi = cfg_.momentum * static_cast<double>(v[i]) + gi;
      v[i] = static_cast<T>(vi);
      theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * vi);
    }
  }

  Tensor<T>& moment(std::map<std::string, Tensor<T>>& store, const std::string& name,
                    const Tensor<T>& like) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Tensor<T>::zeros(like.shape())).first;
    return it->second;
  }

  OptimizerConfig cfg_;
  int64_t total_steps_;
  int64_t step_ = 0;
  std::map<std::string, Tensor<T>> m1_;
  std::map<std::string, Tensor<T>> m2_;
};

}  // namespace musiq
