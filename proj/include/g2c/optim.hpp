#pragma once

// Parameter registry, SGD with momentum (stage 2), Adam (stage 1), and the
// step-decay learning-rate schedule.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "g2c/tensor.hpp"

namespace g2c {

struct ParamRef {
  std::string name;
  Tensor* tensor;
};
using ParamRefs = std::vector<ParamRef>;

inline void prefix_params(ParamRefs& out, const std::string& prefix, const ParamRefs& refs) {
  for (const ParamRef& r : refs) out.push_back({prefix + r.name, r.tensor});
}

inline std::int64_t total_params(const ParamRefs& refs) {
  std::int64_t n = 0;
  for (const ParamRef& r : refs) n += r.tensor->numel();
  return n;
}

// FNV-1a over raw parameter bytes; used to assert freeze contracts.
inline std::uint64_t params_hash(const ParamRefs& refs) {
  std::uint64_t h = 1469598103934665603ull;
  for (const ParamRef& r : refs) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(r.tensor->data());
    const std::size_t size = static_cast<std::size_t>(r.tensor->numel()) * sizeof(float);
    for (std::size_t i = 0; i < size; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

// lr0 * decay_factor^(-floor(epoch / decay_every)).
inline float lr_schedule(int epoch, float lr0, int decay_every, float decay_factor) {
  check_arg(epoch >= 0, "epoch must be non-negative");
  check_arg(decay_every >= 1 && decay_factor > 0.0f && lr0 > 0.0f, "invalid schedule parameters");
  return lr0 * std::pow(decay_factor, -static_cast<float>(epoch / decay_every));
}

// v <- momentum * v + g;  p <- p - lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(float momentum) : momentum_(momentum) {
    check_arg(momentum >= 0.0f && momentum < 1.0f, "momentum must lie in [0,1)");
  }

  void step(const ParamRefs& params, const std::vector<Tensor>& grads, float lr) {
    check_arg(params.size() == grads.size(), "sgd step: parameter/gradient count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].tensor;
      const Tensor& g = grads[i];
      check_arg(p.shape() == g.shape(), "sgd step: shape mismatch for " + params[i].name);
      Tensor& v = velocity_.try_emplace(params[i].name, Tensor::zeros(p.shape())).first->second;
      Tensor nv(p.shape());
      Tensor np(p.shape());
      const float* pv = v.data();
      const float* pg = g.data();
      const float* pp = p.data();
      float* onv = nv.mut()->data();
      float* onp = np.mut()->data();
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        onv[j] = momentum_ * pv[j] + pg[j];
        onp[j] = pp[j] - lr * onv[j];
      }
      v = nv;
      p = np;
    }
  }

  std::unordered_map<std::string, Tensor>& state() { return velocity_; }
  const std::unordered_map<std::string, Tensor>& state() const { return velocity_; }

 private:
  float momentum_;
  std::unordered_map<std::string, Tensor> velocity_;
};

// Adam with bias correction; stage-1 default (2e-4, 0.5, 0.999).
class Adam {
 public:
  Adam(float lr, float beta1 = 0.5f, float beta2 = 0.999f, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const ParamRefs& params, const std::vector<Tensor>& grads) {
    check_arg(params.size() == grads.size(), "adam step: parameter/gradient count mismatch");
    ++t_;
    const float c1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
    const float c2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i].tensor;
      const Tensor& g = grads[i];
      check_arg(p.shape() == g.shape(), "adam step: shape mismatch for " + params[i].name);
      auto& slot = state_.try_emplace(params[i].name,
                                      std::pair<Tensor, Tensor>{Tensor::zeros(p.shape()),
                                                                Tensor::zeros(p.shape())})
                       .first->second;
      Tensor nm(p.shape()), nv(p.shape()), np(p.shape());
      const float* pm = slot.first.data();
      const float* pv = slot.second.data();
      const float* pg = g.data();
      const float* pp = p.data();
      float* onm = nm.mut()->data();
      float* onv = nv.mut()->data();
      float* onp = np.mut()->data();
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        onm[j] = beta1_ * pm[j] + (1.0f - beta1_) * pg[j];
        onv[j] = beta2_ * pv[j] + (1.0f - beta2_) * pg[j] * pg[j];
        const float mhat = onm[j] / c1;
        const float vhat = onv[j] / c2;
        onp[j] = pp[j] - lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
      slot.first = nm;
      slot.second = nv;
      p = np;
    }
  }

  int step_count() const { return t_; }

 private:
  float lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::unordered_map<std::string, std::pair<Tensor, Tensor>> state_;
};

}  // namespace g2c
