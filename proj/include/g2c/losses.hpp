#pragma once

// Training objectives: focal classification loss, least-squares adversarial
// losses, and cycle-consistency. All are built from tape primitives so the
// backward pass needs no dedicated rules here.

#include <vector>

#include "g2c/ops.hpp"

namespace g2c {

struct LossConfig {
  float gamma = 2.0f;                // focal focusing exponent
  std::vector<float> alpha;          // per-class weights, mean 1; empty = all ones
  float lambda_cyc = 10.0f;

  void validate(int num_classes) const {
    check_arg(gamma >= 0.0f, "focal gamma must be >= 0");
    check_arg(lambda_cyc >= 0.0f, "lambda_cyc must be >= 0");
    if (!alpha.empty()) {
      check_arg(static_cast<int>(alpha.size()) == num_classes,
                "alpha must have one entry per class");
      for (float a : alpha) check_arg(a > 0.0f, "alpha entries must be positive");
    }
  }
};

// Inverse-frequency class weights normalized to mean 1.
inline std::vector<float> inverse_frequency_alpha(const std::vector<std::int64_t>& class_counts) {
  std::vector<float> alpha(class_counts.size());
  double total = 0.0;
  for (std::size_t c = 0; c < class_counts.size(); ++c) {
    check_arg(class_counts[c] > 0, "inverse_frequency_alpha needs every class populated");
    alpha[c] = 1.0f / static_cast<float>(class_counts[c]);
    total += alpha[c];
  }
  const float scale = static_cast<float>(class_counts.size() / total);
  for (float& a : alpha) a *= scale;
  return alpha;
}

// mean_n  -alpha[y_n] * (1 - p_yn)^gamma * log p_yn,  p = softmax(logits).
inline Tensor focal_loss(const Tensor& logits, const std::vector<int>& labels,
                         const LossConfig& cfg, Tape* tape = nullptr) {
  check_arg(logits.rank() == 2, "focal_loss logits must be [N,K]");
  const int n = logits.dim(0), k = logits.dim(1);
  cfg.validate(k);
  check_arg(static_cast<int>(labels.size()) == n, "focal_loss needs one label per row");

  Tensor logp = log_softmax(logits, tape);
  Tensor logp_y = gather_rows(logp, labels, tape);        // [N]
  Tensor neg_alpha({n});
  for (int i = 0; i < n; ++i)
    (*neg_alpha.mut())[static_cast<std::size_t>(i)] =
        -(cfg.alpha.empty() ? 1.0f : cfg.alpha[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])]);
  Tensor weighted = mul(neg_alpha, logp_y, tape);          // -alpha * log p_y
  if (cfg.gamma == 0.0f) return mean(weighted, tape);
  Tensor p_y = exp(logp_y, tape);
  Tensor one_minus = affine(p_y, -1.0f, 1.0f, tape);
  Tensor focus = pow_const(one_minus, cfg.gamma, tape);
  return mean(mul(focus, weighted, tape), tape);
}

struct LsganPair {
  Tensor d_loss;
  Tensor g_loss;
};

// d_loss = mean((d_real - 1)^2) + mean(d_fake^2); g_loss = mean((d_fake - 1)^2).
// The discriminator term uses detached fake scores, so callers pass the same
// tensor twice when training G and D on one tape is not wanted.
inline LsganPair lsgan_losses(const Tensor& d_real, const Tensor& d_fake, Tape* tape = nullptr) {
  Tensor real_term = mean(square(affine(d_real, 1.0f, -1.0f, tape), tape), tape);
  Tensor fake_term = mean(square(d_fake, tape), tape);
  Tensor d_loss = add(real_term, fake_term, tape);
  Tensor g_loss = mean(square(affine(d_fake, 1.0f, -1.0f, tape), tape), tape);
  return {d_loss, g_loss};
}

// lambda * mean |x - x_rec|.
inline Tensor cycle_loss(const Tensor& x, const Tensor& x_reconstructed, float lambda_cyc,
                         Tape* tape = nullptr) {
  check_arg(x.shape() == x_reconstructed.shape(),
            "cycle_loss shape mismatch: " + shape_str(x.shape()) + " vs " +
                shape_str(x_reconstructed.shape()));
  return affine(mean(abs(sub(x, x_reconstructed, tape), tape), tape), lambda_cyc, 0.0f, tape);
}

}  // namespace g2c
