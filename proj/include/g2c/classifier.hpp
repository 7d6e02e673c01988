#pragma once

// Multi-branch classifier: one shared trunk (stem + 3 residual stages) applied
// to every stain, a cross-stain squeeze-excitation block after each residual
// stage, and a dense head over the concatenated pooled branch features.
//
// The trunk parameter set is physically one set of tensors, so every branch's
// gradient accumulates into it; only the attention blocks and the head grow
// with the number of stains.

#include <optional>
#include <vector>

#include "g2c/generator.hpp"  // ConvLayer/NormLayer/ConvNorm + ref helpers
#include "g2c/ops.hpp"
#include "g2c/optim.hpp"

namespace g2c {

struct StemParams {
  ConvNorm a1, a2;  // strided-conv path, two k3 s2 convs
  ConvNorm b1;      // pooled path: pool -> k3 s1 conv -> pool
};

struct StageParams {
  ConvNorm c1, c2;
  std::optional<ConvNorm> proj;  // 1x1 projection when the width changes
};

struct CrossStainAttention {
  Tensor w1, b1;  // (M+1)*C -> ((M+1)*C)/r
  Tensor w2, b2;  // back to (M+1)*C
  int reduction = 0;

  ParamRefs params() const {
    return {{"fc1.w", const_cast<Tensor*>(&w1)},
            {"fc1.b", const_cast<Tensor*>(&b1)},
            {"fc2.w", const_cast<Tensor*>(&w2)},
            {"fc2.b", const_cast<Tensor*>(&b2)}};
  }
};

struct ClassifierConfig {
  int num_stains = 4;  // M + 1
  int num_classes = 2;
  int channels_base = 16;
  bool attention_enabled = true;
  int reduction = 32;
  bool pool_per_stage = true;  // false: one pool after the three blocks
};

struct ClassifierParams {
  ClassifierConfig cfg;
  StemParams stem;
  std::array<StageParams, 3> stages;
  std::vector<CrossStainAttention> attention;  // 3 blocks when enabled
  Tensor head_w, head_b;

  ParamRefs trunk_params() const {
    ParamRefs refs;
    detail::convnorm_refs(refs, "stem.a1", stem.a1);
    detail::convnorm_refs(refs, "stem.a2", stem.a2);
    detail::convnorm_refs(refs, "stem.b1", stem.b1);
    for (int s = 0; s < 3; ++s) {
      const auto& st = stages[static_cast<std::size_t>(s)];
      detail::convnorm_refs(refs, "stage" + std::to_string(s) + ".c1", st.c1);
      detail::convnorm_refs(refs, "stage" + std::to_string(s) + ".c2", st.c2);
      if (st.proj) detail::convnorm_refs(refs, "stage" + std::to_string(s) + ".proj", *st.proj);
    }
    return refs;
  }

  ParamRefs attention_params() const {
    ParamRefs refs;
    for (std::size_t i = 0; i < attention.size(); ++i)
      prefix_params(refs, "att" + std::to_string(i) + ".", attention[i].params());
    return refs;
  }

  ParamRefs head_params() const {
    return {{"head.w", const_cast<Tensor*>(&head_w)}, {"head.b", const_cast<Tensor*>(&head_b)}};
  }

  ParamRefs params() const {
    ParamRefs refs = trunk_params();
    ParamRefs att = attention_params();
    refs.insert(refs.end(), att.begin(), att.end());
    ParamRefs head = head_params();
    refs.insert(refs.end(), head.begin(), head.end());
    return refs;
  }

  void watch_all(Tape& tape) {
    for (ParamRef& r : params()) tape.watch(*r.tensor);
  }
};

struct ParamCountBreakdown {
  std::int64_t trunk = 0;
  std::int64_t attention_total = 0;
  std::int64_t head = 0;
  std::int64_t grand_total = 0;
};

namespace detail {

inline ConvLayer he_conv(int out_ch, int in_ch, int k, Rng& rng) {
  const float sd = std::sqrt(2.0f / static_cast<float>(in_ch * k * k));
  return {Tensor::gaussian({out_ch, in_ch, k, k}, rng, sd), Tensor::zeros({out_ch})};
}

inline Tensor he_dense(int out_d, int in_d, Rng& rng) {
  return Tensor::gaussian({out_d, in_d}, rng, std::sqrt(2.0f / static_cast<float>(in_d)));
}

}  // namespace detail

inline CrossStainAttention build_attention(int num_stains, int channels, int reduction, Rng& rng) {
  const int full = num_stains * channels;
  const int squeezed = std::max(1, full / reduction);
  CrossStainAttention att;
  att.reduction = reduction;
  att.w1 = detail::he_dense(squeezed, full, rng);
  att.b1 = Tensor::zeros({squeezed});
  att.w2 = detail::he_dense(full, squeezed, rng);
  att.b2 = Tensor::zeros({full});
  return att;
}

inline ClassifierParams build_classifier(const ClassifierConfig& cfg, int seed) {
  check_arg(cfg.num_stains >= 1, "num_stains must be >= 1");
  check_arg(cfg.num_classes >= 2, "num_classes must be >= 2");
  check_arg(cfg.channels_base >= 8 && cfg.channels_base % 2 == 0,
            "channels_base must be even and >= 8");
  check_arg(cfg.reduction >= 1, "reduction must be >= 1");
  Rng rng(Rng::mix(static_cast<std::uint64_t>(seed), 0x434C53ull));
  const int b = cfg.channels_base;
  const int half = b / 2;

  ClassifierParams p;
  p.cfg = cfg;
  p.stem.a1 = {detail::he_conv(half, 3, 3, rng), detail::make_norm(half)};
  p.stem.a2 = {detail::he_conv(half, half, 3, rng), detail::make_norm(half)};
  p.stem.b1 = {detail::he_conv(half, 3, 3, rng), detail::make_norm(half)};
  const int widths[4] = {b, b, 2 * b, 4 * b};
  for (int s = 0; s < 3; ++s) {
    const int in_ch = widths[s], out_ch = widths[s + 1];
    auto& st = p.stages[static_cast<std::size_t>(s)];
    st.c1 = {detail::he_conv(out_ch, in_ch, 3, rng), detail::make_norm(out_ch)};
    st.c2 = {detail::he_conv(out_ch, out_ch, 3, rng), detail::make_norm(out_ch)};
    if (in_ch != out_ch)
      st.proj = ConvNorm{detail::he_conv(out_ch, in_ch, 1, rng), detail::make_norm(out_ch)};
    if (cfg.attention_enabled)
      p.attention.push_back(build_attention(cfg.num_stains, out_ch, cfg.reduction, rng));
  }
  p.head_w = detail::he_dense(cfg.num_classes, cfg.num_stains * 4 * b, rng);
  p.head_b = Tensor::zeros({cfg.num_classes});
  return p;
}

inline Tensor stem_forward(const ClassifierParams& p, const Tensor& x, Tape* tape = nullptr) {
  check_arg(x.rank() == 4 && x.dim(1) == 3, "stem input must be [N,3,H,W]");
  check_arg(x.dim(2) % 4 == 0 && x.dim(3) % 4 == 0, "stem input extent must be divisible by 4");
  Tensor a = conv2d(x, p.stem.a1.conv.w, p.stem.a1.conv.b, 2, 1, tape);
  a = relu(instance_norm(a, p.stem.a1.norm.gamma, p.stem.a1.norm.beta, 1e-5f, tape), tape);
  a = conv2d(a, p.stem.a2.conv.w, p.stem.a2.conv.b, 2, 1, tape);
  a = relu(instance_norm(a, p.stem.a2.norm.gamma, p.stem.a2.norm.beta, 1e-5f, tape), tape);
  Tensor b = max_pool2d(x, 2, 2, tape);
  b = conv2d(b, p.stem.b1.conv.w, p.stem.b1.conv.b, 1, 1, tape);
  b = relu(instance_norm(b, p.stem.b1.norm.gamma, p.stem.b1.norm.beta, 1e-5f, tape), tape);
  b = max_pool2d(b, 2, 2, tape);
  return concat({a, b}, 1, tape);
}

// Squeeze all branches, two dense layers, sigmoid scales back per branch.
inline std::vector<Tensor> cross_stain_attention(const CrossStainAttention& att,
                                                 const std::vector<Tensor>& feats,
                                                 Tape* tape = nullptr) {
  check_arg(!feats.empty(), "attention needs at least one branch");
  const int c = feats[0].dim(1);
  for (const Tensor& f : feats)
    check_arg(f.shape() == feats[0].shape(), "attention branches must share one shape");
  std::vector<Tensor> pooled;
  pooled.reserve(feats.size());
  for (const Tensor& f : feats) pooled.push_back(global_avg_pool(f, tape));
  Tensor z = concat(pooled, 1, tape);  // [N, (M+1)*C]
  Tensor h = relu(fully_connected(z, att.w1, att.b1, tape), tape);
  Tensor scales = sigmoid(fully_connected(h, att.w2, att.b2, tape), tape);
  std::vector<Tensor> out;
  out.reserve(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i) {
    Tensor s = narrow(scales, 1, static_cast<int>(i) * c, c, tape);
    out.push_back(scale_channels(feats[i], s, tape));
  }
  return out;
}

namespace detail {

inline Tensor residual_stage(const StageParams& st, const Tensor& x, Tape* tape) {
  Tensor r = conv2d(x, st.c1.conv.w, st.c1.conv.b, 1, 1, tape);
  r = relu(instance_norm(r, st.c1.norm.gamma, st.c1.norm.beta, 1e-5f, tape), tape);
  r = conv2d(r, st.c2.conv.w, st.c2.conv.b, 1, 1, tape);
  r = instance_norm(r, st.c2.norm.gamma, st.c2.norm.beta, 1e-5f, tape);
  Tensor skip = x;
  if (st.proj) {
    skip = conv2d(x, st.proj->conv.w, st.proj->conv.b, 1, 0, tape);
    skip = instance_norm(skip, st.proj->norm.gamma, st.proj->norm.beta, 1e-5f, tape);
  }
  return relu(add(skip, r, tape), tape);
}

}  // namespace detail

inline Tensor classifier_forward(const ClassifierParams& p, const std::vector<Tensor>& images,
                                 Tape* tape = nullptr) {
  check_arg(static_cast<int>(images.size()) == p.cfg.num_stains,
            "classifier expects " + std::to_string(p.cfg.num_stains) + " stains, got " +
                std::to_string(images.size()));
  std::vector<Tensor> feats;
  feats.reserve(images.size());
  for (const Tensor& img : images) feats.push_back(stem_forward(p, img, tape));
  for (int s = 0; s < 3; ++s) {
    for (Tensor& f : feats) f = detail::residual_stage(p.stages[static_cast<std::size_t>(s)], f, tape);
    if (p.cfg.attention_enabled)
      feats = cross_stain_attention(p.attention[static_cast<std::size_t>(s)], feats, tape);
    if (p.cfg.pool_per_stage || s == 2)
      for (Tensor& f : feats) f = max_pool2d(f, 2, 2, tape);
  }
  std::vector<Tensor> pooled;
  pooled.reserve(feats.size());
  for (Tensor& f : feats) pooled.push_back(global_avg_pool(f, tape));
  Tensor z = concat(pooled, 1, tape);
  return fully_connected(z, p.head_w, p.head_b, tape);
}

inline ParamCountBreakdown count_parameters(const ClassifierParams& p) {
  ParamCountBreakdown out;
  out.trunk = total_params(p.trunk_params());
  out.attention_total = total_params(p.attention_params());
  out.head = total_params(p.head_params());
  out.grand_total = out.trunk + out.attention_total + out.head;
  return out;
}

}  // namespace g2c
