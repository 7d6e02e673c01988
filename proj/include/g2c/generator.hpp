#pragma once

// Stain-translation generator and its patch discriminator.
//
// Generator topology: 7x7 reflect-padded entry conv, two stride-2 downsampling
// convs (k=3), six resolution-preserved residual blocks, two stride-2
// transposed convs (k=4), 7x7 reflect-padded exit conv into tanh. Channel
// widths double per downsampling stage from channels_base. Inputs and outputs
// live in [-1, 1]; callers convert from the [0,1] corpus convention.

#include <array>
#include <vector>

#include "g2c/ops.hpp"
#include "g2c/optim.hpp"
#include "g2c/random.hpp"

namespace g2c {

struct ConvLayer {
  Tensor w, b;
};

struct NormLayer {
  Tensor gamma, beta;
};

struct ConvNorm {
  ConvLayer conv;
  NormLayer norm;
};

struct ResidualBlock {
  ConvNorm c1, c2;
};

namespace detail {

inline ConvLayer make_conv(int out_ch, int in_ch, int k, Rng& rng, float stddev) {
  return {Tensor::gaussian({out_ch, in_ch, k, k}, rng, stddev), Tensor::zeros({out_ch})};
}

// Transposed-conv weight layout is [in_ch, out_ch, k, k].
inline ConvLayer make_tconv(int in_ch, int out_ch, int k, Rng& rng, float stddev) {
  return {Tensor::gaussian({in_ch, out_ch, k, k}, rng, stddev), Tensor::zeros({out_ch})};
}

inline NormLayer make_norm(int ch) {
  return {Tensor::full({ch}, 1.0f), Tensor::zeros({ch})};
}

inline void conv_refs(ParamRefs& out, const std::string& p, const ConvLayer& c) {
  out.push_back({p + ".w", const_cast<Tensor*>(&c.w)});
  out.push_back({p + ".b", const_cast<Tensor*>(&c.b)});
}

inline void norm_refs(ParamRefs& out, const std::string& p, const NormLayer& n) {
  out.push_back({p + ".gamma", const_cast<Tensor*>(&n.gamma)});
  out.push_back({p + ".beta", const_cast<Tensor*>(&n.beta)});
}

inline void convnorm_refs(ParamRefs& out, const std::string& p, const ConvNorm& cn) {
  conv_refs(out, p + ".conv", cn.conv);
  norm_refs(out, p + ".norm", cn.norm);
}

}  // namespace detail

struct GeneratorParams {
  int image_size = 0;
  int channels_base = 0;
  int source_stain = 0;
  int target_stain = 0;

  ConvNorm entry;                 // 7x7 s1, reflect pad 3, 3 -> b
  std::array<ConvNorm, 2> down;   // k3 s2 p1: b -> 2b -> 4b
  std::vector<ResidualBlock> res; // 4b, resolution preserved
  std::array<ConvNorm, 2> up;     // tconv k4 s2 p1: 4b -> 2b -> b
  ConvLayer exit_conv;            // 7x7 s1, reflect pad 3, b -> 3

  ParamRefs params() const {
    ParamRefs refs;
    detail::convnorm_refs(refs, "entry", entry);
    for (int i = 0; i < 2; ++i) detail::convnorm_refs(refs, "down" + std::to_string(i), down[static_cast<std::size_t>(i)]);
    for (std::size_t i = 0; i < res.size(); ++i) {
      detail::convnorm_refs(refs, "res" + std::to_string(i) + ".c1", res[i].c1);
      detail::convnorm_refs(refs, "res" + std::to_string(i) + ".c2", res[i].c2);
    }
    for (int i = 0; i < 2; ++i) detail::convnorm_refs(refs, "up" + std::to_string(i), up[static_cast<std::size_t>(i)]);
    detail::conv_refs(refs, "exit", exit_conv);
    return refs;
  }

  void watch_all(Tape& tape) {
    for (ParamRef& r : params()) tape.watch(*r.tensor);
  }
};

inline GeneratorParams build_generator(int channels_base, int image_size, int seed,
                                       int source_stain = 0, int target_stain = 1,
                                       int num_res_blocks = 6) {
  check_arg(image_size % 4 == 0, "image_size must be divisible by 4 (two stride-2 stages)");
  check_arg(channels_base >= 4, "channels_base must be >= 4");
  check_arg(num_res_blocks >= 1, "need at least one residual block");
  Rng rng(Rng::mix(static_cast<std::uint64_t>(seed), 0x47454Eull));
  const float sd = 0.02f;
  const int b = channels_base;

  GeneratorParams g;
  g.image_size = image_size;
  g.channels_base = channels_base;
  g.source_stain = source_stain;
  g.target_stain = target_stain;
  g.entry = {detail::make_conv(b, 3, 7, rng, sd), detail::make_norm(b)};
  g.down[0] = {detail::make_conv(2 * b, b, 3, rng, sd), detail::make_norm(2 * b)};
  g.down[1] = {detail::make_conv(4 * b, 2 * b, 3, rng, sd), detail::make_norm(4 * b)};
  g.res.resize(static_cast<std::size_t>(num_res_blocks));
  for (auto& blk : g.res) {
    blk.c1 = {detail::make_conv(4 * b, 4 * b, 3, rng, sd), detail::make_norm(4 * b)};
    blk.c2 = {detail::make_conv(4 * b, 4 * b, 3, rng, sd), detail::make_norm(4 * b)};
  }
  g.up[0] = {detail::make_tconv(4 * b, 2 * b, 4, rng, sd), detail::make_norm(2 * b)};
  g.up[1] = {detail::make_tconv(2 * b, b, 4, rng, sd), detail::make_norm(b)};
  g.exit_conv = detail::make_conv(3, b, 7, rng, sd);
  return g;
}

inline Tensor generator_forward(const GeneratorParams& g, const Tensor& x, Tape* tape = nullptr) {
  check_arg(x.rank() == 4 && x.dim(1) == 3, "generator input must be [N,3,H,W]");
  check_arg(x.dim(2) == g.image_size && x.dim(3) == g.image_size,
            "generator configured for " + std::to_string(g.image_size) + "x" +
                std::to_string(g.image_size) + ", got " + shape_str(x.shape()));
  Tensor h = reflect_pad2d(x, 3, tape);
  h = conv2d(h, g.entry.conv.w, g.entry.conv.b, 1, 0, tape);
  h = relu(instance_norm(h, g.entry.norm.gamma, g.entry.norm.beta, 1e-5f, tape), tape);
  for (const ConvNorm& d : g.down) {
    h = conv2d(h, d.conv.w, d.conv.b, 2, 1, tape);
    h = relu(instance_norm(h, d.norm.gamma, d.norm.beta, 1e-5f, tape), tape);
  }
  for (const ResidualBlock& blk : g.res) {
    Tensor r = conv2d(h, blk.c1.conv.w, blk.c1.conv.b, 1, 1, tape);
    r = relu(instance_norm(r, blk.c1.norm.gamma, blk.c1.norm.beta, 1e-5f, tape), tape);
    r = conv2d(r, blk.c2.conv.w, blk.c2.conv.b, 1, 1, tape);
    r = instance_norm(r, blk.c2.norm.gamma, blk.c2.norm.beta, 1e-5f, tape);
    h = add(h, r, tape);
  }
  for (const ConvNorm& u : g.up) {
    h = conv2d_transpose(h, u.conv.w, u.conv.b, 2, 1, tape);
    h = relu(instance_norm(h, u.norm.gamma, u.norm.beta, 1e-5f, tape), tape);
  }
  h = reflect_pad2d(h, 3, tape);
  h = conv2d(h, g.exit_conv.w, g.exit_conv.b, 1, 0, tape);
  return tanh(h, tape);
}

// PatchGAN discriminator: four k4 s2 leaky-relu convs and a 1-channel k3 s1
// score conv. A pure conv stack keeps every score cell local to its receptive
// field; scores are left unsquashed.
struct DiscriminatorParams {
  int image_size = 0;
  int channels_base = 0;
  std::array<ConvLayer, 4> convs;
  ConvLayer score;

  ParamRefs params() const {
    ParamRefs refs;
    for (int i = 0; i < 4; ++i) detail::conv_refs(refs, "conv" + std::to_string(i), convs[static_cast<std::size_t>(i)]);
    detail::conv_refs(refs, "score", score);
    return refs;
  }

  void watch_all(Tape& tape) {
    for (ParamRef& r : params()) tape.watch(*r.tensor);
  }
};

inline DiscriminatorParams build_discriminator(int channels_base, int image_size, int seed) {
  check_arg(image_size % 16 == 0, "discriminator needs image_size divisible by 16");
  check_arg(channels_base >= 4, "channels_base must be >= 4");
  Rng rng(Rng::mix(static_cast<std::uint64_t>(seed), 0x44495343ull));
  const float sd = 0.02f;
  const int b = channels_base;
  DiscriminatorParams d;
  d.image_size = image_size;
  d.channels_base = channels_base;
  d.convs[0] = detail::make_conv(b, 3, 4, rng, sd);
  d.convs[1] = detail::make_conv(2 * b, b, 4, rng, sd);
  d.convs[2] = detail::make_conv(4 * b, 2 * b, 4, rng, sd);
  d.convs[3] = detail::make_conv(8 * b, 4 * b, 4, rng, sd);
  d.score = detail::make_conv(1, 8 * b, 3, rng, sd);
  return d;
}

inline Tensor discriminator_forward(const DiscriminatorParams& d, const Tensor& x,
                                    Tape* tape = nullptr) {
  check_arg(x.rank() == 4 && x.dim(1) == 3, "discriminator input must be [N,3,H,W]");
  check_arg(x.dim(2) == d.image_size && x.dim(3) == d.image_size,
            "discriminator configured for " + std::to_string(d.image_size) + ", got " +
                shape_str(x.shape()));
  Tensor h = x;
  for (const ConvLayer& c : d.convs) h = leaky_relu(conv2d(h, c.w, c.b, 2, 1, tape), 0.2f, tape);
  return conv2d(h, d.score.w, d.score.b, 1, 1, tape);
}

}  // namespace g2c
