#pragma once

// Procedural multi-stain corpus. Every patch derives from a latent
// (structure texture, blob mask, two cue maps); each stain is a fixed
// analytic transform of the same latent, so stain-m ground truth exists for
// every patch and generator fidelity is measurable exactly.
//
// Class semantics, version 1 (glomerulosclerosis analog):
//   gs  - cue_a covers 85-97% of the blob
//   ss  - cue_a covers 25-45% of the blob (a sector)
//   noa - no cue_a
// cue_b is a nuisance texture drawn identically for all classes.
// Version 2 (the transfer task) swaps the roles: cue_b coverage defines the
// classes and cue_a becomes the nuisance; stains are unchanged.

#include <filesystem>
#include <string>
#include <vector>

#include "g2c/manifest.hpp"
#include "g2c/png_io.hpp"
#include "g2c/random.hpp"
#include "g2c/tensor.hpp"

namespace g2c {

struct LatentPatch {
  Tensor structure;  // [1,H,W] in [0,1]
  Tensor blob_mask;  // [1,H,W] in [0,1]
  Tensor cue_a;      // [1,H,W], zero outside blob support
  Tensor cue_b;      // [1,H,W], zero outside blob support
  std::string class_label;
};

// ---------------------------------------------------------------------------
// Stain transform constants, version "v1". image = (bias - absorb . v)^gamma
// with v = (structure, cue_a * contrast_a, cue_b). Stain 0 renders cue_a at
// low contrast; stains 1-3 amplify cue_a, cue_b and structure respectively.
// The stain-0 absorption matrix is non-singular so the full latent survives
// in the source image and every translation stain0 -> stain_m is learnable.
// ---------------------------------------------------------------------------
struct StainSpec {
  float contrast_a;
  float absorb[3][3];  // absorb[channel][latent]: latents (structure, cue_a, cue_b)
  float bias[3];
  float gamma[3];
};

inline constexpr char kStainVersion[] = "v1";
inline constexpr int kMaxTargetStains = 3;

inline const StainSpec& stain_spec(int stain_id) {
  static const StainSpec table[4] = {
      // stain 0: pale pink; cue_a barely visible, cue_b and texture prominent
      {0.18f,
       {{0.25f, 0.15f, 0.10f}, {0.42f, 0.30f, 0.28f}, {0.18f, 0.12f, 0.35f}},
       {0.97f, 0.92f, 0.95f},
       {1.00f, 1.10f, 0.95f}},
      // stain 1: amplifies cue_a into a dark purple
      {1.40f,
       {{0.18f, 0.50f, 0.08f}, {0.24f, 0.55f, 0.12f}, {0.10f, 0.25f, 0.10f}},
       {0.95f, 0.93f, 0.96f},
       {1.10f, 1.00f, 1.00f}},
      // stain 2: amplifies cue_b into green-blue
      {0.35f,
       {{0.15f, 0.10f, 0.45f}, {0.20f, 0.10f, 0.25f}, {0.22f, 0.06f, 0.50f}},
       {0.93f, 0.96f, 0.94f},
       {0.90f, 1.00f, 1.10f}},
      // stain 3: amplifies structure, near-monochrome dark
      {0.80f,
       {{0.55f, 0.30f, 0.12f}, {0.52f, 0.28f, 0.10f}, {0.50f, 0.26f, 0.08f}},
       {0.96f, 0.96f, 0.96f},
       {1.20f, 1.20f, 1.20f}}};
  check_arg(stain_id >= 0 && stain_id <= kMaxTargetStains,
            "unknown stain id " + std::to_string(stain_id));
  return table[static_cast<std::size_t>(stain_id)];
}

namespace detail {

// Two-pass box blur; the building block of all latent textures.
inline std::vector<float> smooth_noise(int size, int radius, Rng& rng) {
  std::vector<float> a(static_cast<std::size_t>(size) * size);
  for (float& v : a) v = static_cast<float>(rng.uniform());
  std::vector<float> b(a.size());
  for (int pass = 0; pass < 2; ++pass) {
    // horizontal then vertical
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double s = 0.0;
        int n = 0;
        for (int d = -radius; d <= radius; ++d) {
          const int xx = x + d;
          if (xx < 0 || xx >= size) continue;
          s += a[static_cast<std::size_t>(y) * size + xx];
          ++n;
        }
        b[static_cast<std::size_t>(y) * size + x] = static_cast<float>(s / n);
      }
    for (int x = 0; x < size; ++x)
      for (int y = 0; y < size; ++y) {
        double s = 0.0;
        int n = 0;
        for (int d = -radius; d <= radius; ++d) {
          const int yy = y + d;
          if (yy < 0 || yy >= size) continue;
          s += b[static_cast<std::size_t>(yy) * size + x];
          ++n;
        }
        a[static_cast<std::size_t>(y) * size + x] = static_cast<float>(s / n);
      }
  }
  // standardize to zero mean, unit variance
  double mu = 0.0, var = 0.0;
  for (float v : a) mu += v;
  mu /= static_cast<double>(a.size());
  for (float v : a) var += (v - mu) * (v - mu);
  var = std::max(var / static_cast<double>(a.size()), 1e-12);
  const float inv = static_cast<float>(1.0 / std::sqrt(var));
  for (float& v : a) v = static_cast<float>((v - mu) * inv);
  return a;
}

}  // namespace detail

struct RenderOptions {
  bool reference_crop = false;   // blob may be partial or absent
  float patient_offset = 0.0f;   // per-patient brightness shift
  int cue_statistics_version = 1;
};

inline LatentPatch render_base(std::uint64_t seed, const std::string& class_label, int size,
                               const RenderOptions& opt = {}) {
  check_arg(is_known_label(class_label), "render_base: unknown class '" + class_label + "'");
  Rng rng(Rng::mix(seed, 0xBA5Eull));

  LatentPatch patch;
  patch.class_label = class_label;

  auto tex = detail::smooth_noise(size, std::max(1, size / 16), rng);
  patch.structure = Tensor({1, size, size});
  for (int i = 0; i < size * size; ++i)
    (*patch.structure.mut())[static_cast<std::size_t>(i)] = std::min(
        1.0f, std::max(0.0f, 0.5f + opt.patient_offset + 0.22f * tex[static_cast<std::size_t>(i)]));

  // Blob: soft-edged rotated ellipse in normalized coordinates.
  double cx = 0.5 + rng.uniform(-0.12, 0.12);
  double cy = 0.5 + rng.uniform(-0.12, 0.12);
  bool has_blob = true;
  if (opt.reference_crop) {
    has_blob = rng.uniform() > 0.25;
    cx = rng.uniform(-0.2, 1.2);
    cy = rng.uniform(-0.2, 1.2);
  }
  const double ra = rng.uniform(0.26, 0.36), rb = rng.uniform(0.26, 0.36);
  const double theta = rng.uniform(0.0, 3.14159265358979);
  const double ct = std::cos(theta), st = std::sin(theta);

  patch.blob_mask = Tensor({1, size, size});
  patch.cue_a = Tensor({1, size, size});
  patch.cue_b = Tensor({1, size, size});

  // Class geometry: an angular sector of the requested coverage for cue_a.
  double cover = 0.0;
  if (class_label == "gs") cover = rng.uniform(0.85, 0.97);
  if (class_label == "ss") cover = rng.uniform(0.25, 0.45);
  double cover_b = rng.uniform(0.15, 0.55);  // nuisance, all classes alike
  if (opt.cue_statistics_version == 2) {
    // Transfer task: classes live in cue_b coverage, cue_a is the nuisance.
    cover_b = 0.0;
    if (class_label == "gs") cover_b = rng.uniform(0.55, 0.85);
    if (class_label == "ss") cover_b = rng.uniform(0.10, 0.30);
    cover = rng.uniform(0.15, 0.55);
  }
  const double sector_a0 = rng.uniform(0.0, 6.28318530717959);
  const double sector_b0 = rng.uniform(0.0, 6.28318530717959);
  auto texa = detail::smooth_noise(size, std::max(1, size / 12), rng);
  auto texb = detail::smooth_noise(size, std::max(1, size / 10), rng);

  const double edge = 0.06;
  const double angle_edge = 0.10;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      if (!has_blob) continue;
      const double px = (x + 0.5) / size - cx;
      const double py = (y + 0.5) / size - cy;
      const double u = (ct * px + st * py) / ra;
      const double v = (-st * px + ct * py) / rb;
      const double d = std::sqrt(u * u + v * v);
      const double mask = std::min(1.0, std::max(0.0, (1.0 + edge - d) / (2.0 * edge)));
      (*patch.blob_mask.mut())[i] = static_cast<float>(mask);
      if (mask <= 0.0) continue;
      const double phi = std::atan2(v, u);
      auto sector_weight = [&](double a0, double frac) {
        if (frac <= 0.0) return 0.0;
        if (frac >= 1.0) return 1.0;
        double delta = std::fabs(std::remainder(phi - a0, 6.28318530717959));
        const double half = frac * 3.14159265358979;
        return std::min(1.0, std::max(0.0, (half + angle_edge - delta) / (2.0 * angle_edge)));
      };
      const double wa = sector_weight(sector_a0, cover);
      const double wb = sector_weight(sector_b0, cover_b);
      if (wa > 0.0)
        (*patch.cue_a.mut())[i] = static_cast<float>(
            mask * wa * (0.75 + 0.25 * std::min(1.0, std::max(0.0, 0.5 + 0.4 * texa[i]))));
      if (wb > 0.0)
        (*patch.cue_b.mut())[i] = static_cast<float>(
            mask * wb * (0.70 + 0.30 * std::min(1.0, std::max(0.0, 0.5 + 0.4 * texb[i]))));
    }
  return patch;
}

// Fraction of the blob interior covered by a cue map.
inline double cue_coverage(const Tensor& cue, const Tensor& blob) {
  std::int64_t blob_px = 0, cue_px = 0;
  for (std::int64_t i = 0; i < blob.numel(); ++i) {
    if (blob[i] > 0.5f) {
      ++blob_px;
      if (cue[i] > 0.1f) ++cue_px;
    }
  }
  return blob_px == 0 ? 0.0 : static_cast<double>(cue_px) / static_cast<double>(blob_px);
}

// The documented closed-form pixel transform.
inline Tensor apply_stain(const LatentPatch& latent, int stain_id) {
  const StainSpec& s = stain_spec(stain_id);
  const int size = latent.structure.dim(1);
  Tensor img({3, size, size});
  const int plane = size * size;
  for (int i = 0; i < plane; ++i) {
    const float v0 = latent.structure[i];
    const float v1 = latent.cue_a[i] * s.contrast_a;
    const float v2 = latent.cue_b[i];
    for (int c = 0; c < 3; ++c) {
      float lin = s.bias[c] - (s.absorb[c][0] * v0 + s.absorb[c][1] * v1 + s.absorb[c][2] * v2);
      lin = std::min(1.0f, std::max(0.0f, lin));
      (*img.mut())[static_cast<std::size_t>(c) * plane + i] = std::pow(lin, s.gamma[c]);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Augmentation: independent coin flips plus brightness/saturation jitter in a
// luminance/chroma decomposition. Draws are explicit so tests can pin them.
// ---------------------------------------------------------------------------
struct AugmentDraws {
  bool flip_h = false;
  bool flip_v = false;
  float brightness = 1.0f;  // U[0.8, 1.2]
  float saturation = 1.0f;  // U[0.8, 1.2]
};

inline AugmentDraws sample_augment(Rng& rng) {
  AugmentDraws d;
  d.flip_h = rng.coin();
  d.flip_v = rng.coin();
  d.brightness = static_cast<float>(rng.uniform(0.8, 1.2));
  d.saturation = static_cast<float>(rng.uniform(0.8, 1.2));
  return d;
}

inline Tensor augment(const Tensor& image, const AugmentDraws& d) {
  check_arg(image.rank() == 3 && image.dim(0) == 3, "augment expects [3,H,W]");
  const int h = image.dim(1), w = image.dim(2);
  const int plane = h * w;
  Tensor out(image.shape());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sy = d.flip_v ? h - 1 - y : y;
      const int sx = d.flip_h ? w - 1 - x : x;
      const float r = image[0 * plane + sy * w + sx];
      const float g = image[1 * plane + sy * w + sx];
      const float b = image[2 * plane + sy * w + sx];
      const float luma = 0.299f * r + 0.587f * g + 0.114f * b;
      float rgb[3] = {r, g, b};
      for (int c = 0; c < 3; ++c) {
        float v = luma + d.saturation * (rgb[c] - luma);
        v *= d.brightness;
        (*out.mut())[static_cast<std::size_t>(c) * plane + y * w + x] =
            std::min(1.0f, std::max(0.0f, v));
      }
    }
  return out;
}

inline Tensor augment(const Tensor& image, Rng& rng) { return augment(image, sample_augment(rng)); }

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------
struct CorpusConfig {
  int image_size = 64;
  int n_train_noa = 700, n_train_gs = 200, n_train_ss = 65;
  int n_test_noa = 283, n_test_gs = 62, n_test_ss = 24;
  int reference_n = 100;
  int num_target_stains = 3;  // M
  int patients_train = 30, patients_test = 12;
  std::uint64_t seed = 1;
  int cue_statistics_version = 1;
  std::string out_dir;
};

namespace detail {

struct ProbeReport {
  double balanced_accuracy = 0.0;
};

// Pixel-statistics linear probe (LDA on per-channel means and stds) for the
// gs/ss separability guard.
inline ProbeReport pixel_probe(const std::vector<std::pair<Tensor, int>>& train,
                               const std::vector<std::pair<Tensor, int>>& test) {
  auto features = [](const Tensor& img) {
    std::array<double, 6> f{};
    const int plane = img.dim(1) * img.dim(2);
    for (int c = 0; c < 3; ++c) {
      double mu = 0.0, var = 0.0;
      for (int i = 0; i < plane; ++i) mu += img[c * plane + i];
      mu /= plane;
      for (int i = 0; i < plane; ++i) {
        const double d = img[c * plane + i] - mu;
        var += d * d;
      }
      f[static_cast<std::size_t>(c)] = mu;
      f[static_cast<std::size_t>(c + 3)] = std::sqrt(var / plane);
    }
    return f;
  };

  std::array<double, 6> mu0{}, mu1{};
  int n0 = 0, n1 = 0;
  std::vector<std::array<double, 6>> feats;
  std::vector<int> labels;
  for (const auto& [img, y] : train) {
    auto f = features(img);
    feats.push_back(f);
    labels.push_back(y);
    auto& mu = (y == 0) ? mu0 : mu1;
    for (int i = 0; i < 6; ++i) mu[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)];
    (y == 0 ? n0 : n1)++;
  }
  if (n0 == 0 || n1 == 0) return {0.5};
  for (int i = 0; i < 6; ++i) {
    mu0[static_cast<std::size_t>(i)] /= n0;
    mu1[static_cast<std::size_t>(i)] /= n1;
  }
  double cov[6][6] = {};
  for (std::size_t k = 0; k < feats.size(); ++k) {
    const auto& mu = labels[k] == 0 ? mu0 : mu1;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        cov[i][j] += (feats[k][static_cast<std::size_t>(i)] - mu[static_cast<std::size_t>(i)]) *
                     (feats[k][static_cast<std::size_t>(j)] - mu[static_cast<std::size_t>(j)]);
  }
  for (int i = 0; i < 6; ++i) {
    for (int j = 0; j < 6; ++j) cov[i][j] /= static_cast<double>(feats.size());
    cov[i][i] += 1e-6;
  }
  // Solve cov * w = mu1 - mu0 by Gaussian elimination.
  double w[6];
  {
    double a[6][7];
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 6; ++j) a[i][j] = cov[i][j];
      a[i][6] = mu1[static_cast<std::size_t>(i)] - mu0[static_cast<std::size_t>(i)];
    }
    for (int col = 0; col < 6; ++col) {
      int piv = col;
      for (int r = col + 1; r < 6; ++r)
        if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
      for (int j = 0; j < 7; ++j) std::swap(a[col][j], a[piv][j]);
      for (int r = 0; r < 6; ++r) {
        if (r == col || a[col][col] == 0.0) continue;
        const double factor = a[r][col] / a[col][col];
        for (int j = col; j < 7; ++j) a[r][j] -= factor * a[col][j];
      }
    }
    for (int i = 0; i < 6; ++i) w[i] = a[i][6] / (a[i][i] == 0.0 ? 1.0 : a[i][i]);
  }
  auto project = [&](const std::array<double, 6>& f) {
    double s = 0.0;
    for (int i = 0; i < 6; ++i) s += w[i] * f[static_cast<std::size_t>(i)];
    return s;
  };
  double t0 = 0.0, t1 = 0.0;
  for (int i = 0; i < 6; ++i) {
    t0 += w[i] * mu0[static_cast<std::size_t>(i)];
    t1 += w[i] * mu1[static_cast<std::size_t>(i)];
  }
  const double threshold = 0.5 * (t0 + t1);
  int correct0 = 0, total0 = 0, correct1 = 0, total1 = 0;
  for (const auto& [img, y] : test) {
    const int pred = project(features(img)) > threshold ? 1 : 0;
    if (y == 0) {
      ++total0;
      if (pred == 0) ++correct0;
    } else {
      ++total1;
      if (pred == 1) ++correct1;
    }
  }
  if (total0 == 0 || total1 == 0) return {0.5};
  return {0.5 * (static_cast<double>(correct0) / total0 + static_cast<double>(correct1) / total1)};
}

}  // namespace detail

// Builds the corpus on disk for one seed attempt; returns the manifest and
// the probe report used by the separability guard.
inline Manifest generate_corpus_attempt(const CorpusConfig& cfg, std::uint64_t seed,
                                        detail::ProbeReport* probe_out) {
  namespace fs = std::filesystem;
  check_arg(cfg.image_size % 4 == 0, "corpus image_size must be divisible by 4");
  check_arg(cfg.num_target_stains >= 1 && cfg.num_target_stains <= kMaxTargetStains,
            "num_target_stains must be in [1, 3]");
  check_arg(!cfg.out_dir.empty(), "corpus out_dir is required");
  fs::create_directories(cfg.out_dir + "/train");
  fs::create_directories(cfg.out_dir + "/test");
  fs::create_directories(cfg.out_dir + "/reference");

  Manifest manifest;
  manifest.corpus_seed = seed;
  manifest.stain_version = kStainVersion;

  auto patient_offset = [&](int patient) {
    Rng r(Rng::mix(seed, 0x0FF5E7ull + static_cast<std::uint64_t>(patient)));
    return static_cast<float>(r.uniform(-0.04, 0.04));
  };

  std::vector<std::pair<Tensor, int>> probe_train, probe_test;

  auto emit_split = [&](const std::string& split, int n_noa, int n_gs, int n_ss, int n_patients,
                        int patient_base, std::uint64_t index_base) {
    std::vector<std::string> labels;
    labels.insert(labels.end(), static_cast<std::size_t>(n_noa), "noa");
    labels.insert(labels.end(), static_cast<std::size_t>(n_gs), "gs");
    labels.insert(labels.end(), static_cast<std::size_t>(n_ss), "ss");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int patient = patient_base + static_cast<int>(i) % n_patients;
      RenderOptions opt;
      opt.patient_offset = patient_offset(patient);
      opt.cue_statistics_version = cfg.cue_statistics_version;
      LatentPatch latent =
          render_base(Rng::mix(seed, index_base + i), labels[i], cfg.image_size, opt);
      char name[64];
      std::snprintf(name, sizeof(name), "%s/p%06zu_s0.png", split.c_str(), i);
      const std::string rel = name;
      Tensor img0 = apply_stain(latent, 0);
      save_image(cfg.out_dir + "/" + rel, img0);
      manifest.records.push_back({rel, 0, labels[i], split, patient});
      if (split == "test") {
        // paired ground truth in every target stain, for fidelity oracles only
        for (int m = 1; m <= cfg.num_target_stains; ++m) {
          std::snprintf(name, sizeof(name), "%s/p%06zu_s%d.png", split.c_str(), i, m);
          save_image(cfg.out_dir + "/" + name, apply_stain(latent, m));
        }
      }
      if (labels[i] != "noa") {
        auto& bucket = (split == "train") ? probe_train : probe_test;
        bucket.emplace_back(img0, labels[i] == "ss" ? 1 : 0);
      }
    }
  };

  emit_split("train", cfg.n_train_noa, cfg.n_train_gs, cfg.n_train_ss, cfg.patients_train, 0, 0);
  emit_split("test", cfg.n_test_noa, cfg.n_test_gs, cfg.n_test_ss, cfg.patients_test, 1000,
             1000000);

  // Reference sets: unlabeled random crops per stain, classes mixed evenly.
  const char* ref_classes[3] = {"noa", "gs", "ss"};
  for (int m = 0; m <= cfg.num_target_stains; ++m) {
    for (int i = 0; i < cfg.reference_n; ++i) {
      RenderOptions opt;
      opt.reference_crop = true;
      opt.cue_statistics_version = cfg.cue_statistics_version;
      opt.patient_offset = patient_offset(2000 + i);
      const std::uint64_t idx = 2000000 + static_cast<std::uint64_t>(m) * 10000 + static_cast<std::uint64_t>(i);
      LatentPatch latent =
          render_base(Rng::mix(seed, idx), ref_classes[i % 3], cfg.image_size, opt);
      char name[64];
      std::snprintf(name, sizeof(name), "reference/s%d_%03d.png", m, i);
      save_image(cfg.out_dir + "/" + name, apply_stain(latent, m));
      manifest.records.push_back({name, m, "-", "reference", 2000 + i});
    }
  }

  if (probe_out) *probe_out = detail::pixel_probe(probe_train, probe_test);
  write_manifest(manifest, cfg.out_dir + "/manifest.txt");
  return manifest;
}

// Generates the corpus, retrying deterministically with derived seeds until
// the pixel-statistics probe lands strictly between chance and 95% balanced
// accuracy on gs/ss (the task must be neither trivial nor impossible).
inline Manifest generate_corpus(const CorpusConfig& cfg, double* probe_accuracy = nullptr) {
  for (int attempt = 0; attempt < 5; ++attempt) {
    const std::uint64_t seed =
        attempt == 0 ? cfg.seed : Rng::mix(cfg.seed, 0xA77E3FD7ull + static_cast<std::uint64_t>(attempt));
    detail::ProbeReport probe;
    Manifest m = generate_corpus_attempt(cfg, seed, &probe);
    if (probe_accuracy) *probe_accuracy = probe.balanced_accuracy;
    if (probe.balanced_accuracy > 0.55 && probe.balanced_accuracy < 0.95) return m;
  }
  throw std::runtime_error(
      "corpus separability probe failed 5 seeds in a row; stain/cue constants need retuning");
}

}  // namespace g2c
