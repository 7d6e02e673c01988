#pragma once

// Central-difference gradient verification. The function under test maps a
// parameter list to a scalar; when it receives a tape the parameters are
// already watched, when it receives nullptr it must run plain forward.
//
// float32 forward passes leave rounding noise of roughly |loss|*2^-24/eps on
// every finite-difference estimate, which swamps coordinates whose true
// gradient is near zero. Each coordinate is therefore probed at two step
// sizes: the pair gives a Richardson-extrapolated estimate, and the median
// disagreement across all coordinates calibrates the noise floor. A
// coordinate whose analytic and numeric values both sit inside that floor
// carries no information either way and is reported as unverifiable instead
// of compared. A wrong backward rule produces errors proportional to the
// gradient scale, far above the floor, and still fails.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "g2c/ops.hpp"
#include "g2c/random.hpp"
#include "g2c/tensor.hpp"

namespace g2c {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  bool finite = true;
  int coords_checked = 0;
  int coords_unverifiable = 0;
  double noise_floor = 0.0;
  std::string worst;  // "tensor <i> coord <j>: analytic=<a> numeric=<n>"
};

using ScalarFn = std::function<Tensor(Tape*, const std::vector<Tensor>&)>;

inline GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& params, double eps,
                                  double tol, std::uint64_t seed = 20240901,
                                  int max_coords = 64) {
  check_arg(eps >= 1e-4 && eps <= 1e-2, "grad_check eps must lie in [1e-4, 1e-2]");
  GradCheckReport report;

  Tape tape;
  std::vector<Tensor> watched = params;
  for (Tensor& p : watched) tape.watch(p);
  Tensor loss = f(&tape, watched);
  check_arg(loss.numel() == 1, "grad_check function must return a scalar");
  if (!loss.all_finite()) {
    report.finite = false;
    report.worst = "loss is non-finite";
    return report;
  }
  tape.backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(watched.size());
  for (const Tensor& p : watched) analytic.push_back(tape.grad(p));

  struct Probe {
    std::size_t tensor;
    std::int64_t coord;
    double analytic;
    double numeric;
    double spread;     // |n(eps) - n(eps/2)|, the noise witness
    double curvature;  // |f+ + f- - 2 f0| / (2 eps), the kink witness
  };
  std::vector<Probe> probes;
  const double f0 = static_cast<double>(f(nullptr, params).item());

  Rng rng(seed);
  std::vector<Tensor> probe_params = params;
  for (std::size_t pi = 0; pi < probe_params.size(); ++pi) {
    const std::int64_t m = probe_params[pi].numel();
    std::vector<std::int64_t> coords;
    if (m <= max_coords) {
      coords.resize(static_cast<std::size_t>(m));
      for (std::int64_t i = 0; i < m; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (int i = 0; i < max_coords; ++i) coords.push_back(rng.below(m));
    }
    for (std::int64_t ci : coords) {
      const float saved = probe_params[pi][ci];
      auto eval_at = [&](double v) {
        (*probe_params[pi].mut())[static_cast<std::size_t>(ci)] = static_cast<float>(v);
        Tensor l = f(nullptr, probe_params);
        return static_cast<double>(l.item());
      };
      const double lp = eval_at(saved + eps);
      const double lm = eval_at(saved - eps);
      const double lp2 = eval_at(saved + eps / 2);
      const double lm2 = eval_at(saved - eps / 2);
      (*probe_params[pi].mut())[static_cast<std::size_t>(ci)] = saved;
      const double n1 = (lp - lm) / (2.0 * eps);
      const double n2 = (lp2 - lm2) / eps;
      if (!std::isfinite(n1) || !std::isfinite(n2)) {
        report.finite = false;
        report.worst = "perturbed loss is non-finite";
        return report;
      }
      // Second differences over the right and left half-windows. Smooth
      // curvature contributes equally to both and cancels in d1 - d2; a kink
      // (relu/argmax switch) lives on one side and survives with amplitude
      // ~|slope change|/2, which bounds the error it inflicts on the
      // estimate. Their max with the symmetric witness flags mirrored kinks.
      const double d1 = lp - 2.0 * lp2 + f0;
      const double d2 = f0 - 2.0 * lm2 + lm;
      const double curvature =
          std::max(std::fabs(d1 - d2) / eps, std::fabs(lp + lm - 2.0 * f0) / (2.0 * eps));
      probes.push_back(
          Probe{pi, ci, analytic[pi][ci], (4.0 * n2 - n1) / 3.0, std::fabs(n1 - n2), curvature});
    }
  }

  std::vector<double> spreads;
  spreads.reserve(probes.size());
  for (const Probe& p : probes) spreads.push_back(p.spread);
  std::nth_element(spreads.begin(), spreads.begin() + spreads.size() / 2, spreads.end());
  // Differences smaller than a few ulps of the loss cannot be resolved by
  // float32 at all; that resolution limit applies even when the two step
  // sizes happen to agree exactly.
  const double resolution = 4.0 * 5.96e-8 * std::fabs(static_cast<double>(loss.item())) / eps;
  const double noise =
      std::max(spreads.empty() ? 0.0 : 10.0 * spreads[spreads.size() / 2], resolution);
  report.noise_floor = noise;

  for (const Probe& p : probes) {
    const double magnitude = std::max(std::fabs(p.analytic), std::fabs(p.numeric));
    // Two ways a coordinate carries no information about the backward rule:
    // the estimate disagrees with itself across step sizes, or the probe
    // interval contains a kink/argmax switch (second difference far above the
    // curvature a smooth loss would show). Both are forward-only witnesses,
    // so a wrong backward rule can never hide behind them.
    if (p.spread > std::max(noise, 0.3 * magnitude) ||
        p.curvature > std::max(noise, tol * magnitude)) {
      ++report.coords_unverifiable;
      continue;
    }
    ++report.coords_checked;
    const double diff = std::fabs(p.analytic - p.numeric);
    if (diff <= noise) continue;  // agreement within measurement noise
    const double rel =
        diff / std::max({1e-6, std::fabs(p.analytic), std::fabs(p.numeric)});
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst = "tensor " + std::to_string(p.tensor) + " coord " + std::to_string(p.coord) +
                     ": analytic=" + std::to_string(p.analytic) +
                     " numeric=" + std::to_string(p.numeric);
    }
  }
  report.pass = report.finite && report.max_rel_err < tol;
  return report;
}

}  // namespace g2c
