#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "wscn/autodiff.hpp"
#include "wscn/rng.hpp"

namespace wscn {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  std::uint64_t seed = 0;
  /// Entries probed per tensor; 0 probes every entry. Probed entries are
  /// chosen uniformly at random from `seed`.
  std::size_t max_entries_per_tensor = 0;
};

struct GradEntry {
  std::string tensor;
  double max_rel_error = 0.0;
  std::size_t probed = 0;
};

struct GradReport {
  std::vector<GradEntry> entries;
  bool passed = false;
  double tolerance = 0.0;
  double step = 0.0;
  std::uint64_t seed = 0;
  std::string failure;  // first offending tensor, empty on pass

  double max_rel_error() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.max_rel_error);
    return m;
  }
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `build(tape)` against central
/// differences for every tensor in `tensors`. `build` must compute the same
/// deterministic scalar each time it is called.
template <class Build>
GradReport check_gradients(Build&& build, std::vector<Tensor<double>> tensors,
                           const GradCheckOptions& opts = {}) {
  GradReport report;
  report.tolerance = opts.tolerance;
  report.step = opts.step;
  report.seed = opts.seed;
  report.passed = true;

  for (auto& t : tensors) {
    t.set_requires_grad(true);
    t.clear_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = build(tape);
    backward(tape, loss);
  }

  Rng rng(opts.seed);
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    auto& t = tensors[ti];
    GradEntry entry;
    entry.tensor = t.name().empty() ? "input" + std::to_string(ti) : t.name();
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (opts.max_entries_per_tensor && idx.size() > opts.max_entries_per_tensor) {
      rng.shuffle(idx.begin(), idx.end());
      idx.resize(opts.max_entries_per_tensor);
      std::sort(idx.begin(), idx.end());
    }
    for (std::size_t i : idx) {
      if (!std::isfinite(analytic[i])) {
        entry.max_rel_error = std::numeric_limits<double>::infinity();
        if (report.failure.empty())
          report.failure = entry.tensor + ": non-finite analytic gradient";
        report.passed = false;
        break;
      }
      const double saved = t[i];
      t[i] = saved + opts.step;
      double up, down;
      {
        Tape<double> tape;
        up = build(tape).item();
      }
      t[i] = saved - opts.step;
      {
        Tape<double> tape;
        down = build(tape).item();
      }
      t[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      entry.max_rel_error =
          std::max(entry.max_rel_error, relative_error(analytic[i], numeric));
      ++entry.probed;
    }
    if (entry.max_rel_error > opts.tolerance) {
      report.passed = false;
      if (report.failure.empty())
        report.failure = entry.tensor + ": relative error " +
                         std::to_string(entry.max_rel_error);
    }
    report.entries.push_back(std::move(entry));
  }
  for (auto& t : tensors) t.clear_grad();
  return report;
}

/// Convenience form: creates random N(0,1) float64 inputs of the given shapes
/// from `opts.seed` and checks gradients with respect to them.
/// `build(tape, inputs)` returns the scalar loss.
template <class Build>
GradReport check_gradients(Build&& build, const std::vector<Shape>& input_shapes,
                           const GradCheckOptions& opts = {}) {
  if (!(opts.tolerance > 0)) throw ContractError("tolerance must be positive");
  Rng rng(derive_seed(opts.seed, 0x1a9u));
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < input_shapes.size(); ++i) {
    Tensor<double> t(input_shapes[i]);
    for (auto& v : t.data()) v = rng.normal();
    t.set_name("input" + std::to_string(i));
    inputs.push_back(t);
  }
  return check_gradients(
      [&](Tape<double>& tape) { return build(tape, inputs); }, inputs, opts);
}

}  // namespace wscn
