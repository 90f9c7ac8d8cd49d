#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "wscn/autodiff.hpp"

namespace wscn {

struct ContrastiveConfig {
  double temperature = 0.1;
};

/// Supervised multi-positive N-pair loss over unit-norm embeddings [N,D]:
///   L = mean_i  -1/|P(i)| sum_{p in P(i)} log( exp(s_ip) / sum_{k!=i} exp(s_ik) )
/// with s_ij = z_i.z_j / temperature and P(i) the other samples of i's class.
template <class T>
Tensor<T> npair_contrastive(Tape<T>* tape, const Tensor<T>& emb,
                            const std::vector<int>& labels,
                            const ContrastiveConfig& cfg = {}) {
  if (emb.rank() != 2 || emb.dim(0) != labels.size())
    throw ShapeError("npair_contrastive: embeddings " + to_string(emb.shape()) +
                     " vs " + std::to_string(labels.size()) + " labels");
  if (!(cfg.temperature > 0))
    throw ContractError("npair_contrastive: temperature must be positive");
  const std::size_t n = emb.dim(0), d = emb.dim(1);
  if (n < 2) throw ContractError("npair_contrastive: need at least 2 samples");
  const T inv_tau = static_cast<T>(1.0 / cfg.temperature);

  std::vector<std::size_t> positives(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k)
      if (k != i && labels[k] == labels[i]) ++positives[i];
    if (positives[i] == 0)
      throw ContractError(
          "npair_contrastive: sample " + std::to_string(i) + " (class " +
          std::to_string(labels[i]) +
          ") has no positive in the batch; use class-balanced batch sampling");
  }

  // coef[i*n+k] = dL/ds_ik
  std::vector<T> sim(n * n), coef(n * n, T{0});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) {
      T s{0};
      for (std::size_t j = 0; j < d; ++j) s += emb[i * d + j] * emb[k * d + j];
      sim[i * n + k] = s * inv_tau;
    }
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, sim[i * n + k]);
    T z{0};
    for (std::size_t k = 0; k < n; ++k)
      if (k != i) z += std::exp(sim[i * n + k] - mx);
    const T lse = mx + std::log(z);
    const T inv_p = T{1} / static_cast<T>(positives[i]);
    double li = 0;
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      const T soft = std::exp(sim[i * n + k] - lse);
      const bool pos = labels[k] == labels[i];
      if (pos) li -= static_cast<double>(sim[i * n + k] - lse);
      coef[i * n + k] = (soft - (pos ? inv_p : T{0})) / static_cast<T>(n);
    }
    total += li * static_cast<double>(inv_p);
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(n)));
  if (auto* t = recording(tape, emb)) {
    t->record("npair_contrastive", {emb}, y,
              [emb, y, coef = std::move(coef), n, d, inv_tau]() mutable {
                const T gy = y.grad()[0] * inv_tau;
                auto g = emb.grad_mut();
                for (std::size_t i = 0; i < n; ++i)
                  for (std::size_t k = 0; k < n; ++k) {
                    const T c = coef[i * n + k] * gy;
                    if (c == T{0}) continue;
                    for (std::size_t j = 0; j < d; ++j) {
                      g[i * d + j] += c * emb[k * d + j];
                      g[k * d + j] += c * emb[i * d + j];
                    }
                  }
              });
  }
  return y;
}

inline constexpr double kDiceSmooth = 1e-6;
inline constexpr double kProbClamp = 1e-7;

/// 1 - (2 sum(p t) + eps) / (sum p + sum t + eps), summed over the batch.
template <class T>
Tensor<T> dice_loss(Tape<T>* tape, const Tensor<T>& pred,
                    const Tensor<T>& target) {
  detail::require_same_shape("dice_loss", pred, target);
  double inter = 0, total = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    inter += static_cast<double>(pred[i]) * target[i];
    total += static_cast<double>(pred[i]) + target[i];
  }
  const double num = 2 * inter + kDiceSmooth, den = total + kDiceSmooth;
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(1.0 - num / den));
  if (auto* t = recording(tape, pred)) {
    t->record("dice_loss", {pred}, y, [pred, target, y, num, den]() mutable {
      const double gy = y.grad()[0];
      auto g = pred.grad_mut();
      const double a = -2.0 / den * gy, b = num / (den * den) * gy;
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += static_cast<T>(a * target[i] + b);
    });
  }
  return y;
}

/// Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7].
/// Clamped entries receive no gradient.
template <class T>
Tensor<T> bce_loss(Tape<T>* tape, const Tensor<T>& pred,
                   const Tensor<T>& target) {
  detail::require_same_shape("bce_loss", pred, target);
  const double lo = kProbClamp, hi = 1.0 - kProbClamp;
  double acc = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), lo, hi);
    const double t = target[i];
    acc -= t * std::log(p) + (1 - t) * std::log(1 - p);
  }
  const double m = static_cast<double>(pred.numel());
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / m));
  if (auto* t = recording(tape, pred)) {
    t->record("bce_loss", {pred}, y, [pred, target, y, m, lo, hi]() mutable {
      const double gy = y.grad()[0] / m;
      auto g = pred.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double p = pred[i];
        if (p < lo || p > hi) continue;
        const double tt = target[i];
        g[i] += static_cast<T>(gy * (-tt / p + (1 - tt) / (1 - p)));
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> bce_dice(Tape<T>* tape, const Tensor<T>& pred,
                   const Tensor<T>& target) {
  return add(tape, bce_loss(tape, pred, target), dice_loss(tape, pred, target));
}

/// Mean over rows of -sum t log(max(p, 1e-7)). Rows of one_hot must sum to 1.
template <class T>
Tensor<T> categorical_ce(Tape<T>* tape, const Tensor<T>& probs,
                         const Tensor<T>& one_hot) {
  detail::require_same_shape("categorical_ce", probs, one_hot);
  if (probs.rank() != 2) throw ShapeError("categorical_ce: expected [N,C]");
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += one_hot[r * c + j];
    if (std::abs(s - 1.0) > 1e-6)
      throw ContractError("categorical_ce: label row " + std::to_string(r) +
                          " is not one-hot (sum " + std::to_string(s) + ")");
  }
  double acc = 0;
  for (std::size_t i = 0; i < probs.numel(); ++i)
    if (one_hot[i] != T{0})
      acc -= one_hot[i] * std::log(std::max(static_cast<double>(probs[i]), kProbClamp));
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (auto* t = recording(tape, probs)) {
    t->record("categorical_ce", {probs}, y, [probs, one_hot, y, n]() mutable {
      const double gy = y.grad()[0] / static_cast<double>(n);
      auto g = probs.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (one_hot[i] != T{0} && probs[i] > kProbClamp)
          g[i] -= static_cast<T>(gy * one_hot[i] / probs[i]);
    });
  }
  return y;
}

}  // namespace wscn
