#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wscn/tensor.hpp"

namespace wscn {

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// Bias-corrected Adam. Moments are kept per parameter in the order the
/// parameters were registered.
template <class T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  /// One update with the gradients currently stored on the parameters.
  /// Parameters that are not trainable or carry no gradient keep their
  /// values; the step counter advances regardless.
  void step(double lr) {
    ++t_;
    const double c1 = 1 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      if (!p.requires_grad() || !p.has_grad()) continue;
      const auto g = p.grad();
      if (g.size() != m_[k].size())
        throw ShapeError("adam: gradient of '" + p.name() + "' has " +
                         std::to_string(g.size()) + " entries, expected " +
                         std::to_string(m_[k].size()));
      auto w = p.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i];
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        w[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

  std::uint64_t steps() const { return t_; }
  const std::vector<Tensor<T>>& params() const { return params_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t t) { t_ = t; }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct PlateauConfig {
  double factor = 0.1;
  std::size_t patience = 10;
  double min_delta = 1e-6;
};

/// Multiplies the rate by `factor` once the monitored loss has gone
/// `patience` epochs without beating the best value by more than min_delta.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, PlateauConfig cfg = {}) : lr_(lr), cfg_(cfg) {
    if (cfg.patience == 0) throw ContractError("plateau patience must be at least 1");
  }

  /// Records one epoch's loss and returns the rate for the next epoch.
  double observe(double loss) {
    if (!seen_ || loss < best_ - cfg_.min_delta) {
      best_ = loss;
      seen_ = true;
      wait_ = 0;
    } else if (++wait_ >= cfg_.patience) {
      lr_ *= cfg_.factor;
      wait_ = 0;
      ++decays_;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t wait() const { return wait_; }
  std::size_t decays() const { return decays_; }

 private:
  double lr_;
  PlateauConfig cfg_;
  double best_ = 0;
  bool seen_ = false;
  std::size_t wait_ = 0, decays_ = 0;
};

/// Rate in force at each epoch (1-based index i -> element i-1) when the
/// schedule sees `losses` in order.
inline std::vector<double> plateau_trace(double lr, const std::vector<double>& losses,
                                         PlateauConfig cfg = {}) {
  PlateauSchedule s(lr, cfg);
  std::vector<double> out{lr};
  for (double l : losses) out.push_back(s.observe(l));
  return out;
}

}  // namespace wscn
