#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vcmamba/blocks.hpp"
#include "vcmamba/tensor.hpp"

namespace vcm {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;

  void validate() const {
    std::string bad;
    if (!(lr >= 0.0 && std::isfinite(lr))) bad += " lr must be finite and >= 0;";
    if (!(beta1 >= 0.0 && beta1 < 1.0)) bad += " beta1 must lie in [0, 1);";
    if (!(beta2 >= 0.0 && beta2 < 1.0)) bad += " beta2 must lie in [0, 1);";
    if (!(eps > 0.0 && std::isfinite(eps))) bad += " eps must be finite and > 0;";
    if (!(weight_decay >= 0.0 && std::isfinite(weight_decay))) {
      bad += " weight_decay must be finite and >= 0;";
    }
    if (!bad.empty()) throw ValidationError("optimizer config:" + bad);
  }
};

// Matrices and kernels decay; vectors, norm affine terms, the SSM decay
// log-rates, the direction table and the positional table do not.
inline bool decays(const std::string& name, std::size_t rank) {
  auto ends_with = [&](const char* suffix) {
    const std::string s(suffix);
    return name.size() >= s.size() &&
           name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  if (rank < 2) return false;
  return !(ends_with(".a_log") || ends_with(".theta") || ends_with(".pos_table"));
}

template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<T>> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) {
      m_.emplace_back(p.tensor.numel(), T(0));
      v_.emplace_back(p.tensor.numel(), T(0));
      decay_.push_back(decays(p.name, p.tensor.rank()));
    }
  }

  // Parameters without a gradient are treated as having a zero gradient.
  void step() {
    ++t_;
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& tensor = params_[i].tensor;
      auto w = tensor.values();
      const bool has = tensor.has_grad();
      const auto g = tensor.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const T decay = decay_[i] ? wd : T(0);
      for (std::size_t k = 0; k < w.size(); ++k) {
        const T gk = has ? g[k] : T(0);
        m[k] = b1 * m[k] + (T(1) - b1) * gk;
        v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
        const T mhat = m[k] / c1;
        const T vhat = v[k] / c2;
        w[k] -= lr * (mhat / (std::sqrt(vhat) + eps) + decay * w[k]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  // L2 norm over every parameter gradient.
  double grad_norm() const {
    double acc = 0.0;
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) continue;
      for (T g : p.tensor.grad()) acc += static_cast<double>(g) * g;
    }
    return std::sqrt(acc);
  }

  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<NamedTensor<T>> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::vector<bool> decay_;
  std::size_t t_ = 0;
};

}  // namespace vcm
