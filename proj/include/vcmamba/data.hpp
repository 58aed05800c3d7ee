#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vcmamba/random.hpp"
#include "vcmamba/tensor.hpp"

namespace vcm {

inline constexpr std::size_t kToyClasses = 10;
inline constexpr const char* kToyGenerator = "shapes-v1";

enum class ToyClass : int {
  HorizontalBars = 0,
  VerticalBars,
  DiagonalStripes,
  Plus,
  Disc,
  Ring,
  Checker,
  SquareOutline,
  Saltire,
  DotLattice,
};

inline const char* toy_class_name(int label) {
  static const char* names[kToyClasses] = {
      "horizontal-bars", "vertical-bars", "diagonal-stripes", "plus",
      "disc",            "ring",          "checker",          "square-outline",
      "saltire",         "dot-lattice"};
  return label >= 0 && label < static_cast<int>(kToyClasses) ? names[label] : "?";
}

struct ToyDatasetConfig {
  std::uint64_t seed = 0;
  std::size_t n_samples = 1000;
  std::size_t resolution = 32;
  double noise = 0.05;

  void validate() const {
    std::string bad;
    if (resolution < 8 || resolution > 1024) bad += " resolution must lie in [8, 1024];";
    if (n_samples > (std::size_t{1} << 24)) bad += " n_samples above 16M;";
    if (!(noise >= 0.0 && noise <= 1.0)) bad += " noise must lie in [0, 1];";
    if (!bad.empty()) throw ValidationError("dataset config:" + bad);
  }
};

namespace detail {

// Single-channel mask in [0, 1] for one procedurally drawn class instance.
inline std::vector<float> draw_toy_mask(ToyClass cls, std::size_t res, Rng& rng) {
  std::vector<float> mask(res * res, 0.0f);
  const double r = static_cast<double>(res);
  const double cx = rng.uniform(0.3 * r, 0.7 * r);
  const double cy = rng.uniform(0.3 * r, 0.7 * r);
  const double period = rng.uniform(0.15 * r, 0.3 * r);
  const double phase = rng.uniform(0.0, period);
  const double thick = rng.uniform(0.06 * r, 0.12 * r);
  const double radius = rng.uniform(0.18 * r, 0.3 * r);
  auto stripe = [&](double t) {
    return std::fmod(t + phase + 4.0 * r, period) < 0.5 * period;
  };
  for (std::size_t y = 0; y < res; ++y) {
    for (std::size_t x = 0; x < res; ++x) {
      const double px = static_cast<double>(x) + 0.5;
      const double py = static_cast<double>(y) + 0.5;
      const double dx = px - cx, dy = py - cy;
      bool on = false;
      switch (cls) {
        case ToyClass::HorizontalBars: on = stripe(py); break;
        case ToyClass::VerticalBars: on = stripe(px); break;
        case ToyClass::DiagonalStripes: on = stripe((px + py) / std::sqrt(2.0)); break;
        case ToyClass::Plus:
          on = (std::abs(dx) < thick && std::abs(dy) < 1.6 * radius) ||
               (std::abs(dy) < thick && std::abs(dx) < 1.6 * radius);
          break;
        case ToyClass::Disc: on = std::hypot(dx, dy) < radius; break;
        case ToyClass::Ring: on = std::abs(std::hypot(dx, dy) - radius) < 0.6 * thick; break;
        case ToyClass::Checker: {
          const auto a = static_cast<long>(std::floor((px + phase) / (0.5 * period)));
          const auto b = static_cast<long>(std::floor((py + phase) / (0.5 * period)));
          on = ((a + b) & 1) == 0;
          break;
        }
        case ToyClass::SquareOutline: {
          const double m = std::max(std::abs(dx), std::abs(dy));
          on = std::abs(m - radius) < 0.6 * thick;
          break;
        }
        case ToyClass::Saltire:
          on = (std::abs(dx - dy) < 1.2 * thick || std::abs(dx + dy) < 1.2 * thick) &&
               std::max(std::abs(dx), std::abs(dy)) < 1.4 * radius;
          break;
        case ToyClass::DotLattice: {
          const double s = std::max(period, 5.0);
          const double fx = std::fmod(px + phase, s) - 0.5 * s;
          const double fy = std::fmod(py + phase, s) - 0.5 * s;
          on = std::hypot(fx, fy) < 0.22 * s;
          break;
        }
      }
      mask[y * res + x] = on ? 1.0f : 0.0f;
    }
  }
  return mask;
}

inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) {
  // splitmix64 over (seed, index)
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// 3-channel images in [0, 1], NCHW, with labels balanced to within one
// sample per class. Label i % 10 is assigned before a seeded shuffle.
class ToyDataset {
 public:
  static ToyDataset generate(const ToyDatasetConfig& cfg) {
    cfg.validate();
    ToyDataset ds;
    ds.cfg_ = cfg;
    const std::size_t n = cfg.n_samples, res = cfg.resolution;
    const std::size_t per = 3 * res * res;
    ds.labels_.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels_[i] = static_cast<int>(i % kToyClasses);
    Rng order(cfg.seed);
    std::shuffle(ds.labels_.begin(), ds.labels_.end(), order.engine());
    ds.images_.resize(n * per);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(detail::sample_seed(cfg.seed, i));
      const auto mask =
          detail::draw_toy_mask(static_cast<ToyClass>(ds.labels_[i]), res, rng);
      float fg[3], bg[3];
      for (int c = 0; c < 3; ++c) {
        fg[c] = static_cast<float>(rng.uniform(0.55, 1.0));
        bg[c] = static_cast<float>(rng.uniform(0.0, 0.35));
      }
      float* img = ds.images_.data() + i * per;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t p = 0; p < res * res; ++p) {
          double v = bg[c] + (fg[c] - bg[c]) * mask[p] + rng.normal(0.0, cfg.noise);
          img[c * res * res + p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    return ds;
  }

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t resolution() const { return cfg_.resolution; }
  std::size_t num_classes() const { return kToyClasses; }
  const ToyDatasetConfig& config() const { return cfg_; }
  std::span<const float> images() const { return images_; }
  std::span<const int> labels() const { return labels_; }

  template <typename T>
  Tensor<T> images_at(std::span<const std::size_t> indices) const {
    const std::size_t res = cfg_.resolution, per = 3 * res * res;
    std::vector<T> v(indices.size() * per);
    for (std::size_t b = 0; b < indices.size(); ++b) {
      const float* src = images_.data() + index_checked(indices[b]) * per;
      std::copy(src, src + per, v.begin() + static_cast<std::ptrdiff_t>(b * per));
    }
    return Tensor<T>::from({indices.size(), 3, res, res}, std::move(v));
  }

  std::vector<int> labels_at(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(labels_[index_checked(i)]);
    return out;
  }

 private:
  std::size_t index_checked(std::size_t i) const {
    if (i >= labels_.size()) {
      throw ValidationError("dataset index " + std::to_string(i) +
                            " out of range for " + std::to_string(labels_.size()) +
                            " samples");
    }
    return i;
  }

  ToyDatasetConfig cfg_;
  std::vector<float> images_;
  std::vector<int> labels_;
};

inline ToyDataset gen_toy_dataset(const ToyDatasetConfig& cfg) {
  return ToyDataset::generate(cfg);
}

}  // namespace vcm
