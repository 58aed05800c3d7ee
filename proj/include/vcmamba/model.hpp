#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "vcmamba/blocks.hpp"
#include "vcmamba/ops.hpp"
#include "vcmamba/random.hpp"
#include "vcmamba/tensor.hpp"

namespace vcm {

inline constexpr std::size_t kStageCount = 4;

enum class BlockKind : std::uint8_t { Ffn, Mdm };

inline char block_letter(BlockKind k) { return k == BlockKind::Ffn ? 'F' : 'M'; }

inline std::string stage_string(const std::vector<BlockKind>& blocks) {
  std::string s;
  for (auto k : blocks) s.push_back(block_letter(k));
  return s;
}

inline std::vector<BlockKind> parse_stage_string(std::string_view text) {
  std::vector<BlockKind> out;
  for (char c : text) {
    if (c == 'F' || c == 'f') {
      out.push_back(BlockKind::Ffn);
    } else if (c == 'M' || c == 'm') {
      out.push_back(BlockKind::Mdm);
    } else if (c != ' ') {
      throw ValidationError(std::string("stage block list: unknown block '") +
                            c + "' (expected F or M)");
    }
  }
  return out;
}

struct ModelSpec {
  std::string name = "custom";
  std::array<std::size_t, kStageCount> channels{};
  std::array<std::vector<BlockKind>, kStageCount> stages{};
  std::size_t num_classes = 1000;
  std::size_t input_resolution = 224;
  std::size_t in_channels = 3;
  std::size_t ffn_ratio = 4;
  std::size_t inner_expand = 2;
  std::size_t state_size = kDefaultStateSize;
  // 0 selects the full-rank Δ projection.
  std::size_t delta_rank = 0;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    for (std::size_t s = 0; s < kStageCount; ++s) {
      if (channels[s] == 0) {
        v.push_back("stage " + std::to_string(s + 1) + " has zero channels");
      }
      if (s + 1 < kStageCount) {
        for (auto k : stages[s]) {
          if (k == BlockKind::Mdm) {
            v.push_back("stage " + std::to_string(s + 1) +
                        " contains an MDM block; MDM is only allowed in stage 4");
            break;
          }
        }
      }
    }
    if (channels[0] % 2 != 0) {
      v.push_back("stem width C0=" + std::to_string(channels[0]) +
                  " must be even");
    }
    if (num_classes == 0) v.push_back("num_classes must be positive");
    if (input_resolution == 0 || input_resolution % 32 != 0) {
      v.push_back("input_resolution " + std::to_string(input_resolution) +
                  " must be a positive multiple of 32");
    }
    if (in_channels == 0) v.push_back("in_channels must be positive");
    if (ffn_ratio == 0) v.push_back("ffn_ratio must be positive");
    if (inner_expand == 0) v.push_back("inner_expand must be positive");
    if (state_size == 0) v.push_back("state_size must be positive");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model spec '" + name + "':";
    for (const auto& e : v) msg += "\n  - " + e;
    throw ValidationError(msg);
  }

  GridShape pos_grid() const {
    return {input_resolution / 32, input_resolution / 32};
  }

  BlockConfig block_config() const {
    BlockConfig cfg;
    cfg.ffn_ratio = ffn_ratio;
    cfg.inner_expand = inner_expand;
    cfg.state_size = state_size;
    cfg.delta_rank = delta_rank;
    cfg.pos_grid = pos_grid();
    return cfg;
  }

  bool operator==(const ModelSpec&) const = default;
};

namespace detail {

inline std::vector<BlockKind> repeat(BlockKind k, std::size_t n) {
  return std::vector<BlockKind>(n, k);
}

}  // namespace detail

inline std::vector<std::string> preset_names() { return {"S", "M", "B", "Nano"}; }

// Architecture-table variants plus the desk-scale Nano preset.
inline ModelSpec model_preset(std::string_view name) {
  using detail::repeat;
  ModelSpec spec;
  const auto F = BlockKind::Ffn;
  if (name == "S" || name == "s") {
    spec.name = "S";
    spec.channels = {32, 64, 144, 288};
    spec.stages = {repeat(F, 4), repeat(F, 4), repeat(F, 12),
                   parse_stage_string("MFMFMFMF")};
  } else if (name == "M" || name == "m") {
    spec.name = "M";
    spec.channels = {48, 96, 224, 448};
    spec.stages = {repeat(F, 4), repeat(F, 4), repeat(F, 12),
                   parse_stage_string("MFMFMM")};
  } else if (name == "B" || name == "b") {
    spec.name = "B";
    spec.channels = {64, 128, 320, 512};
    spec.stages = {repeat(F, 4), repeat(F, 4), repeat(F, 12),
                   parse_stage_string("MFMFMM")};
  } else if (name == "Nano" || name == "nano") {
    spec.name = "Nano";
    spec.channels = {16, 32, 64, 128};
    spec.stages = {repeat(F, 2), repeat(F, 2), repeat(F, 4),
                   parse_stage_string("MFM")};
    spec.num_classes = 10;
    spec.input_resolution = 32;
    return spec;
  } else {
    throw ValidationError("unknown model preset '" + std::string(name) +
                          "' (expected S, M, B or Nano)");
  }
  // Low-rank Δ for the table variants: ceil(C3 / 16).
  spec.delta_rank = (spec.channels[3] + 15) / 16;
  return spec;
}

template <typename T>
using Block = std::variant<FfnBlock<T>, MdmBlock<T>>;

template <typename T>
struct Stage {
  BatchNorm<T> entry_bn;
  std::vector<Block<T>> blocks;
  BatchNorm<T> exit_bn;

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    auto h = entry_bn.forward(x, mode);
    for (auto& block : blocks) {
      h = std::visit([&](auto& b) { return b.forward(h, mode); }, block);
    }
    return exit_bn.forward(h, mode);
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    entry_bn.collect(prefix + ".entry_bn", out);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string name = prefix + ".blocks." + std::to_string(i);
      std::visit([&](const auto& b) { b.collect(name, out); }, blocks[i]);
    }
    exit_bn.collect(prefix + ".exit_bn", out);
  }
};

template <typename T>
struct ForwardTrace {
  std::array<Tensor<T>, kStageCount> stage_outputs;
  Tensor<T> logits;
};

template <typename T>
class Model {
 public:
  Model() = default;

  // Deterministic in (spec, seed).
  static Model build(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model m;
    m.spec_ = spec;
    Rng rng(seed);
    const BlockConfig cfg = spec.block_config();
    m.stem_ = Stem<T>::make(spec.in_channels, spec.channels[0], rng);
    for (std::size_t s = 0; s < kStageCount; ++s) {
      if (s > 0) {
        m.downsamples_[s - 1] = DownsampleLayer<T>::make(
            spec.channels[s - 1], spec.channels[s], rng);
      }
      auto& stage = m.stages_[s];
      stage.entry_bn = BatchNorm<T>::make(spec.channels[s]);
      for (auto kind : spec.stages[s]) {
        if (kind == BlockKind::Ffn) {
          stage.blocks.emplace_back(FfnBlock<T>::make(spec.channels[s], cfg, rng));
        } else {
          stage.blocks.emplace_back(MdmBlock<T>::make(spec.channels[s], cfg, rng));
        }
      }
      stage.exit_bn = BatchNorm<T>::make(spec.channels[s]);
    }
    m.head_ = Linear<T>::make(spec.channels[kStageCount - 1], spec.num_classes, rng);
    for (auto& p : m.parameters().params) p.tensor.set_requires_grad(true);
    return m;
  }

  const ModelSpec& spec() const { return spec_; }

  ForwardTrace<T> forward_trace(const Tensor<T>& images, Mode mode) {
    require_rank(images, 4, "model input");
    if (images.dim(1) != spec_.in_channels) {
      throw ShapeError("model input " + shape_str(images.shape()) + " must have " +
                       std::to_string(spec_.in_channels) + " channels");
    }
    if (images.dim(2) % 32 != 0 || images.dim(3) % 32 != 0 ||
        images.dim(2) == 0 || images.dim(3) == 0) {
      throw ValidationError("model input resolution " +
                            std::to_string(images.dim(2)) + "x" +
                            std::to_string(images.dim(3)) +
                            " must be divisible by 32");
    }
    ForwardTrace<T> trace;
    auto h = stem_.forward(images, mode);
    for (std::size_t s = 0; s < kStageCount; ++s) {
      if (s > 0) h = downsamples_[s - 1].forward(h, mode);
      h = stages_[s].forward(h, mode);
      trace.stage_outputs[s] = h;
    }
    trace.logits = head_.forward(global_avg_pool(h));
    return trace;
  }

  Tensor<T> forward(const Tensor<T>& images, Mode mode) {
    return forward_trace(images, mode).logits;
  }

  ParameterSet<T> parameters() const {
    ParameterSet<T> out;
    stem_.collect("stem", out);
    for (std::size_t s = 0; s < kStageCount; ++s) {
      if (s > 0) {
        downsamples_[s - 1].collect("downsample" + std::to_string(s), out);
      }
      stages_[s].collect("stage" + std::to_string(s + 1), out);
    }
    head_.collect("head", out);
    return out;
  }

  void zero_grad() {
    for (auto& p : parameters().params) p.tensor.zero_grad();
  }

  Stem<T>& stem() { return stem_; }
  Stage<T>& stage(std::size_t i) { return stages_.at(i); }
  DownsampleLayer<T>& downsample(std::size_t i) { return downsamples_.at(i); }
  Linear<T>& head() { return head_; }

 private:
  ModelSpec spec_;
  Stem<T> stem_;
  std::array<DownsampleLayer<T>, kStageCount - 1> downsamples_;
  std::array<Stage<T>, kStageCount> stages_;
  Linear<T> head_;
};

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  return Model<T>::build(spec, seed);
}

// ---------------------------------------------------------------------------
// Accounting

struct CountEntry {
  std::string module;
  std::uint64_t count = 0;
};

struct CountReport {
  std::vector<CountEntry> modules;  // stem, stage1, downsample1, ..., head
  std::uint64_t total = 0;
  // BN running statistics; stored but not learned.
  std::uint64_t buffers = 0;
};

// Exact stored-float counts grouped by top-level module.
template <typename T>
CountReport count_params(const Model<T>& model) {
  const auto set = model.parameters();
  CountReport report;
  std::map<std::string, std::size_t> index;
  for (const auto& p : set.params) {
    const std::string top = p.name.substr(0, p.name.find('.'));
    auto it = index.find(top);
    if (it == index.end()) {
      it = index.emplace(top, report.modules.size()).first;
      report.modules.push_back({top, 0});
    }
    report.modules[it->second].count += p.tensor.numel();
    report.total += p.tensor.numel();
  }
  for (const auto& b : set.buffers) report.buffers += b.tensor.numel();
  return report;
}

// Analytic multiply-accumulate counts. Conventions:
//   conv       Ho*Wo*Cout*(Cin/groups)*k*k
//   linear     Din*Dout
//   projection per-token channel mixes for Δ, B, C, computed once per block
//   scan       3*L*Dinner*Ns per direction (two update terms + C contraction)
// Normalization, activations, pooling and additions count as zero.
inline CountReport count_macs(const ModelSpec& spec, std::size_t resolution) {
  spec.validate();
  if (resolution == 0 || resolution % 32 != 0) {
    throw ValidationError("MAC resolution " + std::to_string(resolution) +
                          " must be a positive multiple of 32");
  }
  auto conv = [](std::size_t out_hw, std::size_t cin, std::size_t cout,
                 std::size_t k, std::size_t groups) -> std::uint64_t {
    return static_cast<std::uint64_t>(out_hw) * cout * (cin / groups) * k * k;
  };
  CountReport r;
  auto push = [&r](std::string name, std::uint64_t macs) {
    r.modules.push_back({std::move(name), macs});
    r.total += macs;
  };
  std::size_t side = resolution / 2;
  const std::size_t c0 = spec.channels[0], mid = c0 / 2;
  std::uint64_t stem = conv(side * side, spec.in_channels, mid, 3, 1);
  side /= 2;
  stem += conv(side * side, mid, c0, 3, 1);
  push("stem", stem);
  for (std::size_t s = 0; s < kStageCount; ++s) {
    const std::size_t c = spec.channels[s];
    if (s > 0) {
      side /= 2;
      push("downsample" + std::to_string(s),
           conv(side * side, spec.channels[s - 1], c, 3, 1));
    }
    const std::size_t l = side * side, hidden = c * spec.ffn_ratio;
    const std::uint64_t mlp = conv(l, c, hidden, 1, 1) +
                              conv(l, hidden, hidden, 3, hidden) +
                              conv(l, hidden, c, 1, 1);
    std::uint64_t stage = 0;
    for (auto kind : spec.stages[s]) {
      stage += mlp;
      if (kind == BlockKind::Mdm) {
        const std::size_t d = c * spec.inner_expand, n = spec.state_size;
        const std::uint64_t delta =
            spec.delta_rank == 0 ? std::uint64_t{d} * d
                                 : std::uint64_t{2} * d * spec.delta_rank;
        stage += conv(l, c, d, 1, 1) + conv(l, d, d, 3, d) + conv(l, d, c, 1, 1);
        stage += l * (delta + std::uint64_t{2} * n * d);
        stage += 4 * std::uint64_t{3} * l * d * n;
      }
    }
    push("stage" + std::to_string(s + 1), stage);
  }
  push("head", std::uint64_t{spec.channels[kStageCount - 1]} * spec.num_classes);
  return r;
}

template <typename T>
CountReport count_macs(const Model<T>& model, std::size_t resolution) {
  return count_macs(model.spec(), resolution);
}

}  // namespace vcm
