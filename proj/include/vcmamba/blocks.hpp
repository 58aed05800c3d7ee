#pragma once

#include <string>
#include <vector>

#include "vcmamba/ops.hpp"
#include "vcmamba/random.hpp"
#include "vcmamba/scan_paths.hpp"
#include "vcmamba/ssm.hpp"
#include "vcmamba/tensor.hpp"

namespace vcm {

inline constexpr double kInitStd = 0.02;

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Learnable parameters and persistent buffers (BN running statistics) of a
// module tree, keyed by stable dotted names. Tensors alias module storage.
template <typename T>
struct ParameterSet {
  std::vector<NamedTensor<T>> params;
  std::vector<NamedTensor<T>> buffers;

  void param(const std::string& name, const Tensor<T>& t) {
    if (t.defined()) params.push_back({name, t});
  }
  void buffer(const std::string& name, const Tensor<T>& t) {
    if (t.defined()) buffers.push_back({name, t});
  }
};

// Flags every parameter of a module for gradient recording.
template <typename T, typename Module>
void mark_trainable(const Module& module) {
  ParameterSet<T> set;
  module.collect("", set);
  for (auto& p : set.params) p.tensor.set_requires_grad(true);
}

struct BlockConfig {
  std::size_t ffn_ratio = 4;
  std::size_t inner_expand = 2;
  std::size_t state_size = kDefaultStateSize;
  // 0: full-rank Δ projection.
  std::size_t delta_rank = 0;
  // Grid at which the positional table is stored.
  GridShape pos_grid{7, 7};
  ScanAlgorithm scan = ScanAlgorithm::Sequential;
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool depthwise = false;

  static Conv2d make(std::size_t cin, std::size_t cout, std::size_t kernel,
                     std::size_t stride, std::size_t padding, bool with_bias,
                     Rng& rng) {
    Conv2d c;
    c.weight = trunc_normal_tensor<T>({cout, cin, kernel, kernel}, rng, kInitStd);
    if (with_bias) c.bias = Tensor<T>::zeros({cout});
    c.stride = stride;
    c.padding = padding;
    return c;
  }

  static Conv2d make_depthwise(std::size_t channels, std::size_t kernel,
                               std::size_t padding, bool with_bias, Rng& rng) {
    Conv2d c;
    c.weight =
        trunc_normal_tensor<T>({channels, 1, kernel, kernel}, rng, kInitStd);
    if (with_bias) c.bias = Tensor<T>::zeros({channels});
    c.padding = padding;
    c.depthwise = true;
    return c;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return depthwise ? depthwise_conv2d(x, weight, bias, stride, padding)
                     : conv2d(x, weight, bias, stride, padding);
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    out.param(prefix + ".weight", weight);
    out.param(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  RunningStats<T> stats;

  static BatchNorm make(std::size_t channels) {
    return {Tensor<T>::full({channels}, T(1)), Tensor<T>::zeros({channels}),
            RunningStats<T>::identity(channels)};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return batch_norm(x, gamma, beta, stats, mode);
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    out.param(prefix + ".weight", gamma);
    out.param(prefix + ".bias", beta);
    out.buffer(prefix + ".running_mean", stats.mean);
    out.buffer(prefix + ".running_var", stats.var);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm make(std::size_t features) {
    return {Tensor<T>::full({features}, T(1)), Tensor<T>::zeros({features})};
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    out.param(prefix + ".weight", gamma);
    out.param(prefix + ".bias", beta);
  }
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  static Linear make(std::size_t din, std::size_t dout, Rng& rng) {
    return {trunc_normal_tensor<T>({dout, din}, rng, kInitStd),
            Tensor<T>::zeros({dout})};
  }

  Tensor<T> forward(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    out.param(prefix + ".weight", weight);
    out.param(prefix + ".bias", bias);
  }
};

// ---------------------------------------------------------------------------
// Blocks

// conv3x3/s2 -> BN -> ReLU -> conv3x3/s2 -> BN -> ReLU; 3 -> C0/2 -> C0.
template <typename T>
struct Stem {
  Conv2d<T> conv1, conv2;
  BatchNorm<T> bn1, bn2;

  static Stem make(std::size_t in_channels, std::size_t out_channels, Rng& rng) {
    const std::size_t mid = out_channels / 2;
    Stem s;
    s.conv1 = Conv2d<T>::make(in_channels, mid, 3, 2, 1, false, rng);
    s.bn1 = BatchNorm<T>::make(mid);
    s.conv2 = Conv2d<T>::make(mid, out_channels, 3, 2, 1, false, rng);
    s.bn2 = BatchNorm<T>::make(out_channels);
    return s;
  }

  Tensor<T> forward(const Tensor<T>& image, Mode mode) {
    require_rank(image, 4, "stem input");
    if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
      throw ValidationError("stem: input resolution " +
                            std::to_string(image.dim(2)) + "x" +
                            std::to_string(image.dim(3)) +
                            " must be divisible by 4");
    }
    auto x = relu(bn1.forward(conv1.forward(image), mode));
    return relu(bn2.forward(conv2.forward(x), mode));
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    conv1.collect(prefix + ".conv1", out);
    bn1.collect(prefix + ".bn1", out);
    conv2.collect(prefix + ".conv2", out);
    bn2.collect(prefix + ".bn2", out);
  }
};

// 1x1 expand -> BN -> GeLU -> 3x3 depthwise -> BN -> GeLU -> 1x1 project -> BN.
template <typename T>
struct ConvMlp {
  Conv2d<T> expand, dw, project;
  BatchNorm<T> bn_expand, bn_dw, bn_project;

  static ConvMlp make(std::size_t channels, std::size_t ratio, Rng& rng) {
    const std::size_t hidden = channels * ratio;
    ConvMlp m;
    m.expand = Conv2d<T>::make(channels, hidden, 1, 1, 0, false, rng);
    m.bn_expand = BatchNorm<T>::make(hidden);
    m.dw = Conv2d<T>::make_depthwise(hidden, 3, 1, false, rng);
    m.bn_dw = BatchNorm<T>::make(hidden);
    m.project = Conv2d<T>::make(hidden, channels, 1, 1, 0, false, rng);
    m.bn_project = BatchNorm<T>::make(channels);
    return m;
  }

  std::size_t hidden_channels() const { return expand.weight.dim(0); }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    auto h = gelu(bn_expand.forward(expand.forward(x), mode));
    h = gelu(bn_dw.forward(dw.forward(h), mode));
    return bn_project.forward(project.forward(h), mode);
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    expand.collect(prefix + ".expand", out);
    bn_expand.collect(prefix + ".bn_expand", out);
    dw.collect(prefix + ".dw", out);
    bn_dw.collect(prefix + ".bn_dw", out);
    project.collect(prefix + ".project", out);
    bn_project.collect(prefix + ".bn_project", out);
  }
};

template <typename T>
struct FfnBlock {
  ConvMlp<T> mlp;

  static FfnBlock make(std::size_t channels, const BlockConfig& cfg, Rng& rng) {
    return {ConvMlp<T>::make(channels, cfg.ffn_ratio, rng)};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return add(x, mlp.forward(x, mode));
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    mlp.collect(prefix + ".mlp", out);
  }
};

// Strided 3x3 conv (stride 2, padding 1) followed by BN.
template <typename T>
struct DownsampleLayer {
  Conv2d<T> conv;
  BatchNorm<T> bn;

  static DownsampleLayer make(std::size_t cin, std::size_t cout, Rng& rng) {
    return {Conv2d<T>::make(cin, cout, 3, 2, 1, false, rng),
            BatchNorm<T>::make(cout)};
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    return bn.forward(conv.forward(x), mode);
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    conv.collect(prefix + ".conv", out);
    bn.collect(prefix + ".bn", out);
  }
};

// Stored table at its native grid, bilinearly resampled for other grids.
template <typename T>
Tensor<T> positional_embedding(const GridShape& grid, const Tensor<T>& stored) {
  require_rank(stored, 3, "positional table");
  return bilinear_resize(stored, grid.height, grid.width);
}

// Multi-directional Mamba block:
//   x1  = x + OutBN(OutProj(LN(Σ_paths Scan(SiLU(DW(InProj(BN(x)) + pos)))))))
//   out = x1 + ConvMlp(BN(x1))
template <typename T>
struct MdmBlock {
  BatchNorm<T> pre_bn;
  Conv2d<T> in_proj;
  Tensor<T> pos_table;  // [Dinner, H0, W0]
  Conv2d<T> dw;
  SsmParams<T> ssm;
  LayerNorm<T> norm;
  Conv2d<T> out_proj;
  BatchNorm<T> out_bn;
  BatchNorm<T> mlp_bn;
  ConvMlp<T> mlp;
  ScanAlgorithm scan = ScanAlgorithm::Sequential;

  static MdmBlock make(std::size_t channels, const BlockConfig& cfg, Rng& rng) {
    const std::size_t inner = channels * cfg.inner_expand;
    MdmBlock m;
    m.pre_bn = BatchNorm<T>::make(channels);
    m.in_proj = Conv2d<T>::make(channels, inner, 1, 1, 0, true, rng);
    m.pos_table = trunc_normal_tensor<T>(
        {inner, cfg.pos_grid.height, cfg.pos_grid.width}, rng, kInitStd);
    m.dw = Conv2d<T>::make_depthwise(inner, 3, 1, true, rng);
    m.ssm = SsmParams<T>::init(inner, cfg.state_size, cfg.delta_rank, rng);
    m.norm = LayerNorm<T>::make(inner);
    m.out_proj = Conv2d<T>::make(inner, channels, 1, 1, 0, false, rng);
    m.out_bn = BatchNorm<T>::make(channels);
    m.mlp_bn = BatchNorm<T>::make(channels);
    m.mlp = ConvMlp<T>::make(channels, cfg.ffn_ratio, rng);
    m.scan = cfg.scan;
    return m;
  }

  std::size_t inner_channels() const { return in_proj.weight.dim(0); }

  // Token mixing on already normalized input; the residual is added by the
  // caller.
  Tensor<T> mamba_branch(const Tensor<T>& x) {
    const GridShape grid{x.dim(2), x.dim(3)};
    auto h = add_batch_broadcast(in_proj.forward(x),
                                 positional_embedding(grid, pos_table));
    h = silu(dw.forward(h));
    const auto paths = generate_all_paths(grid);
    h = multi_directional_mix(h, ssm, norm.gamma, norm.beta,
                              std::span<const PathOrder>(paths), scan);
    return out_proj.forward(h);
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode) {
    require_rank(x, 4, "mdm block input");
    auto x1 = add(x, out_bn.forward(mamba_branch(pre_bn.forward(x, mode)), mode));
    return add(x1, mlp.forward(mlp_bn.forward(x1, mode), mode));
  }

  void collect(const std::string& prefix, ParameterSet<T>& out) const {
    pre_bn.collect(prefix + ".pre_bn", out);
    in_proj.collect(prefix + ".in_proj", out);
    out.param(prefix + ".pos_table", pos_table);
    dw.collect(prefix + ".dw", out);
    const std::string s = prefix + ".ssm";
    out.param(s + ".a_log", ssm.a_log);
    out.param(s + ".d_skip", ssm.d_skip);
    out.param(s + ".w_b", ssm.w_b);
    out.param(s + ".w_c", ssm.w_c);
    out.param(s + ".w_delta", ssm.w_delta);
    out.param(s + ".w_delta_down", ssm.w_delta_down);
    out.param(s + ".w_delta_up", ssm.w_delta_up);
    out.param(s + ".b_delta", ssm.b_delta);
    out.param(s + ".theta", ssm.theta);
    norm.collect(prefix + ".norm", out);
    out_proj.collect(prefix + ".out_proj", out);
    out_bn.collect(prefix + ".out_bn", out);
    mlp_bn.collect(prefix + ".mlp_bn", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

}  // namespace vcm
