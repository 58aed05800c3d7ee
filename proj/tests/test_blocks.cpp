#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "support.hpp"

using namespace vcmtest;
using vcm::BlockConfig;
using vcm::Mode;
using vcm::ParameterSet;

namespace {

// Small block configuration: ratio 2, inner 2C, 4 states, full-rank Δ,
// positional table at 4x4.
const BlockConfig kSmall{2, 2, 4, 0, {4, 4}, vcm::ScanAlgorithm::Sequential};

template <typename Module>
ParameterSet<double> params_of(const Module& m) {
  ParameterSet<double> set;
  m.collect("m", set);
  return set;
}

const TD* find(const ParameterSet<double>& set, const std::string& name) {
  for (const auto& p : set.params)
    if (p.name == name) return &p.tensor;
  for (const auto& b : set.buffers)
    if (b.name == name) return &b.tensor;
  return nullptr;
}

// ---- straight-line oracle pieces, all on flat vectors ----

using Vec = std::vector<double>;

TD as_tensor(vcm::Shape s, Vec v) { return TD::from(std::move(s), std::move(v)); }

Vec bn_eval(const Vec& x, std::size_t C, std::size_t hw, const vcm::BatchNorm<double>& bn) {
  Vec y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const std::size_t c = (i / hw) % C;
    y[i] = (x[i] - bn.stats.mean[c]) / std::sqrt(bn.stats.var[c] + 1e-5) * bn.gamma[c] + bn.beta[c];
  }
  return y;
}

Vec conv_ref(const Vec& x, std::size_t C, std::size_t H, std::size_t W,
             const vcm::Conv2d<double>& conv) {
  const auto xt = as_tensor({1, C, H, W}, x);
  std::size_t oh = 0, ow = 0;
  if (!conv.depthwise) {
    return naive_conv2d(xt, conv.weight, conv.bias.defined() ? &conv.bias : nullptr, conv.stride,
                        conv.padding, oh, ow);
  }
  Vec out;
  const std::size_t k = conv.weight.dim(2);
  for (std::size_t c = 0; c < C; ++c) {
    const auto xc = as_tensor({1, 1, H, W}, Vec(x.begin() + c * H * W, x.begin() + (c + 1) * H * W));
    const auto wc = as_tensor({1, 1, k, k}, Vec(conv.weight.values().begin() + c * k * k,
                                                conv.weight.values().begin() + (c + 1) * k * k));
    const auto bc = TD::full({1}, conv.bias.defined() ? conv.bias[c] : 0.0);
    const auto yc = naive_conv2d(xc, wc, &bc, conv.stride, conv.padding, oh, ow);
    out.insert(out.end(), yc.begin(), yc.end());
  }
  return out;
}

Vec map(Vec v, double (*f)(double)) {
  for (auto& e : v) e = f(e);
  return v;
}

double gelu_ref(double v) { return 0.5 * v * (1 + std::erf(v / std::sqrt(2.0))); }
double silu_ref(double v) { return v / (1 + std::exp(-v)); }

Vec plus(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec mlp_ref(const Vec& x, std::size_t C, std::size_t H, std::size_t W,
            const vcm::ConvMlp<double>& m) {
  const std::size_t hid = m.expand.weight.dim(0), hw = H * W;
  auto h = map(bn_eval(conv_ref(x, C, H, W, m.expand), hid, hw, m.bn_expand), gelu_ref);
  h = map(bn_eval(conv_ref(h, hid, H, W, m.dw), hid, hw, m.bn_dw), gelu_ref);
  return bn_eval(conv_ref(h, hid, H, W, m.project), C, hw, m.bn_project);
}

// Eval-mode MDM block for batch 1 with the positional table at the input grid.
Vec mdm_ref(const Vec& x, std::size_t C, std::size_t H, std::size_t W,
            const vcm::MdmBlock<double>& b) {
  const std::size_t D = b.in_proj.weight.dim(0), hw = H * W;
  auto h = conv_ref(bn_eval(x, C, hw, b.pre_bn), C, H, W, b.in_proj);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += b.pos_table[i];
  h = map(conv_ref(h, D, H, W, b.dw), silu_ref);
  const auto mixed = naive_mix(as_tensor({1, D, H, W}, h), b.ssm, b.norm.gamma, b.norm.beta);
  const auto branch = bn_eval(conv_ref(mixed, D, H, W, b.out_proj), C, hw, b.out_bn);
  const auto x1 = plus(x, branch);
  return plus(x1, mlp_ref(bn_eval(x1, C, hw, b.mlp_bn), C, H, W, b.mlp));
}

}  // namespace

// ---------------------------------------------------------------------------
// Stem and downsampling

TEST(Stem, ReducesByFour) {
  Rng rng(1);
  auto stem = vcm::Stem<double>::make(3, 64, rng);
  vcm::NoGradGuard ng;
  EXPECT_EQ(stem.forward(TD::zeros({1, 3, 224, 224}), Mode::Eval).shape(),
            (vcm::Shape{1, 64, 56, 56}));
  auto small = vcm::Stem<double>::make(3, 16, rng);
  EXPECT_EQ(small.forward(randn({2, 3, 32, 32}, rng), Mode::Train).shape(),
            (vcm::Shape{2, 16, 8, 8}));
}

TEST(Stem, HalvesChannelsInTheMiddle) {
  Rng rng(2);
  const auto stem = vcm::Stem<double>::make(3, 64, rng);
  EXPECT_EQ(stem.conv1.weight.shape(), (vcm::Shape{32, 3, 3, 3}));
  EXPECT_EQ(stem.conv2.weight.shape(), (vcm::Shape{64, 32, 3, 3}));
}

TEST(Stem, IndivisibleResolutionRejected) {
  Rng rng(3);
  auto stem = vcm::Stem<double>::make(3, 16, rng);
  try {
    stem.forward(TD::zeros({1, 3, 30, 32}), Mode::Eval);
    FAIL() << "expected ValidationError";
  } catch (const vcm::ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible by 4"), std::string::npos) << e.what();
  }
}

TEST(Downsample, HalvesEvenGrids) {
  Rng rng(4);
  auto ds = vcm::DownsampleLayer<double>::make(8, 16, rng);
  for (std::size_t side : {2u, 4u, 14u, 56u}) {
    EXPECT_EQ(ds.forward(randn({1, 8, side, side}, rng), Mode::Eval).shape(),
              (vcm::Shape{1, 16, side / 2, side / 2}));
  }
}

// ---------------------------------------------------------------------------
// FFN block

TEST(FfnBlock, ZeroProjectionIsIdentity) {
  Rng rng(5);
  auto b = vcm::FfnBlock<double>::make(6, kSmall, rng);
  auto set = params_of(b);
  vcm::checks::identity_norms(set);
  std::fill(b.mlp.project.weight.values().begin(), b.mlp.project.weight.values().end(), 0.0);
  const auto x = randn({2, 6, 5, 5}, rng);
  EXPECT_TRUE(bitwise_equal(b.forward(x, Mode::Eval), x));
}

TEST(FfnBlock, ShapePreserved) {
  Rng rng(6);
  auto b = vcm::FfnBlock<double>::make(5, kSmall, rng);
  for (int k = 0; k < 5; ++k) {
    const std::size_t H = 1 + rng.index(7), W = 1 + rng.index(7), B = 1 + rng.index(3);
    EXPECT_EQ(b.forward(randn({B, 5, H, W}, rng), Mode::Train).shape(), (vcm::Shape{B, 5, H, W}));
  }
}

TEST(FfnBlock, HiddenWidthIsFourC) {
  Rng rng(7);
  const auto b = vcm::FfnBlock<double>::make(12, BlockConfig{}, rng);
  EXPECT_EQ(b.mlp.hidden_channels(), 48u);
  const auto set = params_of(b);
  std::size_t total = 0;
  for (const auto& p : set.params) total += p.tensor.numel();
  // expand + dw + project weights, three BN affines.
  EXPECT_EQ(total, 12u * 48 + 48 * 9 + 48 * 12 + 2 * (48 + 48 + 12));
}

TEST(FfnBlock, MatchesStraightLineOracle) {
  Rng rng(8);
  auto b = vcm::FfnBlock<double>::make(4, kSmall, rng);
  auto set = params_of(b);
  vcm::checks::condition_for_gradcheck(set, rng);
  const auto x = randn({1, 4, 5, 5}, rng);
  const Vec xv(x.values().begin(), x.values().end());
  const auto ref = plus(xv, mlp_ref(xv, 4, 5, 5, b.mlp));
  EXPECT_LT(max_abs_diff(b.forward(x, Mode::Eval).values(), ref), 1e-9);
}

// ---------------------------------------------------------------------------
// MDM block

TEST(MdmBlock, DoubleResidualPassthrough) {
  Rng rng(9);
  auto b = vcm::MdmBlock<double>::make(4, kSmall, rng);
  auto set = params_of(b);
  vcm::checks::identity_norms(set);
  std::fill(b.out_proj.weight.values().begin(), b.out_proj.weight.values().end(), 0.0);
  std::fill(b.mlp.project.weight.values().begin(), b.mlp.project.weight.values().end(), 0.0);
  for (std::size_t side : {1u, 3u, 4u}) {
    const auto x = randn({2, 4, side, side}, rng);
    EXPECT_TRUE(bitwise_equal(b.forward(x, Mode::Eval), x)) << side;
  }
}

TEST(MdmBlock, SingleTokenInputIsFinite) {
  Rng rng(10);
  auto b = vcm::MdmBlock<double>::make(6, kSmall, rng);
  const auto y = b.forward(randn({1, 6, 1, 1}, rng), Mode::Eval);
  ASSERT_EQ(y.shape(), (vcm::Shape{1, 6, 1, 1}));
  for (double v : y.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(MdmBlock, ShapePreserved) {
  Rng rng(11);
  auto b = vcm::MdmBlock<double>::make(4, kSmall, rng);
  for (std::size_t H = 1; H <= 7; H += 2)
    for (std::size_t W = 2; W <= 6; W += 2) {
      EXPECT_EQ(b.forward(randn({2, 4, H, W}, rng), Mode::Train).shape(), (vcm::Shape{2, 4, H, W}));
    }
}

TEST(MdmBlock, NoMultiplicativeGate) {
  Rng rng(12);
  const auto b = vcm::MdmBlock<double>::make(8, kSmall, rng);
  // in_proj produces exactly Dinner channels: no second half for a gate.
  EXPECT_EQ(b.in_proj.weight.dim(0), 16u);
  EXPECT_EQ(b.out_proj.weight.dim(1), 16u);
}

TEST(MdmBlock, MatchesStraightLineOracle) {
  Rng rng(13);
  for (auto alg : {vcm::ScanAlgorithm::Sequential, vcm::ScanAlgorithm::Parallel}) {
    BlockConfig cfg = kSmall;
    cfg.scan = alg;
    auto b = vcm::MdmBlock<double>::make(8, cfg, rng);
    auto set = params_of(b);
    vcm::checks::condition_for_gradcheck(set, rng);
    const auto x = randn({1, 8, 4, 4}, rng);
    const Vec xv(x.values().begin(), x.values().end());
    EXPECT_LT(max_abs_diff(b.forward(x, Mode::Eval).values(), mdm_ref(xv, 8, 4, 4, b)), 1e-5);
  }
}

TEST(MdmBlock, NonFiniteInputReported) {
  Rng rng(14);
  auto b = vcm::MdmBlock<double>::make(4, kSmall, rng);
  auto x = randn({1, 4, 3, 3}, rng);
  x[5] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(b.forward(x, Mode::Eval), vcm::NumericError);
}

// ---------------------------------------------------------------------------
// Positional embedding

TEST(PositionalEmbedding, MatchingGridIsIdentity) {
  Rng rng(15);
  const auto table = randn({3, 4, 5}, rng);
  EXPECT_TRUE(bitwise_equal(vcm::positional_embedding({4, 5}, table), table));
}

TEST(PositionalEmbedding, BilinearCenterValue) {
  const auto up = vcm::positional_embedding({3, 3}, TD::from({1, 2, 2}, {1, 2, 3, 4}));
  ASSERT_EQ(up.shape(), (vcm::Shape{1, 3, 3}));
  EXPECT_NEAR(up[4], 2.5, 1e-12);
  // Corners clamp to the source corners.
  EXPECT_NEAR(up[0], 1.0, 1e-12);
  EXPECT_NEAR(up[8], 4.0, 1e-12);
}

TEST(PositionalEmbedding, ConstantTableStaysConstant) {
  const auto table = TD::full({2, 7, 7}, -0.75);
  for (auto g : {vcm::GridShape{1, 1}, vcm::GridShape{3, 5}, vcm::GridShape{14, 14}}) {
    const auto y = vcm::positional_embedding(g, table);
    EXPECT_EQ(y.shape(), (vcm::Shape{2, g.height, g.width}));
    for (double v : y.values()) EXPECT_NEAR(v, -0.75, 1e-12);
  }
}

TEST(PositionalEmbedding, MatchesHalfPixelFormula) {
  Rng rng(16);
  const auto table = randn({1, 3, 4}, rng);
  const auto y = vcm::positional_embedding({5, 7}, table);
  auto src = [](std::size_t i, std::size_t from, std::size_t to) {
    double s = (i + 0.5) * double(from) / double(to) - 0.5;
    return std::clamp(s, 0.0, double(from - 1));
  };
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 7; ++c) {
      const double sr = src(r, 3, 5), sc = src(c, 4, 7);
      const std::size_t r0 = std::size_t(sr), c0 = std::size_t(sc);
      const std::size_t r1 = std::min<std::size_t>(r0 + 1, 2), c1 = std::min<std::size_t>(c0 + 1, 3);
      const double fr = sr - r0, fc = sc - c0;
      const double v = (1 - fr) * ((1 - fc) * table[r0 * 4 + c0] + fc * table[r0 * 4 + c1]) +
                       fr * ((1 - fc) * table[r1 * 4 + c0] + fc * table[r1 * 4 + c1]);
      EXPECT_NEAR(y[r * 7 + c], v, 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Gradients through whole blocks (eval-mode norms)

namespace {

template <typename Block>
double block_grad_error(Block& b, const TD& x0, Rng& rng) {
  auto set = params_of(b);
  vcm::checks::condition_for_gradcheck(set, rng);
  auto x = x0;
  std::vector<TD> inputs{x};
  for (auto& p : set.params) inputs.push_back(p.tensor);
  return grad_error([&] { return probe(b.forward(x, Mode::Eval), 77); }, inputs, 1e-5);
}

}  // namespace

TEST(BlockGradients, Ffn) {
  Rng rng(17);
  auto b = vcm::FfnBlock<double>::make(4, kSmall, rng);
  EXPECT_LT(block_grad_error(b, randn({1, 4, 4, 4}, rng), rng), 1e-3);
}

TEST(BlockGradients, Downsample) {
  Rng rng(18);
  auto b = vcm::DownsampleLayer<double>::make(4, 6, rng);
  EXPECT_LT(block_grad_error(b, randn({1, 4, 4, 4}, rng), rng), 1e-3);
}

TEST(BlockGradients, Stem) {
  Rng rng(19);
  auto b = vcm::Stem<double>::make(3, 4, rng);
  EXPECT_LT(block_grad_error(b, randn({1, 3, 8, 8}, rng), rng), 1e-3);
}

TEST(BlockGradients, Mdm) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(20 + seed);
    auto b = vcm::MdmBlock<double>::make(4, kSmall, rng);
    EXPECT_LT(block_grad_error(b, randn({1, 4, 4, 4}, rng), rng), 1e-3) << seed;
  }
}

TEST(BlockGradients, MdmLibraryCheckOnEightChannels) {
  Rng rng(30);
  auto b = vcm::MdmBlock<double>::make(8, kSmall, rng);
  auto set = params_of(b);
  vcm::checks::condition_for_gradcheck(set, rng);
  auto x = randn({1, 8, 4, 4}, rng);
  std::vector<TD> inputs{x};
  for (auto& p : set.params) inputs.push_back(p.tensor);
  const auto rep = vcm::finite_diff_check<double>(
      [&] { return probe(b.forward(x, Mode::Eval), 31); }, inputs, 1e-5, 1e-3, {16, 3, 1e-6});
  EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst;
}

TEST(BlockGradients, TrainModeBatchNormPath) {
  Rng rng(32);
  auto b = vcm::FfnBlock<double>::make(3, kSmall, rng);
  auto set = params_of(b);
  vcm::checks::condition_for_gradcheck(set, rng);
  auto x = randn({2, 3, 3, 3}, rng);
  std::vector<TD> inputs{x};
  for (auto& p : set.params) inputs.push_back(p.tensor);
  // Running stats drift on every call; the output does not depend on them in train mode.
  EXPECT_LT(grad_error([&] { return probe(b.forward(x, Mode::Train), 33); }, inputs, 1e-5), 1e-3);
}

TEST(Parameters, NamesAreUniqueAndStable) {
  Rng rng(34);
  const auto b = vcm::MdmBlock<double>::make(4, kSmall, rng);
  const auto set = params_of(b);
  std::set<std::string> names;
  for (const auto& p : set.params) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  for (const auto& p : set.buffers) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_NE(find(set, "m.ssm.theta"), nullptr);
  EXPECT_NE(find(set, "m.pos_table"), nullptr);
  EXPECT_NE(find(set, "m.pre_bn.running_var"), nullptr);
  EXPECT_EQ(find(set, "m.ssm.w_delta_down"), nullptr);
}
