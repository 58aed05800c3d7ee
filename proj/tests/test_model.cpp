#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "support.hpp"

using namespace vcmtest;
using vcm::BlockKind;
using vcm::Mode;
using vcm::ModelSpec;

namespace {

using ModelF = vcm::Model<float>;
using TF = vcm::Tensor<float>;

TF images(std::size_t batch, std::size_t res, std::uint64_t seed) {
  Rng rng(seed);
  return vcm::random_normal<float>({batch, 3, res, res}, rng);
}

bool same_bits(const TF& a, const TF& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

template <typename T>
bool same_state(const vcm::Model<T>& a, const vcm::Model<T>& b) {
  const auto sa = a.parameters(), sb = b.parameters();
  if (sa.params.size() != sb.params.size() || sa.buffers.size() != sb.buffers.size()) return false;
  auto eq = [](const auto& x, const auto& y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].name != y[i].name || !bitwise_equal(x[i].tensor, y[i].tensor)) return false;
    }
    return true;
  };
  return eq(sa.params, sb.params) && eq(sa.buffers, sb.buffers);
}

// A few train-mode steps move BN statistics and weights off their init.
ModelF trained_nano(std::uint64_t seed) {
  auto m = ModelF::build(vcm::model_preset("Nano"), seed);
  vcm::AdamW<float> opt(m.parameters().params, {});
  const std::vector<int> labels{0, 1, 2, 3};
  for (int k = 0; k < 2; ++k) {
    opt.zero_grad();
    vcm::backward(vcm::softmax_cross_entropy(m.forward(images(4, 32, 100 + k), Mode::Train), labels));
    opt.step();
  }
  return m;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("vcmamba_test_" + name)).string();
}

}  // namespace

// ---------------------------------------------------------------------------
// Presets and validation

TEST(Presets, ArchitectureTable) {
  const auto s = vcm::model_preset("S");
  EXPECT_EQ(s.channels, (std::array<std::size_t, 4>{32, 64, 144, 288}));
  EXPECT_EQ(vcm::stage_string(s.stages[2]), "FFFFFFFFFFFF");
  EXPECT_EQ(vcm::stage_string(s.stages[3]), "MFMFMFMF");
  const auto m = vcm::model_preset("M");
  EXPECT_EQ(m.channels, (std::array<std::size_t, 4>{48, 96, 224, 448}));
  EXPECT_EQ(vcm::stage_string(m.stages[3]), "MFMFMM");
  const auto b = vcm::model_preset("B");
  EXPECT_EQ(b.channels, (std::array<std::size_t, 4>{64, 128, 320, 512}));
  EXPECT_EQ(vcm::stage_string(b.stages[0]), "FFFF");
  EXPECT_EQ(vcm::stage_string(b.stages[1]), "FFFF");
  EXPECT_EQ(vcm::stage_string(b.stages[3]), "MFMFMM");
  EXPECT_EQ(b.num_classes, 1000u);
  const auto n = vcm::model_preset("Nano");
  EXPECT_EQ(n.channels, (std::array<std::size_t, 4>{16, 32, 64, 128}));
  EXPECT_EQ(vcm::stage_string(n.stages[3]), "MFM");
  EXPECT_EQ(n.num_classes, 10u);
  EXPECT_EQ(n.input_resolution, 32u);
  EXPECT_THROW(vcm::model_preset("XL"), vcm::ValidationError);
}

TEST(Presets, MdmOutsideLastStageRejected) {
  auto spec = vcm::model_preset("Nano");
  spec.stages[0] = vcm::parse_stage_string("FM");
  spec.channels[0] = 15;
  try {
    ModelF::build(spec, 0);
    FAIL() << "expected ValidationError";
  } catch (const vcm::ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("stage 1 contains an MDM"), std::string::npos) << msg;
    EXPECT_NE(msg.find("C0=15"), std::string::npos) << msg;
  }
}

TEST(Presets, StageStringParsing) {
  EXPECT_EQ(vcm::parse_stage_string("FMF"),
            (std::vector<BlockKind>{BlockKind::Ffn, BlockKind::Mdm, BlockKind::Ffn}));
  EXPECT_THROW(vcm::parse_stage_string("FXF"), vcm::ValidationError);
}

// ---------------------------------------------------------------------------
// Build and forward

TEST(Build, SameSeedSameParameters) {
  const auto a = ModelF::build(vcm::model_preset("Nano"), 7);
  const auto b = ModelF::build(vcm::model_preset("Nano"), 7);
  const auto c = ModelF::build(vcm::model_preset("Nano"), 8);
  EXPECT_TRUE(same_state(a, b));
  EXPECT_FALSE(same_state(a, c));
}

TEST(Build, InitializationConventions) {
  const auto m = ModelF::build(vcm::model_preset("Nano"), 0);
  for (const auto& p : m.parameters().params) {
    const auto& n = p.name;
    auto ends = [&](const std::string& suffix) {
      return n.size() >= suffix.size() && n.compare(n.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends(".theta")) {
      for (float v : p.tensor.values()) EXPECT_EQ(v, 0.0f) << n;
    } else if (ends(".conv1.weight") || ends(".expand.weight") || ends("head.weight")) {
      for (float v : p.tensor.values()) EXPECT_LE(std::abs(v), 0.04f + 1e-6f) << n;
    }
    EXPECT_TRUE(p.tensor.requires_grad()) << n;
  }
}

TEST(Forward, NanoShapeLadder) {
  auto m = ModelF::build(vcm::model_preset("Nano"), 0);
  vcm::NoGradGuard ng;
  const auto tr = m.forward_trace(images(2, 32, 1), Mode::Eval);
  EXPECT_EQ(tr.stage_outputs[0].shape(), (vcm::Shape{2, 16, 8, 8}));
  EXPECT_EQ(tr.stage_outputs[1].shape(), (vcm::Shape{2, 32, 4, 4}));
  EXPECT_EQ(tr.stage_outputs[2].shape(), (vcm::Shape{2, 64, 2, 2}));
  EXPECT_EQ(tr.stage_outputs[3].shape(), (vcm::Shape{2, 128, 1, 1}));
  EXPECT_EQ(tr.logits.shape(), (vcm::Shape{2, 10}));
  for (float v : tr.logits.values()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, VariantBShapeLadder) {
  auto m = ModelF::build(vcm::model_preset("B"), 0);
  vcm::NoGradGuard ng;
  const auto tr = m.forward_trace(images(1, 224, 2), Mode::Eval);
  EXPECT_EQ(tr.stage_outputs[0].shape(), (vcm::Shape{1, 64, 56, 56}));
  EXPECT_EQ(tr.stage_outputs[1].shape(), (vcm::Shape{1, 128, 28, 28}));
  EXPECT_EQ(tr.stage_outputs[2].shape(), (vcm::Shape{1, 320, 14, 14}));
  EXPECT_EQ(tr.stage_outputs[3].shape(), (vcm::Shape{1, 512, 7, 7}));
  EXPECT_EQ(tr.logits.shape(), (vcm::Shape{1, 1000}));
}

TEST(Forward, LadderHoldsAtOtherResolutions) {
  auto m = ModelF::build(vcm::model_preset("Nano"), 0);
  const auto before = vcm::count_params(m).total;
  vcm::NoGradGuard ng;
  for (std::size_t res : {64u, 96u}) {
    const auto tr = m.forward_trace(images(1, res, 3), Mode::Eval);
    for (std::size_t s = 0; s < 4; ++s) {
      EXPECT_EQ(tr.stage_outputs[s].dim(2), res / (4u << s));
      EXPECT_EQ(tr.stage_outputs[s].dim(3), res / (4u << s));
    }
  }
  EXPECT_EQ(vcm::count_params(m).total, before);
}

TEST(Forward, ResolutionMustDivideBy32) {
  auto m = ModelF::build(vcm::model_preset("Nano"), 0);
  EXPECT_THROW(m.forward(images(1, 48, 4), Mode::Eval), vcm::ValidationError);
  EXPECT_THROW(m.forward(TF::zeros({1, 1, 32, 32}), Mode::Eval), vcm::ShapeError);
}

TEST(Forward, EvalIsDeterministic) {
  auto m = ModelF::build(vcm::model_preset("Nano"), 0);
  const auto x = images(3, 32, 5);
  vcm::NoGradGuard ng;
  EXPECT_TRUE(same_bits(m.forward(x, Mode::Eval), m.forward(x, Mode::Eval)));
}

TEST(Forward, FiniteLogitsAcrossSeeds) {
  vcm::NoGradGuard ng;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto m = ModelF::build(vcm::model_preset("Nano"), seed);
    const auto y = m.forward(images(2, 32, 1000 + seed), seed % 2 ? Mode::Train : Mode::Eval);
    for (float v : y.values()) ASSERT_TRUE(std::isfinite(v)) << "seed " << seed;
  }
}

TEST(Forward, EveryParameterReceivesGradient) {
  // 64^2 input gives a 2x2 last-stage grid; on a single token the decay
  // parameter has no effect on the output.
  const auto data = vcm::gen_toy_dataset({3, 40, 64, 0.05});
  std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = ModelF::build(vcm::model_preset("Nano"), seed);
    const auto labels = data.labels_at(idx);
    vcm::backward(vcm::softmax_cross_entropy(m.forward(data.images_at<float>(idx), Mode::Train), labels));
    for (const auto& p : m.parameters().params) {
      ASSERT_TRUE(p.tensor.has_grad()) << p.name;
      bool nonzero = false;
      for (float g : p.tensor.grad()) nonzero |= g != 0.0f;
      EXPECT_TRUE(nonzero) << p.name << " seed " << seed;
    }
  }
}

// ---------------------------------------------------------------------------
// Accounting

TEST(Counts, PresetParameterBands) {
  const std::vector<std::pair<const char*, double>> targets{{"S", 10.5e6}, {"M", 21.0e6}, {"B", 31.5e6}};
  for (const auto& [name, target] : targets) {
    const auto m = ModelF::build(vcm::model_preset(name), 0);
    const double total = static_cast<double>(vcm::count_params(m).total);
    EXPECT_GE(total, 0.9 * target) << name;
    EXPECT_LE(total, 1.1 * target) << name;
  }
}

TEST(Counts, TotalsMatchTensorSizes) {
  const auto m = ModelF::build(vcm::model_preset("Nano"), 0);
  const auto r = vcm::count_params(m);
  std::uint64_t by_module = 0, direct = 0, buffers = 0;
  for (const auto& e : r.modules) by_module += e.count;
  const auto set = m.parameters();
  for (const auto& p : set.params) direct += p.tensor.numel();
  for (const auto& b : set.buffers) buffers += b.tensor.numel();
  EXPECT_EQ(by_module, r.total);
  EXPECT_EQ(direct, r.total);
  EXPECT_EQ(buffers, r.buffers);
  EXPECT_GT(r.buffers, 0u);
}

TEST(Counts, LinearHeadTenToFive) {
  ModelSpec spec;
  spec.channels = {2, 2, 2, 10};
  spec.num_classes = 5;
  spec.input_resolution = 32;
  const auto m = ModelF::build(spec, 0);
  const auto r = vcm::count_params(m);
  ASSERT_EQ(r.modules.back().module, "head");
  EXPECT_EQ(r.modules.back().count, 55u);
}

TEST(Counts, PresetMacBands) {
  const auto s = static_cast<double>(vcm::count_macs(vcm::model_preset("S"), 224).total);
  const auto b = static_cast<double>(vcm::count_macs(vcm::model_preset("B"), 224).total);
  EXPECT_GE(s, 0.85 * 1.1e9);
  EXPECT_LE(s, 1.15 * 1.1e9);
  EXPECT_GE(b, 0.85 * 4.0e9);
  EXPECT_LE(b, 1.15 * 4.0e9);
}

TEST(Counts, PointwiseConvMacsAreHwCC) {
  // One extra FFN block in stage 1 of Nano at 32^2 (8x8 grid, C = 16, hidden
  // 64): expand 1x1 + depthwise 3x3 + project 1x1.
  auto spec = vcm::model_preset("Nano");
  const auto base = vcm::count_macs(spec, 32).total;
  spec.stages[0].push_back(BlockKind::Ffn);
  const auto more = vcm::count_macs(spec, 32).total;
  const std::uint64_t hw = 64, c = 16, hid = 64;
  EXPECT_EQ(more - base, hw * c * hid + hw * hid * 9 + hw * hid * c);
}

TEST(Counts, MacsScaleWithArea) {
  for (const char* name : {"S", "B"}) {
    const auto spec = vcm::model_preset(name);
    const double r = double(vcm::count_macs(spec, 448).total) / double(vcm::count_macs(spec, 224).total);
    EXPECT_NEAR(r, 4.0, 0.01) << name;
  }
  EXPECT_THROW(vcm::count_macs(vcm::model_preset("S"), 200), vcm::ValidationError);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  auto m = trained_nano(1);
  const auto path = temp_path("roundtrip.ckpt");
  vcm::save_checkpoint(m, path);
  auto loaded = vcm::load_checkpoint<float>(path);
  EXPECT_TRUE(same_state(m, loaded));
  EXPECT_EQ(loaded.spec(), m.spec());
  const auto x = images(3, 32, 9);
  vcm::NoGradGuard ng;
  EXPECT_TRUE(same_bits(m.forward(x, Mode::Eval), loaded.forward(x, Mode::Eval)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, DoubleModelsRoundTrip) {
  auto spec = vcm::model_preset("Nano");
  const auto m = vcm::Model<double>::build(spec, 4);
  const auto loaded = vcm::deserialize_checkpoint<double>(vcm::serialize_checkpoint(m));
  EXPECT_TRUE(same_state(m, loaded));
  EXPECT_THROW(vcm::deserialize_checkpoint<float>(vcm::serialize_checkpoint(m)), vcm::FormatError);
}

TEST(Checkpoint, LayoutHeader) {
  const auto bytes = vcm::serialize_checkpoint(ModelF::build(vcm::model_preset("Nano"), 0));
  ASSERT_GT(bytes.size(), 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "VCMB");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, TruncationRejected) {
  const auto bytes = vcm::serialize_checkpoint(ModelF::build(vcm::model_preset("Nano"), 0));
  for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + keep);
    EXPECT_THROW(vcm::deserialize_checkpoint<float>(cut), vcm::FormatError) << keep;
  }
}

TEST(Checkpoint, BadMagicRejected) {
  auto bytes = vcm::serialize_checkpoint(ModelF::build(vcm::model_preset("Nano"), 0));
  bytes[0] = 'X';
  try {
    vcm::deserialize_checkpoint<float>(bytes);
    FAIL() << "expected FormatError";
  } catch (const vcm::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, VersionMismatchNamed) {
  auto bytes = vcm::serialize_checkpoint(ModelF::build(vcm::model_preset("Nano"), 0));
  bytes[4] = 9;
  try {
    vcm::deserialize_checkpoint<float>(bytes);
    FAIL() << "expected FormatError";
  } catch (const vcm::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, FlippedByteFailsChecksum) {
  const auto bytes = vcm::serialize_checkpoint(ModelF::build(vcm::model_preset("Nano"), 0));
  Rng rng(5);
  for (int k = 0; k < 20; ++k) {
    auto bad = bytes;
    const std::size_t at = 8 + rng.index(bytes.size() - 8);
    bad[at] ^= static_cast<std::uint8_t>(1u << rng.index(8));
    EXPECT_THROW(vcm::deserialize_checkpoint<float>(bad), vcm::FormatError) << at;
  }
}

TEST(Checkpoint, MissingFileIsAnError) {
  EXPECT_THROW(vcm::load_checkpoint<float>(temp_path("does_not_exist.ckpt")), vcm::Error);
}

TEST(Checkpoint, SpecTextRoundTrip) {
  for (const auto& name : vcm::preset_names()) {
    const auto spec = vcm::model_preset(name);
    EXPECT_EQ(vcm::spec_from_text(vcm::spec_to_text(spec)), spec) << name;
  }
}
