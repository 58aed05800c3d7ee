#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "vcmamba/checkpoint.hpp"
#include "vcmamba/data.hpp"
#include "vcmamba/gradcheck.hpp"
#include "vcmamba/model.hpp"
#include "vcmamba/ops.hpp"
#include "vcmamba/random.hpp"
#include "vcmamba/scan_paths.hpp"
#include "vcmamba/ssm.hpp"

// Self-test suite behind `vcmamba check`. Each check is a self-contained
// property over the library; results print as CSV rows
// `suite,check,result,detail` with result PASS or FAIL.

namespace vcm {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
};

class CheckRunner {
 public:
  // `fn` returns an empty string on success or a failure description.
  void run(const std::string& suite, const std::string& name,
           const std::function<std::string()>& fn) {
    CheckResult r{suite, name, false, {}};
    const auto t0 = std::chrono::steady_clock::now();
    try {
      r.detail = fn();
      r.passed = r.detail.empty();
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    if (r.passed) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3fs", secs);
      r.detail = buf;
    }
    results_.push_back(std::move(r));
  }

  const std::vector<CheckResult>& results() const { return results_; }

  bool all_passed() const {
    for (const auto& r : results_) {
      if (!r.passed) return false;
    }
    return true;
  }

 private:
  std::vector<CheckResult> results_;
};

inline void print_check_matrix(std::ostream& os, const std::vector<CheckResult>& results) {
  os << "suite,check,result,detail\n";
  for (const auto& r : results) {
    std::string detail = r.detail;
    for (auto& c : detail) {
      if (c == ',' || c == '\n') c = ';';
    }
    os << r.suite << ',' << r.name << ',' << (r.passed ? "PASS" : "FAIL") << ','
       << detail << '\n';
  }
}

namespace checks {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// Scalar probe: <out, r> for a fixed random r, so every output coordinate
// contributes a distinct weight to the gradient.
inline Tensor<double> probe(const Tensor<double>& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_normal<double>(out.shape(), rng)));
}

inline std::string gradcheck(const std::function<Tensor<double>()>& f,
                             std::vector<Tensor<double>> inputs) {
  const auto rep = finite_diff_check<double>(f, std::move(inputs), 1e-5, 1e-3);
  if (rep.passed) return {};
  return "max rel err " + fmt(rep.max_rel_error) + " at " + rep.worst;
}

inline std::string path_invariants(const PathOrder& p) {
  const GridShape g = p.grid;
  const std::size_t n = g.cells();
  if (p.order.size() != n || p.dirs.size() != n) return "wrong length";
  std::vector<char> seen(n, 0);
  for (auto v : p.order) {
    if (v >= n || seen[v]) return "not a permutation";
    seen[v] = 1;
  }
  if (p.dirs[0] != Direction::Begin) return "first label is not Begin";
  for (std::size_t j = 1; j < n; ++j) {
    const auto r0 = p.order[j - 1] / g.width, c0 = p.order[j - 1] % g.width;
    const auto r1 = p.order[j] / g.width, c1 = p.order[j] % g.width;
    const auto dr = static_cast<long>(r1) - static_cast<long>(r0);
    const auto dc = static_cast<long>(c1) - static_cast<long>(c0);
    if (std::labs(dr) + std::labs(dc) != 1) return "non-adjacent step at " + std::to_string(j);
    const Direction want = dc == 1    ? Direction::Right
                           : dc == -1 ? Direction::Left
                           : dr == 1  ? Direction::Down
                                      : Direction::Up;
    if (p.dirs[j] != want) return "direction label mismatch at " + std::to_string(j);
  }
  const auto inv = invert_path(p);
  for (std::size_t j = 0; j < n; ++j) {
    if (inv[p.order[j]] != j) return "inverse mismatch";
  }
  return {};
}

template <typename T>
ScanInputs<T> random_scan_inputs(std::size_t batch, std::size_t d, std::size_t n,
                                 std::size_t l, Rng& rng) {
  ScanInputs<T> in;
  in.x = random_normal<T>({batch, d, l}, rng);
  in.delta = random_uniform<T>({batch, d, l}, rng, 1e-3, 0.5);
  in.b_seq = random_normal<T>({batch, n, l}, rng);
  in.c_seq = random_normal<T>({batch, n, l}, rng);
  in.dirs.resize(l);
  for (std::size_t i = 0; i < l; ++i) {
    in.dirs[i] = i == 0 ? 0 : static_cast<int>(1 + rng.index(4));
  }
  return in;
}

template <typename T>
SsmParams<T> random_ssm(std::size_t d, std::size_t n, Rng& rng) {
  auto p = SsmParams<T>::init(d, n, 0, rng, 0.3);
  for (auto& v : p.theta.values()) v = static_cast<T>(rng.normal(0.0, 0.5));
  for (auto& v : p.d_skip.values()) v = static_cast<T>(rng.normal());
  return p;
}

inline void identity_norms(ParameterSet<double>& set) {
  for (auto& b : set.buffers) {
    const bool var = b.name.size() >= 4 && b.name.compare(b.name.size() - 4, 4, "_var") == 0;
    std::fill(b.tensor.values().begin(), b.tensor.values().end(), var ? 1.0 : 0.0);
  }
}

// Moves a freshly initialized module away from its tiny-weight starting
// point so that every gradient is well above finite-difference noise.
// Δ-related parameters keep their init so Δ stays in its usual range.
inline void condition_for_gradcheck(ParameterSet<double>& set, Rng& rng) {
  auto has = [](const std::string& name, const char* part) {
    return name.find(part) != std::string::npos;
  };
  for (auto& p : set.params) {
    if (has(p.name, "a_log") || has(p.name, "b_delta")) continue;
    const bool norm = has(p.name, "bn") || has(p.name, "norm");
    for (auto& v : p.tensor.values()) v = norm ? v + rng.normal(0.0, 0.2) : rng.normal(0.0, 0.5);
  }
  for (auto& b : set.buffers) {
    const bool var = has(b.name, "running_var");
    for (auto& v : b.tensor.values()) v = var ? rng.uniform(0.5, 1.5) : rng.normal(0.0, 0.2);
  }
}

template <typename Block>
std::string residual_passthrough(Block& block, std::vector<Tensor<double>*> zero,
                                 std::size_t channels, std::size_t side, Rng& rng) {
  ParameterSet<double> set;
  block.collect("b", set);
  identity_norms(set);
  for (auto* t : zero) std::fill(t->values().begin(), t->values().end(), 0.0);
  const auto x = random_normal<double>({2, channels, side, side}, rng);
  NoGradGuard ng;
  const auto y = block.forward(x, Mode::Eval);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (y[i] != x[i]) return "output differs from input at " + std::to_string(i);
  }
  return {};
}

inline std::string in_band(double value, double target, double band) {
  if (std::abs(value - target) <= band * target) return {};
  return fmt(value) + " outside +-" + fmt(band * 100) + "% of " + fmt(target);
}

}  // namespace checks

// Runs every suite; takes a few seconds on one core.
inline std::vector<CheckResult> run_invariant_suite() {
  using namespace checks;
  CheckRunner run;
  Rng rng(2024);

  // tensor-autodiff
  run.run("tensor-autodiff", "elementwise-gradients", [&] {
    auto a = random_normal<double>({2, 3, 4}, rng);
    auto b = random_normal<double>({2, 3, 4}, rng);
    return gradcheck(
        [&] { return probe(add(gelu(a), mul(silu(b), softplus(a))), 1); }, {a, b});
  });
  run.run("tensor-autodiff", "conv-gradients", [&] {
    auto x = random_normal<double>({1, 2, 5, 5}, rng);
    auto w = random_normal<double>({3, 2, 3, 3}, rng, 0.5);
    auto bias = random_normal<double>({3}, rng);
    auto dw = random_normal<double>({3, 1, 3, 3}, rng, 0.5);
    return gradcheck(
        [&] {
          return probe(depthwise_conv2d(conv2d(x, w, bias, 2, 1), dw, Tensor<double>(), 1, 1),
                       2);
        },
        {x, w, bias, dw});
  });
  run.run("tensor-autodiff", "norm-gradients", [&] {
    auto x = random_normal<double>({3, 4, 2, 2}, rng);
    auto g = random_normal<double>({4}, rng);
    auto be = random_normal<double>({4}, rng);
    auto stats = RunningStats<double>::identity(4);
    return gradcheck(
        [&] {
          return probe(layer_norm(batch_norm(x, g, be, stats, Mode::Train), g, be, 1), 3);
        },
        {x, g, be});
  });
  run.run("tensor-autodiff", "head-gradients", [&] {
    auto x = random_normal<double>({2, 3, 2, 2}, rng);
    auto w = random_normal<double>({4, 3}, rng);
    auto bias = random_normal<double>({4}, rng);
    const std::vector<int> labels = {1, 3};
    return gradcheck(
        [&] { return softmax_cross_entropy(linear(global_avg_pool(x), w, bias), labels); },
        {x, w, bias});
  });
  run.run("tensor-autodiff", "second-backward-rejected", [&]() -> std::string {
    auto a = random_normal<double>({3}, rng).set_requires_grad(true);
    auto loss = sum(mul(a, a));
    backward(loss);
    try {
      backward(loss);
    } catch (const Error&) {
      return {};
    }
    return "second backward accepted";
  });

  // scan-paths
  run.run("scan-paths", "exhaustive-16x16", [&]() -> std::string {
    for (std::size_t h = 1; h <= 16; ++h) {
      for (std::size_t w = 1; w <= 16; ++w) {
        for (auto id : kAllPaths) {
          const auto p = generate_path({h, w}, id);
          if (auto err = path_invariants(p); !err.empty()) {
            return std::string(to_string(id)) + " " + std::to_string(h) + "x" +
                   std::to_string(w) + ": " + err;
          }
        }
      }
    }
    return {};
  });
  run.run("scan-paths", "gather-scatter-roundtrip", [&]() -> std::string {
    for (std::size_t h = 1; h <= 6; ++h) {
      for (std::size_t w = 1; w <= 6; ++w) {
        const auto x = random_normal<double>({2, 3, h, w}, rng);
        for (auto id : kAllPaths) {
          const auto p = generate_path({h, w}, id);
          const auto back = scatter_path(gather_path(x, p), p);
          if (!std::equal(x.values().begin(), x.values().end(), back.values().begin())) {
            return "round trip not exact";
          }
        }
      }
    }
    return {};
  });

  // ssm-core
  run.run("ssm-core", "parallel-matches-sequential", [&]() -> std::string {
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
      const std::size_t l = 1 + rng.index(200);
      auto p = random_ssm<double>(3, 4, rng);
      auto in = random_scan_inputs<double>(1, 3, 4, l, rng);
      const auto ys = direction_aware_scan(in, p, ScanAlgorithm::Sequential);
      const auto yp = direction_aware_scan(in, p, ScanAlgorithm::Parallel);
      for (std::size_t i = 0; i < ys.numel(); ++i) {
        worst = std::max(worst, std::abs(ys[i] - yp[i]));
      }
    }
    return worst < 1e-10 ? std::string() : "max abs diff " + fmt(worst);
  });
  run.run("ssm-core", "theta-zero-neutral", [&]() -> std::string {
    auto p = random_ssm<double>(3, 4, rng);
    std::fill(p.theta.values().begin(), p.theta.values().end(), 0.0);
    auto in = random_scan_inputs<double>(2, 3, 4, 37, rng);
    const auto a = direction_aware_scan(in, p);
    const auto b = selective_scan_sequential(in, p);
    return std::equal(a.values().begin(), a.values().end(), b.values().begin())
               ? std::string()
               : "direction-aware scan with zero theta differs from plain scan";
  });
  run.run("ssm-core", "causality", [&]() -> std::string {
    auto p = random_ssm<double>(2, 3, rng);
    auto in = random_scan_inputs<double>(1, 2, 3, 24, rng);
    const auto y0 = direction_aware_scan(in, p);
    const std::size_t k = 11;
    for (std::size_t ch = 0; ch < 2; ++ch) in.x[ch * 24 + k] += 1.0;
    const auto y1 = direction_aware_scan(in, p);
    for (std::size_t ch = 0; ch < 2; ++ch) {
      for (std::size_t i = 0; i < k; ++i) {
        if (y0[ch * 24 + i] != y1[ch * 24 + i]) return "output before perturbation changed";
      }
    }
    return {};
  });
  run.run("ssm-core", "scan-gradients", [&] {
    auto p = random_ssm<double>(2, 3, rng);
    auto in = random_scan_inputs<double>(1, 2, 3, 9, rng);
    std::vector<Tensor<double>> inputs = {in.x, in.delta, in.b_seq, in.c_seq,
                                          p.a_log, p.d_skip, p.theta};
    return gradcheck([&] { return probe(direction_aware_scan(in, p), 4); }, inputs);
  });

  // blocks
  const BlockConfig small{2, 2, 4, 0, {2, 2}, ScanAlgorithm::Sequential};
  run.run("blocks", "ffn-residual-passthrough", [&] {
    auto b = FfnBlock<double>::make(4, small, rng);
    return residual_passthrough(b, {&b.mlp.project.weight}, 4, 4, rng);
  });
  run.run("blocks", "mdm-residual-passthrough", [&] {
    auto b = MdmBlock<double>::make(4, small, rng);
    return residual_passthrough(b, {&b.out_proj.weight, &b.mlp.project.weight}, 4, 4, rng);
  });
  run.run("blocks", "mdm-gradients", [&] {
    auto b = MdmBlock<double>::make(4, small, rng);
    ParameterSet<double> set;
    b.collect("b", set);
    condition_for_gradcheck(set, rng);
    auto x = random_normal<double>({1, 4, 4, 4}, rng);
    std::vector<Tensor<double>> inputs = {x};
    for (auto& e : set.params) inputs.push_back(e.tensor);
    const auto rep = finite_diff_check<double>(
        [&] { return probe(b.forward(x, Mode::Eval), 5); }, inputs, 1e-5, 1e-3,
        {4, 7, 1e-6});
    return rep.passed ? std::string()
                      : "max rel err " + fmt(rep.max_rel_error) + " at " + rep.worst;
  });

  // model
  run.run("model", "param-bands", [&]() -> std::string {
    const std::pair<const char*, double> targets[] = {{"S", 10.5e6}, {"M", 21.0e6},
                                                      {"B", 31.5e6}};
    for (const auto& [name, target] : targets) {
      const auto n = count_params(build_model<float>(model_preset(name), 0)).total;
      if (auto err = in_band(static_cast<double>(n), target, 0.10); !err.empty()) {
        return std::string(name) + ": " + err;
      }
    }
    return {};
  });
  run.run("model", "mac-bands", [&]() -> std::string {
    const std::pair<const char*, double> targets[] = {{"S", 1.1e9}, {"B", 4.0e9}};
    for (const auto& [name, target] : targets) {
      const auto n = count_macs(model_preset(name), 224).total;
      if (auto err = in_band(static_cast<double>(n), target, 0.15); !err.empty()) {
        return std::string(name) + ": " + err;
      }
    }
    return {};
  });
  run.run("model", "nano-shape-ladder", [&]() -> std::string {
    const auto spec = model_preset("Nano");
    auto m = build_model<float>(spec, 1);
    NoGradGuard ng;
    const auto x = random_uniform<float>({2, 3, 32, 32}, rng, 0.0, 1.0);
    const auto trace = m.forward_trace(x, Mode::Eval);
    std::size_t side = 8;
    for (std::size_t s = 0; s < kStageCount; ++s, side /= 2) {
      const Shape want = {2, spec.channels[s], side, side};
      if (trace.stage_outputs[s].shape() != want) {
        return "stage " + std::to_string(s + 1) + " " +
               shape_str(trace.stage_outputs[s].shape()) + " != " + shape_str(want);
      }
    }
    return trace.logits.shape() == Shape{2, spec.num_classes} ? std::string()
                                                              : "logits shape";
  });

  // checkpoint
  run.run("checkpoint", "roundtrip-and-corruption", [&]() -> std::string {
    auto m = build_model<float>(model_preset("Nano"), 3);
    const auto x = random_uniform<float>({1, 3, 32, 32}, rng, 0.0, 1.0);
    NoGradGuard ng;
    const auto before = m.forward(x, Mode::Eval);
    auto bytes = serialize_checkpoint(m);
    auto loaded = deserialize_checkpoint<float>(bytes);
    const auto after = loaded.forward(x, Mode::Eval);
    if (!std::equal(before.values().begin(), before.values().end(), after.values().begin())) {
      return "reloaded forward differs";
    }
    auto corrupt = bytes;
    corrupt[corrupt.size() / 2] ^= 0x5A;
    try {
      (void)deserialize_checkpoint<float>(corrupt);
      return "corrupted file accepted";
    } catch (const FormatError&) {
    }
    bytes.resize(bytes.size() - 100);
    try {
      (void)deserialize_checkpoint<float>(bytes);
      return "truncated file accepted";
    } catch (const FormatError&) {
    }
    return {};
  });

  // harness
  run.run("harness", "toy-dataset-contract", [&]() -> std::string {
    const ToyDatasetConfig cfg{7, 200, 32, 0.05};
    const auto a = gen_toy_dataset(cfg), b = gen_toy_dataset(cfg);
    if (!std::equal(a.images().begin(), a.images().end(), b.images().begin()) ||
        !std::equal(a.labels().begin(), a.labels().end(), b.labels().begin())) {
      return "not deterministic";
    }
    std::vector<std::size_t> hist(kToyClasses, 0);
    for (int l : a.labels()) ++hist[static_cast<std::size_t>(l)];
    for (auto h : hist) {
      if (h != 20) return "unbalanced classes";
    }
    for (float v : a.images()) {
      if (!(v >= 0.0f && v <= 1.0f)) return "pixel outside [0,1]";
    }
    return {};
  });

  return run.results();
}

}  // namespace vcm
