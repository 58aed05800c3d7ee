#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "vcmamba/checkpoint.hpp"
#include "vcmamba/config.hpp"
#include "vcmamba/data.hpp"
#include "vcmamba/model.hpp"
#include "vcmamba/optim.hpp"

namespace vcm {

// CSV training log columns. `phase` is "train" for per-step rows (loss and
// accuracy of that step's batch, gradient norm before the update) and "eval"
// for the closing row computed over the whole training set in eval mode.
inline constexpr const char* kTrainLogHeader = "step,phase,loss,accuracy,grad_norm";

struct TrainConfig {
  ModelSpec model = model_preset("Nano");
  AdamWConfig optimizer;
  ToyDatasetConfig data{0, 2000, 32, 0.05};
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  // Extra checkpoint every N steps; 0 saves only at the end.
  std::size_t checkpoint_interval = 0;
  std::size_t eval_batch_size = 100;
  std::string checkpoint_path = "vcmamba.ckpt";
  std::string log_path = "train_log.csv";

  void validate() const {
    std::string bad;
    try {
      model.validate();
    } catch (const ValidationError& e) {
      bad += std::string(" ") + e.what() + ";";
    }
    try {
      optimizer.validate();
      data.validate();
    } catch (const ValidationError& e) {
      bad += std::string(" ") + e.what() + ";";
    }
    if (steps == 0 || steps > 10'000'000) bad += " steps must lie in [1, 1e7];";
    if (batch_size == 0 || batch_size > 4096) bad += " batch_size must lie in [1, 4096];";
    if (eval_batch_size == 0 || eval_batch_size > 4096) {
      bad += " eval_batch_size must lie in [1, 4096];";
    }
    if (data.n_samples == 0) bad += " dataset must not be empty;";
    if (data.n_samples < batch_size) bad += " dataset smaller than one batch;";
    if (model.input_resolution != data.resolution) {
      bad += " model input_resolution differs from dataset resolution;";
    }
    if (model.num_classes != kToyClasses) bad += " model num_classes must be 10;";
    if (model.in_channels != 3) bad += " model in_channels must be 3;";
    if (checkpoint_path.empty()) bad += " checkpoint_path is empty;";
    if (log_path.empty()) bad += " log_path is empty;";
    if (!bad.empty()) throw ValidationError("train config:" + bad);
  }
};

// Sections: [model] (see spec_from_section), [optimizer] lr beta1 beta2 eps
// weight_decay, [data] seed n_samples resolution noise, [train] steps
// batch_size seed checkpoint_interval eval_batch_size checkpoint log.
inline TrainConfig train_config_from(const ConfigDocument& doc) {
  TrainConfig cfg;
  static const std::vector<std::string> sections = {"", "model", "optimizer", "data",
                                                    "train"};
  for (const auto& [name, body] : doc.sections()) {
    if (std::find(sections.begin(), sections.end(), name) == sections.end()) {
      throw ValidationError("config: unknown section [" + name + "]");
    }
    if (name.empty() && !body.empty()) {
      throw ValidationError("config: key '" + body.begin()->first +
                            "' appears before any [section]");
    }
  }
  if (doc.has_section("model")) cfg.model = spec_from_section(doc.section("model"));
  cfg.data.resolution = cfg.model.input_resolution;

  auto each = [](const ConfigDocument::Section& s, const std::string& where,
                 const std::function<bool(const std::string&, const std::string&)>& f) {
    for (const auto& [k, v] : s) {
      if (!f(k, v)) throw ValidationError("[" + where + "]: unknown key '" + k + "'");
    }
  };
  using config::to_double;
  using config::to_size;
  each(doc.section("optimizer"), "optimizer", [&](const auto& k, const auto& v) {
    if (k == "lr") cfg.optimizer.lr = to_double(k, v);
    else if (k == "beta1") cfg.optimizer.beta1 = to_double(k, v);
    else if (k == "beta2") cfg.optimizer.beta2 = to_double(k, v);
    else if (k == "eps") cfg.optimizer.eps = to_double(k, v);
    else if (k == "weight_decay") cfg.optimizer.weight_decay = to_double(k, v);
    else return false;
    return true;
  });
  each(doc.section("data"), "data", [&](const auto& k, const auto& v) {
    if (k == "seed") cfg.data.seed = to_size(k, v);
    else if (k == "n_samples") cfg.data.n_samples = to_size(k, v);
    else if (k == "resolution") cfg.data.resolution = to_size(k, v);
    else if (k == "noise") cfg.data.noise = to_double(k, v);
    else return false;
    return true;
  });
  each(doc.section("train"), "train", [&](const auto& k, const auto& v) {
    if (k == "steps") cfg.steps = to_size(k, v);
    else if (k == "batch_size") cfg.batch_size = to_size(k, v);
    else if (k == "seed") cfg.seed = to_size(k, v);
    else if (k == "checkpoint_interval") cfg.checkpoint_interval = to_size(k, v);
    else if (k == "eval_batch_size") cfg.eval_batch_size = to_size(k, v);
    else if (k == "checkpoint") cfg.checkpoint_path = v;
    else if (k == "log") cfg.log_path = v;
    else return false;
    return true;
  });
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  return train_config_from(ConfigDocument::load(path));
}

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t samples = 0;
};

template <typename T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t classes = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < labels.size(); ++b) {
    const T* z = logits.data() + b * classes;
    const auto pred = std::max_element(z, z + classes) - z;
    if (pred == labels[b]) ++correct;
  }
  return correct;
}

template <typename T>
EvalResult evaluate(Model<T>& model, const ToyDataset& data, std::size_t batch_size = 100) {
  if (data.empty()) throw ValidationError("evaluate: dataset is empty");
  if (batch_size == 0) throw ValidationError("evaluate: batch_size must be positive");
  NoGradGuard no_grad;
  EvalResult r;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto labels = data.labels_at(idx);
    const auto logits = model.forward(data.images_at<T>(idx), Mode::Eval);
    const auto loss = softmax_cross_entropy(logits, labels).item();
    loss_sum += static_cast<double>(loss) * static_cast<double>(idx.size());
    correct += count_correct(logits, labels);
  }
  r.samples = data.size();
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.samples);
  r.mean_loss = loss_sum / static_cast<double>(r.samples);
  return r;
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double grad_norm = 0.0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  EvalResult final_eval;
};

namespace detail {

inline std::string format_log_row(std::size_t step, const char* phase, double loss,
                                  double accuracy, double grad_norm) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g", step, phase, loss, accuracy,
                grad_norm);
  return buf;
}

template <typename T>
bool all_finite(const Model<T>& model) {
  for (const auto& p : model.parameters().params) {
    for (T v : p.tensor.values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace detail

// Per-step observer; receives each record right after it is logged.
using StepCallback = std::function<void(const StepRecord&)>;

// Single-threaded and deterministic in (cfg, seed). Batches walk a seeded
// permutation of the dataset that is redrawn every epoch.
template <typename T = float>
TrainResult train(const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  const ToyDataset data = gen_toy_dataset(cfg.data);
  Model<T> model = Model<T>::build(cfg.model, cfg.seed);
  AdamW<T> opt(model.parameters().params, cfg.optimizer);

  std::ofstream log(cfg.log_path, std::ios::trunc);
  if (!log) throw Error("cannot open training log '" + cfg.log_path + "'");
  log << kTrainLogHeader << '\n';

  Rng order_rng(cfg.seed ^ 0xD1B54A32D192ED03ULL);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();

  TrainResult result;
  result.steps.reserve(cfg.steps);
  std::vector<std::size_t> idx(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    for (auto& i : idx) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), order_rng.engine());
        cursor = 0;
      }
      i = order[cursor++];
    }
    const auto labels = data.labels_at(idx);
    opt.zero_grad();
    auto diverged = [&](const std::string& cause) {
      log.flush();
      if (detail::all_finite(model)) save_checkpoint(model, cfg.checkpoint_path);
      return NumericError("non-finite loss at step " + std::to_string(step) + " (" + cause +
                          "); checkpoint '" + cfg.checkpoint_path +
                          "' holds the last good parameters");
    };
    std::optional<Tensor<T>> logits, loss;
    try {
      logits = model.forward(data.images_at<T>(idx), Mode::Train);
      loss = softmax_cross_entropy(*logits, labels);
    } catch (const NumericError& e) {
      throw diverged(e.what());
    }
    const double loss_value = static_cast<double>(loss->item());
    if (!std::isfinite(loss_value)) throw diverged("loss " + std::to_string(loss_value));
    backward(*loss);
    StepRecord rec;
    rec.step = step;
    rec.loss = loss_value;
    rec.accuracy = static_cast<double>(count_correct(*logits, labels)) /
                   static_cast<double>(labels.size());
    rec.grad_norm = opt.grad_norm();
    opt.step();
    log << detail::format_log_row(step, "train", rec.loss, rec.accuracy, rec.grad_norm)
        << '\n';
    result.steps.push_back(rec);
    if (on_step) on_step(rec);
    if (cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0 &&
        step != cfg.steps) {
      save_checkpoint(model, cfg.checkpoint_path);
    }
  }
  opt.zero_grad();
  result.final_eval = evaluate(model, data, cfg.eval_batch_size);
  log << detail::format_log_row(cfg.steps, "eval", result.final_eval.mean_loss,
                                result.final_eval.accuracy, 0.0)
      << '\n';
  log.flush();
  if (!log) throw Error("write to training log '" + cfg.log_path + "' failed");
  save_checkpoint(model, cfg.checkpoint_path);
  return result;
}

}  // namespace vcm
