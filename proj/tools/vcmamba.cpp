#include <cstdio>
#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "vcmamba/vcmamba.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

void print_counts(const vcm::CountReport& report, const char* unit) {
  std::printf("%-12s %14s\n", "module", unit);
  for (const auto& m : report.modules) {
    std::printf("%-12s %14llu\n", m.module.c_str(),
                static_cast<unsigned long long>(m.count));
  }
}

int cmd_params(const std::string& preset) {
  const auto spec = vcm::model_preset(preset);
  const auto model = vcm::build_model<float>(spec, 0);
  const auto report = vcm::count_params(model);
  std::printf("preset %s\n", spec.name.c_str());
  print_counts(report, "params");
  std::printf("%-12s %14llu  (%.2fM)\n", "total",
              static_cast<unsigned long long>(report.total), report.total / 1e6);
  std::printf("%-12s %14llu\n", "buffers", static_cast<unsigned long long>(report.buffers));
  return kExitOk;
}

int cmd_macs(const std::string& preset, std::size_t resolution) {
  const auto spec = vcm::model_preset(preset);
  if (resolution == 0) resolution = spec.input_resolution;
  const auto report = vcm::count_macs(spec, resolution);
  std::printf("preset %s resolution %zu\n", spec.name.c_str(), resolution);
  print_counts(report, "macs");
  std::printf("%-12s %14llu  (%.2fG)\n", "total",
              static_cast<unsigned long long>(report.total), report.total / 1e9);
  return kExitOk;
}

int cmd_train(const std::string& config_path, std::size_t progress_every) {
  const auto cfg = vcm::load_train_config(config_path);
  std::fprintf(stderr, "training %s for %zu steps (batch %zu, seed %llu)\n",
               cfg.model.name.c_str(), cfg.steps, cfg.batch_size,
               static_cast<unsigned long long>(cfg.seed));
  const auto result = vcm::train<float>(cfg, [&](const vcm::StepRecord& r) {
    if (progress_every && r.step % progress_every == 0) {
      std::fprintf(stderr, "step %zu loss %.4f acc %.3f\n", r.step, r.loss, r.accuracy);
    }
  });
  std::printf("final_eval_accuracy %.6f\n", result.final_eval.accuracy);
  std::printf("final_eval_loss %.6f\n", result.final_eval.mean_loss);
  std::printf("log %s\n", cfg.log_path.c_str());
  std::printf("checkpoint %s\n", cfg.checkpoint_path.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const vcm::ToyDatasetConfig& data,
             std::size_t batch) {
  auto model = vcm::load_checkpoint<float>(checkpoint);
  vcm::ToyDatasetConfig cfg = data;
  cfg.resolution = model.spec().input_resolution;
  if (model.spec().num_classes != vcm::kToyClasses) {
    throw vcm::ValidationError("eval: checkpoint model has " +
                               std::to_string(model.spec().num_classes) +
                               " classes; the toy dataset has 10");
  }
  const auto ds = vcm::gen_toy_dataset(cfg);
  const auto r = vcm::evaluate(model, ds, batch);
  std::printf("samples %zu\n", r.samples);
  std::printf("accuracy %.6f\n", r.accuracy);
  std::printf("mean_loss %.6f\n", r.mean_loss);
  return kExitOk;
}

int cmd_scan_dump(std::size_t height, std::size_t width, const std::string& path_name) {
  const auto id = vcm::parse_path_id(path_name);
  if (!id) {
    throw vcm::ValidationError("unknown path '" + path_name +
                               "' (expected RowSnakeTL, RowSnakeBR, ColSnakeTL, "
                               "ColSnakeBR)");
  }
  if (height == 0 || width == 0) {
    throw vcm::ValidationError("scan-dump: height and width must be positive");
  }
  const auto p = vcm::generate_path({height, width}, *id);
  std::printf("step,flat_index,row,col,direction\n");
  for (std::size_t j = 0; j < p.order.size(); ++j) {
    const auto flat = p.order[j];
    std::printf("%zu,%zu,%zu,%zu,%s\n", j, flat, flat / width, flat % width,
                std::string(vcm::to_string(p.dirs[j])).c_str());
  }
  return kExitOk;
}

int cmd_check() {
  const auto results = vcm::run_invariant_suite();
  vcm::print_check_matrix(std::cout, results);
  for (const auto& r : results) {
    if (!r.passed) return kExitValidation;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VCMamba reference implementation"};
  app.name("vcmamba");
  app.require_subcommand(1);

  std::string preset;
  auto* params = app.add_subcommand("params", "Per-module parameter table for a preset");
  params->add_option("preset", preset, "S, M, B or Nano")->required();

  std::size_t resolution = 0;
  auto* macs = app.add_subcommand("macs", "Per-module multiply-accumulate count");
  macs->add_option("preset", preset, "S, M, B or Nano")->required();
  macs->add_option("--resolution", resolution, "Input side length (default: preset's)");

  std::string config;
  std::size_t progress = 100;
  auto* train = app.add_subcommand("train", "Train on the toy dataset");
  train->add_option("--config", config, "Config file")->required();
  train->add_option("--progress", progress, "Print progress every N steps (0: never)");

  std::string checkpoint;
  vcm::ToyDatasetConfig data{0, 2000, 32, 0.05};
  std::size_t eval_batch = 100;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the toy dataset");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data-seed", data.seed, "Dataset seed");
  eval->add_option("--samples", data.n_samples, "Dataset size");
  eval->add_option("--noise", data.noise, "Pixel noise std");
  eval->add_option("--batch", eval_batch, "Evaluation batch size");

  std::size_t height = 0, width = 0;
  std::string path_name;
  auto* dump = app.add_subcommand("scan-dump", "Print a scan path as CSV");
  dump->add_option("--height", height, "Grid height")->required();
  dump->add_option("--width", width, "Grid width")->required();
  dump->add_option("--path", path_name, "RowSnakeTL, RowSnakeBR, ColSnakeTL or ColSnakeBR")
      ->required();

  auto* check = app.add_subcommand("check", "Run the invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (*params) return cmd_params(preset);
    if (*macs) return cmd_macs(preset, resolution);
    if (*train) return cmd_train(config, progress);
    if (*eval) return cmd_eval(checkpoint, data, eval_batch);
    if (*dump) return cmd_scan_dump(height, width, path_name);
    if (*check) return cmd_check();
  } catch (const vcm::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  std::cerr << app.help();
  return kExitValidation;
}
