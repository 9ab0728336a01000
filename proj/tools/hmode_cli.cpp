#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "hmode/config.hpp"
#include "hmode/data.hpp"
#include "hmode/gradcheck.hpp"
#include "hmode/trainer.hpp"

namespace fs = std::filesystem;
using namespace hmode;

namespace {

void add_config_flags(CLI::App* cmd, std::map<std::string, std::string>& flags) {
  for (const std::string& key : config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&flags, key](const std::string& v) { flags[key] = v; }, "override config key " + key);
  }
}

std::pair<SyntheticSceneSpec, std::size_t> read_synth_spec(const fs::path& path) {
  SyntheticSceneSpec spec;
  std::size_t images = 20;
  for (const auto& [key, value] : read_config_file(path)) {
    try {
      if (key == "height") spec.height = std::stoul(value);
      else if (key == "width") spec.width = std::stoul(value);
      else if (key == "count_min") spec.count_min = std::stoul(value);
      else if (key == "count_max") spec.count_max = std::stoul(value);
      else if (key == "cluster_count") spec.cluster_count = std::stoul(value);
      else if (key == "blob_radius") spec.blob_radius = std::stod(value);
      else if (key == "seed") spec.seed = std::stoull(value);
      else if (key == "images") images = std::stoul(value);
      else throw ConfigError("unknown synth key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("synth key '" + key + "': cannot parse '" + value + "'");
    }
  }
  return {spec, images};
}

void print_losses(std::size_t step, const StepLosses& l) {
  std::printf("step %zu total %.6g L_Des %.6g L_Rel %.6g L_Att %.6g L_Eim %.6g\n", step, l.total, l.density,
              l.relative, l.attention, l.importance);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical mixture-of-density-experts crowd counter"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, ckpt_path, image_path, spec_path;
  std::map<std::string, std::string> flags;
  std::size_t log_every = 10;

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
  train->add_option("--data", data_dir, "dataset root (images/, labels/)")->required();
  train->add_option("--out", out_path, "output directory")->required();
  train->add_option("--log_every", log_every, "print every N steps (0: quiet)");
  add_config_flags(train, flags);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir)->required();
  eval->add_option("--out", out_path, "directory for eval.csv and eval.json");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--config", config_path)->check(CLI::ExistingFile);
  add_config_flags(grad, flags);

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--spec", spec_path)->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out_path)->required();

  auto* predict = app.add_subcommand("predict", "density map for one image");
  predict->add_option("--ckpt", ckpt_path)->required()->check(CLI::ExistingFile);
  predict->add_option("--image", image_path)->required();
  predict->add_option("--out", out_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const TrainConfig cfg = resolve_config(config_path, flags);
      const auto data = load_dataset(data_dir);
      const auto summary = run_training(cfg, data, out_path, [&](std::size_t step, const StepLosses& l) {
        if (log_every > 0 && step % log_every == 0) print_losses(step, l);
      });
      print_losses(summary.steps - 1, summary.last);
      const auto report = evaluate_checkpoint(read_checkpoint(summary.checkpoint), data);
      std::printf("train mae %.6g mse %.6g\ncheckpoint %s\n", report.mae, report.mse,
                  summary.checkpoint.string().c_str());
    } else if (*eval) {
      const auto report = evaluate_checkpoint(read_checkpoint(ckpt_path), load_dataset(data_dir));
      if (!out_path.empty()) {
        fs::create_directories(out_path);
        write_report_csv(report, fs::path(out_path) / "eval.csv");
        write_report_json(report, fs::path(out_path) / "eval.json");
      }
      std::printf("images %zu mae %.6g mse %.6g game %.6g %.6g %.6g %.6g\n", report.per_image.size(), report.mae,
                  report.mse, report.game[0], report.game[1], report.game[2], report.game[3]);
    } else if (*grad) {
      const auto report = run_gradcheck(resolve_config(config_path, flags));
      for (std::size_t c = 0; c < kGradcheckComponents; ++c) {
        std::printf("%-6s max_rel_error %.3e %s  (worst %s)\n", kGradcheckNames[c], report.max_rel_error[c],
                    report.max_rel_error[c] < 1e-3 ? "ok" : "FAIL", report.worst_parameter[c].c_str());
      }
      std::printf("%zu parameters, %.1f s: %s\n", report.parameters, report.seconds,
                  report.passed ? "PASS" : "FAIL");
      return report.passed ? 0 : 1;
    } else if (*synth) {
      const auto [spec, images] = read_synth_spec(spec_path);
      std::vector<AnnotatedImage> items;
      for (std::size_t i = 0; i < images; ++i) {
        SyntheticSceneSpec s = spec;
        s.seed = spec.seed + i;
        items.push_back(synth_generate(s));
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04zu", i);
        items.back().name = name;
      }
      write_dataset(out_path, items);
      std::printf("wrote %zu images to %s\n", items.size(), out_path.c_str());
    } else if (*predict) {
      const auto density = predict_checkpoint(read_checkpoint(ckpt_path), read_png(image_path));
      write_density_dump(out_path, density);
      double count = 0;
      for (float v : density.values()) count += v;
      std::printf("%.6f\n", count);
    }
  } catch (const hmode::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
