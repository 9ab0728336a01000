#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "hmode/checkpoint.hpp"
#include "hmode/config.hpp"
#include "hmode/gradcheck.hpp"
#include "hmode/trainer.hpp"

namespace hmode {
namespace {

namespace fs = std::filesystem;

class TrainerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("hmode_trainer_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    unsetenv("HMODE_SEED");
  }
  void TearDown() override {
    fs::remove_all(dir_);
    unsetenv("HMODE_SEED");
  }

  static std::vector<AnnotatedImage> scenes(std::size_t n, std::size_t size = 32) {
    std::vector<AnnotatedImage> out;
    for (std::size_t i = 0; i < n; ++i) {
      SyntheticSceneSpec spec;
      spec.height = spec.width = size;
      spec.count_min = 2;
      spec.count_max = 6;
      spec.seed = 100 + i;
      out.push_back(synth_generate(spec));
    }
    return out;
  }

  static TrainConfig small_config(int precision = 32) {
    TrainConfig cfg;
    cfg.crop = 32;
    cfg.batch_size = 2;
    cfg.epochs = 3;
    cfg.lr = 1e-3;
    cfg.precision = precision;
    cfg.seed = 5;
    return cfg;
  }

  void write_file(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

  template <typename T>
  static void expect_same_parameters(const HmodeNet<T>& a, const HmodeNet<T>& b) {
    ASSERT_EQ(a.parameters().size(), b.parameters().size());
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      auto va = a.parameters()[i].value.values();
      auto vb = b.parameters()[i].value.values();
      ASSERT_EQ(va.size(), vb.size());
      EXPECT_EQ(std::memcmp(va.data(), vb.data(), va.size() * sizeof(T)), 0) << a.parameters()[i].name;
    }
  }

  fs::path dir_;
};

TEST_F(TrainerTest, UnknownKeyIsNamed) {
  try {
    apply_config({}, {{"learning_rate", "1"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
}

TEST_F(TrainerTest, InvalidValuesNameTheKey) {
  const std::pair<std::string, std::string> bad[] = {
      {"lr", "abc"}, {"crop", "20"}, {"precision", "16"}, {"hflip_prob", "2"}, {"batch_size", "0"}};
  for (const auto& [key, value] : bad) {
    try {
      resolve_config({}, {{key, value}});
      ADD_FAILURE() << key;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  }
}

TEST_F(TrainerTest, ConfigFileCommentsAndLineNumbers) {
  write_file(dir_ / "a.cfg", "# comment\nlr = 0.5  # trailing\n\nS = 4\n");
  const auto cfg = resolve_config(dir_ / "a.cfg", {});
  EXPECT_EQ(cfg.lr, 0.5);
  EXPECT_EQ(cfg.S, 4u);
  write_file(dir_ / "b.cfg", "lr = 1\nno equals sign\n");
  try {
    read_config_file(dir_ / "b.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST_F(TrainerTest, SeedPrecedenceFileEnvFlag) {
  write_file(dir_ / "s.cfg", "seed = 1\n");
  EXPECT_EQ(resolve_config(dir_ / "s.cfg", {}).seed, 1u);
  setenv("HMODE_SEED", "2", 1);
  EXPECT_EQ(resolve_config(dir_ / "s.cfg", {}).seed, 2u);
  EXPECT_EQ(resolve_config(dir_ / "s.cfg", {{"seed", "3"}}).seed, 3u);
}

TEST_F(TrainerTest, PresetAppliesBeforeWidths) {
  const auto cfg = apply_config({}, {{"encoder_channels", "4,8,8"}, {"preset", "toy"}});
  EXPECT_EQ(cfg.model.encoder_stage_channels, (std::vector<std::size_t>{4, 8, 8}));
}

TEST_F(TrainerTest, ConfigJsonRoundTrip) {
  auto cfg = small_config(64);
  cfg.sigma = 3.5;
  cfg.model.fusion = FusionMode::kAverage;
  EXPECT_EQ(to_json(train_config_from_json(to_json(cfg))), to_json(cfg));
}

TEST_F(TrainerTest, LearningRateHalvesAtEpochIndex) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(cfg.learning_rate(0), 2e-5);
  EXPECT_DOUBLE_EQ(cfg.learning_rate(99), 2e-5);
  EXPECT_DOUBLE_EQ(cfg.learning_rate(100), 1e-5);
  EXPECT_DOUBLE_EQ(cfg.learning_rate(199), 1e-5);
}

TEST_F(TrainerTest, FirstAdamStepMovesBySignedLearningRate) {
  // With zero moments, the bias-corrected first update is lr * g / (|g| + eps).
  Trainer<double> trainer(small_config(64), scenes(2));
  std::vector<std::vector<double>> before;
  for (const auto& p : trainer.model().parameters()) {
    auto v = p.value.values();
    before.emplace_back(v.begin(), v.end());
  }
  trainer.train_step();
  const auto& params = trainer.model().parameters();
  std::size_t moved = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].value.has_grad()) continue;
    const auto g = params[i].value.grad();
    auto after = params[i].value.values();
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double expected = -1e-3 * g[k] / (std::abs(g[k]) + 1e-8);
      EXPECT_NEAR(after[k] - before[i][k], expected, 1e-12) << params[i].name;
      moved += g[k] != 0;
    }
  }
  EXPECT_GT(moved, 0u);
}

TEST_F(TrainerTest, CheckpointRoundTrip) {
  for (int precision : {32, 64}) {
    auto cfg = small_config(precision);
    const auto path = dir_ / ("ck" + std::to_string(precision) + ".bin");
    if (precision == 32) {
      Trainer<float> t(cfg, scenes(2));
      t.train_step();
      t.save(path);
      const auto ck = read_checkpoint(path);
      EXPECT_EQ(ck.step, 1u);
      EXPECT_EQ(ck.precision, 32);
      HmodeNet<float> net(cfg.model, 99);
      load_parameters(net, ck);
      expect_same_parameters(t.model(), net);
    } else {
      Trainer<double> t(cfg, scenes(2));
      t.train_step();
      t.save(path);
      const auto ck = read_checkpoint(path);
      EXPECT_EQ(ck.precision, 64);
      EXPECT_EQ(to_json(ck.config), to_json(cfg));
      HmodeNet<double> net(cfg.model, 99);
      load_parameters(net, ck);
      expect_same_parameters(t.model(), net);
    }
  }
}

TEST_F(TrainerTest, CheckpointMismatchesThrow) {
  auto cfg = small_config();
  Trainer<float> t(cfg, scenes(2));
  t.save(dir_ / "ck.bin");
  const auto ck = read_checkpoint(dir_ / "ck.bin");

  auto other = cfg.model;
  other.gating_channels = 4;
  HmodeNet<float> wrong(other, 0);
  EXPECT_THROW(load_parameters(wrong, ck), CheckpointError);

  Trainer<double> wrong_precision(small_config(64), scenes(2));
  EXPECT_THROW(wrong_precision.resume(ck), CheckpointError);

  const auto size = fs::file_size(dir_ / "ck.bin");
  fs::resize_file(dir_ / "ck.bin", size / 2);
  EXPECT_THROW(read_checkpoint(dir_ / "ck.bin"), CheckpointError);
  write_file(dir_ / "junk.bin", "not a checkpoint");
  EXPECT_THROW(read_checkpoint(dir_ / "junk.bin"), CheckpointError);
  EXPECT_THROW(read_checkpoint(dir_ / "missing.bin"), CheckpointError);
}

template <typename T>
void check_resume_is_exact(const TrainConfig& cfg, const std::vector<AnnotatedImage>& data, const fs::path& path) {
  Trainer<T> straight(cfg, data);
  for (int i = 0; i < 3; ++i) straight.train_step();

  Trainer<T> first(cfg, data);
  first.train_step();
  first.train_step();
  first.save(path);
  Trainer<T> resumed(cfg, data);
  resumed.resume(read_checkpoint(path));
  EXPECT_EQ(resumed.step(), 2u);
  resumed.train_step();

  for (std::size_t i = 0; i < straight.model().parameters().size(); ++i) {
    auto a = straight.model().parameters()[i].value.values();
    auto b = resumed.model().parameters()[i].value.values();
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(T)), 0);
  }
}

TEST_F(TrainerTest, ResumeIsBitExact) {
  // Three items with batch 2 makes the resumed step the first of epoch 1.
  const auto data = scenes(3);
  check_resume_is_exact<float>(small_config(32), data, dir_ / "f.bin");
  check_resume_is_exact<double>(small_config(64), data, dir_ / "d.bin");
}

TEST_F(TrainerTest, RunTrainingWritesLogsAndResumes) {
  auto cfg = small_config();
  cfg.epochs = 2;
  const auto data = scenes(3);
  const auto summary = run_training(cfg, data, dir_ / "run");
  EXPECT_EQ(summary.steps, 4u);
  EXPECT_TRUE(fs::exists(summary.checkpoint));
  std::ifstream steps(dir_ / "run" / "steps.csv");
  std::string line;
  std::getline(steps, line);
  EXPECT_EQ(line, "step,epoch,lr,total,L_Des,L_Rel,L_Att,L_Eim");
  std::size_t rows = 0;
  while (std::getline(steps, line)) ++rows;
  EXPECT_EQ(rows, 4u);

  auto longer = cfg;
  longer.epochs = 3;
  longer.resume = summary.checkpoint.string();
  EXPECT_EQ(run_training(longer, data, dir_ / "run").steps, 6u);

  auto mismatched = longer;
  mismatched.lr = 5e-4;
  EXPECT_THROW(run_training(mismatched, data, dir_ / "run"), CheckpointError);
}

TEST_F(TrainerTest, NonFiniteLossNamesComponent) {
  StepLosses l{1, 1, std::numeric_limits<double>::quiet_NaN(), 1, 1};
  try {
    check_finite(l, 7);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("L_Rel"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("7"), std::string::npos);
  }
  l = {std::numeric_limits<double>::infinity(), 1, 1, 1, 1};
  EXPECT_THROW(check_finite(l, 0), NumericalError);
  EXPECT_NO_THROW(check_finite({1, 1, 1, 1, 1}, 0));
}

TEST_F(TrainerTest, PadToMultipleReflects) {
  auto img = Tensor<float>::zeros({2, 3, 5});
  auto v = img.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  const auto padded = pad_to_multiple(img, 8);
  ASSERT_EQ(padded.shape(), (Shape{2, 8, 8}));
  auto at = [](const Tensor<float>& t, std::size_t c, std::size_t y, std::size_t x) {
    return t[(c * t.dim(1) + y) * t.dim(2) + x];
  };
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < 3; ++y) {
      for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(at(padded, c, y, x), at(img, c, y, x));
    }
  }
  EXPECT_EQ(at(padded, 0, 0, 5), at(img, 0, 0, 3));
  EXPECT_EQ(at(padded, 1, 3, 0), at(img, 1, 1, 0));
  EXPECT_EQ(pad_to_multiple(padded, 8).shape(), padded.shape());
}

TEST_F(TrainerTest, PredictionOnBlankImage) {
  HmodeNet<float> net(BackboneConfig::toy(), 3);
  const auto density = predict_density(net, Tensor<float>::zeros({3, 20, 28}));
  ASSERT_EQ(density.shape(), (Shape{20, 28}));
  for (float x : density.values()) {
    EXPECT_TRUE(std::isfinite(x));
    EXPECT_GE(x, 0.0f);
  }
}

TEST_F(TrainerTest, DensityDumpRoundTrip) {
  auto d = DensityMap<float>::zeros({3, 4});
  auto v = d.mutable_values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.25f * static_cast<float>(i);
  write_density_dump(dir_ / "d.bin", d);
  EXPECT_EQ(fs::file_size(dir_ / "d.bin"), 5u + 8u + 12u * 4u);
  const auto back = read_density_dump(dir_ / "d.bin");
  ASSERT_EQ(back.shape(), d.shape());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(back[i], d[i]);
  write_file(dir_ / "bad.bin", "DMAPX");
  EXPECT_THROW(read_density_dump(dir_ / "bad.bin"), IoError);
}

TEST_F(TrainerTest, EvaluateCheckpointReportsEveryImage) {
  auto cfg = small_config();
  Trainer<float> t(cfg, scenes(2));
  t.save(dir_ / "ck.bin");
  const auto data = scenes(3, 24);
  const auto report = evaluate_checkpoint(read_checkpoint(dir_ / "ck.bin"), data);
  ASSERT_EQ(report.per_image.size(), 3u);
  double abs_sum = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(report.per_image[i].gt_count, static_cast<double>(data[i].annotation.count()), 1e-3);
    abs_sum += std::abs(report.per_image[i].pred_count - report.per_image[i].gt_count);
  }
  EXPECT_NEAR(report.mae, abs_sum / 3, 1e-9);
}

TEST_F(TrainerTest, GradcheckDetectsTamperedGradient) {
  GradcheckOptions opts;
  opts.tamper = [](std::size_t c, std::vector<std::vector<double>>& grads) {
    if (c == 0) grads.back()[0] += 1.0;
  };
  const auto report = run_gradcheck(TrainConfig{}, opts);
  EXPECT_FALSE(report.passed);
  EXPECT_GT(report.max_rel_error[0], 0.5);
  EXPECT_NE(report.worst_parameter[0].find("[0]"), std::string::npos);
  for (std::size_t c = 1; c < kGradcheckComponents; ++c) EXPECT_LT(report.max_rel_error[c], 1e-3) << c;
}

}  // namespace
}  // namespace hmode
