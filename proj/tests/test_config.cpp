#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include "us3l/checkpoint.hpp"
#include "us3l/config.hpp"
#include "us3l/rng.hpp"

using namespace us3l;

namespace {

const char* kMinimalConfig = R"({
  "version": 1,
  "seed": 7,
  "encoder": {"input_dim": 8, "backbone": [16, 16], "projector_hidden": [16], "projector_dim": 12},
  "schedule": {"total_iters": 40},
  "optimizer": {"batch_size": 16},
  "data": {"kind": "blobs", "n": 64, "dim": 8, "classes": 2}
})";

}  // namespace

TEST_CASE("minimal config loads with explicit defaults everywhere") {
  auto cfg = load_train_config_text(kMinimalConfig);
  CHECK(cfg.seed == 7);
  CHECK(cfg.loss.base_loss == BaseLoss::nce);
  CHECK(cfg.loss.distill_loss == DistillLoss::mse);
  CHECK(cfg.loss.temperature == 0.5);
  CHECK(cfg.groupreg.lambda == 1e-4);
  CHECK(cfg.groupreg.groups == 8);
  CHECK(cfg.groupreg.alpha == 0.05);
  CHECK(cfg.optimizer.base_lr == 0.5);
  CHECK(cfg.optimizer.momentum == 0.9);
  CHECK(cfg.ema_momentum == 0.99);
  CHECK(cfg.target_mode == TargetMode::momentum);
  CHECK(cfg.encoder.head_mode == cfg.loss.head_mode);

  // The echoed document spells out every field.
  auto text = train_config_to_json_text(cfg);
  for (const char* key :
       {"version", "seed", "output_dir", "encoder", "loss", "schedule",
        "groupreg", "optimizer", "data", "augment", "probe", "collapse",
        "target_mode", "ema_momentum", "teacher_full_width",
        "ema_update_after_step", "epochs"})
    CHECK(text.find(std::string("\"") + key + "\"") != std::string::npos);

  // Round trip through the echo.
  auto again = load_train_config_text(text);
  CHECK(train_config_to_json_text(again) == text);
}

TEST_CASE("unknown keys are rejected at every level") {
  CHECK_THROWS_AS(load_train_config_text(R"({"version":1, "bogus": 3})"),
                  std::invalid_argument);

  const char* nested = R"({
    "version": 1,
    "encoder": {"input_dim": 8, "backbone": [16], "projector_hidden": [], "projector_dim": 8, "typo_key": 1},
    "data": {"kind": "blobs", "n": 64, "dim": 8, "classes": 2}
  })";
  try {
    load_train_config_text(nested);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("encoder.typo_key") != std::string::npos);
  }
}

TEST_CASE("config validation failures surface") {
  // nce base loss with batch 1
  const char* bad_batch = R"({
    "version": 1,
    "encoder": {"input_dim": 8, "backbone": [16], "projector_hidden": [], "projector_dim": 8},
    "optimizer": {"batch_size": 1},
    "data": {"kind": "blobs", "n": 64, "dim": 8, "classes": 2}
  })";
  CHECK_THROWS_AS(load_train_config_text(bad_batch), std::invalid_argument);

  // target_mode contradicting the momentum flags
  const char* bad_target = R"({
    "version": 1,
    "encoder": {"input_dim": 8, "backbone": [16], "projector_hidden": [], "projector_dim": 8},
    "loss": {"momentum_target_base": true, "momentum_target_sub": true},
    "target_mode": "detached_base",
    "data": {"kind": "blobs", "n": 64, "dim": 8, "classes": 2}
  })";
  CHECK_THROWS_AS(load_train_config_text(bad_target), std::invalid_argument);
}

TEST_CASE("epochs derive schedule iterations") {
  const char* with_epochs = R"({
    "version": 1,
    "epochs": 5,
    "encoder": {"input_dim": 8, "backbone": [16], "projector_hidden": [], "projector_dim": 8},
    "optimizer": {"batch_size": 16},
    "data": {"kind": "blobs", "n": 64, "dim": 8, "classes": 2}
  })";
  auto cfg = load_train_config_text(with_epochs);
  CHECK(cfg.schedule.total_iters == 5 * (64 / 16));
}

TEST_CASE("checkpoint round trip restores parameters and stats exactly") {
  EncoderSpec spec;
  spec.input_dim = 6;
  spec.backbone = {8, 8};
  spec.projector_hidden = {8};
  spec.projector_dim = 4;
  spec.head_mode = HeadMode::separate;
  SlimmableEncoder enc(spec, 123);

  // Give it some nontrivial stats.
  Rng rng(5);
  std::vector<Tensor> calib;
  for (int i = 0; i < 2; ++i) {
    std::vector<double> v(static_cast<std::size_t>(8 * 6));
    for (double& x : v) x = rng.gauss();
    calib.push_back(Tensor::from_data({8, 6}, std::move(v)));
  }
  enc.recalibrate(WidthMultiplier(0.5), calib);
  enc.recalibrate(WidthMultiplier(1.0), calib);

  const std::string path =
      (std::filesystem::temp_directory_path() / "us3l_ckpt_test.json").string();
  save_checkpoint(path, enc, CheckpointMeta{1, 42, 100});

  auto loaded = load_checkpoint(path);
  CHECK(loaded.meta.seed == 42);
  CHECK(loaded.meta.iteration == 100);

  auto orig = enc.named_parameters();
  auto rest = loaded.encoder.named_parameters();
  REQUIRE(orig.size() == rest.size());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == rest[i].first);
    auto a = orig[i].second.data();
    auto b = rest[i].second.data();
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  // Eval-mode forward agrees exactly (stats restored too).
  std::vector<double> v(static_cast<std::size_t>(4 * 6));
  for (double& x : v) x = rng.gauss();
  auto batch = Tensor::from_data({4, 6}, v);
  auto a = enc.forward(batch, WidthMultiplier(0.5), ForwardMode::eval);
  auto b = loaded.encoder.forward(batch, WidthMultiplier(0.5), ForwardMode::eval);
  for (std::size_t i = 0; i < a.z.data().size(); ++i)
    CHECK(a.z.data()[i] == b.z.data()[i]);

  std::remove(path.c_str());
}
