#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "nsvit/dataset.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/ops.hpp"
#include "nsvit/rng.hpp"
#include "nsvit/training.hpp"
#include "nsvit/vit.hpp"

#include "common.hpp"

using namespace nsvit;

namespace {

VitConfig tiny_config(int channels = 1, int num_classes = 3) {
  VitConfig cfg;
  cfg.image_size = 8;
  cfg.channels = channels;
  cfg.patch_size = 4;
  cfg.depth = 2;
  cfg.embed_dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.num_classes = num_classes;
  return cfg;
}

Dataset tiny_dataset(int num_classes, int count, uint64_t seed) {
  SyntheticSpec spec;
  spec.num_classes = num_classes;
  spec.count = count;
  spec.channels = 1;
  spec.image_size = 8;
  spec.seed = seed;
  return synthetic_shapes(spec);
}

bool params_bitwise_equal(const VitParams& a, const VitParams& b) {
  const auto na = a.named();
  const auto nb = b.named();
  if (na.size() != nb.size()) return false;
  for (size_t i = 0; i < na.size(); ++i) {
    if (na[i].first != nb[i].first) return false;
    if (na[i].second.shape() != nb[i].second.shape()) return false;
    if (std::memcmp(na[i].second.data().data(), nb[i].second.data().data(),
                    sizeof(float) * static_cast<size_t>(na[i].second.numel())) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("optimizer names and train config validation") {
  CHECK(optimizer_name(Optimizer::kAdam) == "adam");
  CHECK(optimizer_name(Optimizer::kSgdMomentum) == "sgd-momentum");
  CHECK(optimizer_from_name("adam") == Optimizer::kAdam);
  CHECK(optimizer_from_name("sgd-momentum") == Optimizer::kSgdMomentum);
  CHECK_THROWS_AS(optimizer_from_name("adagrad"), ContractError);

  TrainConfig cfg;
  CHECK(cfg.epochs == 20);
  CHECK(cfg.lr == 1e-3);
  CHECK(cfg.batch_size == 64);
  CHECK(cfg.optimizer == Optimizer::kAdam);
  CHECK_NOTHROW(cfg.validate());

  cfg.lr = 0.0;  // accepted: a zero step is the documented degenerate case
  CHECK_NOTHROW(cfg.validate());

  TrainConfig bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = cfg;
  bad.lr = -0.5;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = cfg;
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = cfg;
  bad.adversarial.emplace();
  bad.adversarial->replay_ratio = 1.5;
  CHECK_THROWS_AS(bad.validate(), ContractError);
  bad = cfg;
  bad.adversarial.emplace();
  bad.adversarial->attack.kind = AttackKind::kIgo;
  CHECK_THROWS_AS(bad.validate(), ContractError);

  AttackConfig at = default_at_attack();
  CHECK(at.kind == AttackKind::kPgd);
  CHECK(at.steps == 7);
}

TEST_CASE("adam and sgd-momentum steps match a hand-computed reference") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(3, "train.opt");
  VitParams params = VitParams::init(cfg, rng);
  params.set_requires_grad(true);

  // Deterministic synthetic gradients: g = 0.01 * (j % 7 - 3), refreshed
  // identically before every step.
  auto fill_grads = [&](VitParams& p) {
    for (auto& [name, t] : p.named()) {
      auto gm = t.grad_mut();
      for (size_t j = 0; j < gm.size(); ++j)
        gm[j] = 0.01f * (static_cast<float>(j % 7) - 3.0f);
    }
  };

  SUBCASE("adam with weight decay") {
    TrainConfig tc;
    tc.optimizer = Optimizer::kAdam;
    tc.lr = 0.01;
    tc.weight_decay = 0.1;

    VitParams reference = params.clone();
    std::vector<std::vector<double>> rm, rv;
    for (const auto& [name, t] : reference.named()) {
      rm.emplace_back(static_cast<size_t>(t.numel()), 0.0);
      rv.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    }

    ParamOptimizer opt(tc, params);
    for (int step = 1; step <= 3; ++step) {
      fill_grads(params);
      opt.step();

      auto named_ref = reference.named();
      for (size_t i = 0; i < named_ref.size(); ++i) {
        auto data = named_ref[i].second.data_mut();
        for (size_t j = 0; j < data.size(); ++j) {
          // The gradient enters the update as its float32 value.
          const float g32 = 0.01f * (static_cast<float>(j % 7) - 3.0f);
          const double g =
              static_cast<double>(g32) + 0.1 * static_cast<double>(data[j]);
          rm[i][j] = 0.9 * rm[i][j] + 0.1 * g;
          rv[i][j] = 0.999 * rv[i][j] + 0.001 * g * g;
          const double mh = rm[i][j] / (1.0 - std::pow(0.9, step));
          const double vh = rv[i][j] / (1.0 - std::pow(0.999, step));
          data[j] = static_cast<float>(data[j] - 0.01 * mh / (std::sqrt(vh) + 1e-8));
        }
      }
      CHECK(params_bitwise_equal(params, reference));
    }
  }

  SUBCASE("sgd with momentum") {
    TrainConfig tc;
    tc.optimizer = Optimizer::kSgdMomentum;
    tc.lr = 0.05;
    tc.momentum = 0.9;

    VitParams reference = params.clone();
    std::vector<std::vector<double>> vel;
    for (const auto& [name, t] : reference.named())
      vel.emplace_back(static_cast<size_t>(t.numel()), 0.0);

    ParamOptimizer opt(tc, params);
    for (int step = 1; step <= 3; ++step) {
      fill_grads(params);
      opt.step();

      auto named_ref = reference.named();
      for (size_t i = 0; i < named_ref.size(); ++i) {
        auto data = named_ref[i].second.data_mut();
        for (size_t j = 0; j < data.size(); ++j) {
          const float g32 = 0.01f * (static_cast<float>(j % 7) - 3.0f);
          vel[i][j] = 0.9 * vel[i][j] + static_cast<double>(g32);
          data[j] = static_cast<float>(data[j] - 0.05 * vel[i][j]);
        }
      }
      CHECK(params_bitwise_equal(params, reference));
    }
  }
}

TEST_CASE("lr=0 leaves parameters bitwise unchanged after an epoch") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(4, "train.zerolr");
  VitModel model = VitModel::random_init(cfg, rng);
  VitParams before = model.params().clone();
  Dataset ds = tiny_dataset(3, 12, 5);

  for (Optimizer opt : {Optimizer::kAdam, Optimizer::kSgdMomentum}) {
    TrainConfig tc;
    tc.epochs = 1;
    tc.lr = 0.0;
    tc.batch_size = 4;
    tc.optimizer = opt;
    TrainHistory h = train(model, ds, tc);
    CHECK(h.epochs.size() == 1);
    CHECK_FALSE(h.diverged);
    CHECK(params_bitwise_equal(model.params(), before));
  }
}

TEST_CASE("one-batch memorization reaches 100% train accuracy within 200 steps") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(5, "train.memorize");
  VitModel model = VitModel::random_init(cfg, rng);
  Dataset ds = tiny_dataset(3, 8, 6);

  TrainConfig tc;
  tc.epochs = 200;  // batch = dataset, so one step per epoch
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.seed = 1;
  TrainHistory h = train(model, ds, tc);
  REQUIRE_FALSE(h.diverged);
  REQUIRE(h.epochs.size() == 200);
  CHECK(h.epochs.back().train_accuracy == 100.0);
  CHECK(h.epochs.back().train_loss < h.epochs.front().train_loss);
  for (const EpochStats& e : h.epochs) {
    CHECK(e.val_accuracy >= 0.0);
    CHECK(e.val_accuracy <= 100.0);
    CHECK(std::isfinite(e.train_loss));
  }
}

TEST_CASE("training is bit-deterministic under a fixed seed") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(6, "train.det");
  VitParams init = VitParams::init(cfg, rng);
  Dataset ds = tiny_dataset(3, 16, 7);
  assign_splits(ds, 0.25, 0.0, 11);

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 42;

  VitModel m1(cfg, init.clone());
  VitModel m2(cfg, init.clone());
  TrainHistory h1 = train(m1, ds, tc);
  TrainHistory h2 = train(m2, ds, tc);

  CHECK(params_bitwise_equal(m1.params(), m2.params()));
  REQUIRE(h1.epochs.size() == h2.epochs.size());
  for (size_t i = 0; i < h1.epochs.size(); ++i) {
    CHECK(h1.epochs[i].train_loss == h2.epochs[i].train_loss);
    CHECK(h1.epochs[i].train_accuracy == h2.epochs[i].train_accuracy);
    CHECK(h1.epochs[i].val_loss == h2.epochs[i].val_loss);
    CHECK(h1.epochs[i].val_accuracy == h2.epochs[i].val_accuracy);
  }
}

TEST_CASE("divergence aborts and restores the last good parameters") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(7, "train.diverge");
  VitModel model = VitModel::random_init(cfg, rng);
  VitParams init = model.params().clone();
  Dataset ds = tiny_dataset(3, 8, 8);

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 2;
  tc.lr = 1e18;  // guarantees an overflow to non-finite loss within epoch 0
  TrainHistory h = train(model, ds, tc);

  CHECK(h.diverged);
  CHECK(h.epochs.empty());  // aborted before the first epoch completed
  CHECK(model.params().all_finite());
  CHECK(params_bitwise_equal(model.params(), init));
}

TEST_CASE("adversarial training with epsilon=0 reproduces plain training bitwise") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(8, "train.at0");
  VitParams init = VitParams::init(cfg, rng);
  Dataset ds = tiny_dataset(3, 12, 9);

  TrainConfig plain_cfg;
  plain_cfg.epochs = 2;
  plain_cfg.batch_size = 4;
  plain_cfg.seed = 17;

  VitModel plain_model(cfg, init.clone());
  TrainHistory plain_h = train(plain_model, ds, plain_cfg);

  for (AttackKind kind : {AttackKind::kPgd, AttackKind::kFgsm}) {
    TrainConfig at_cfg = plain_cfg;
    at_cfg.adversarial.emplace();
    at_cfg.adversarial->attack.kind = kind;
    at_cfg.adversarial->attack.epsilon = 0.0f;
    at_cfg.adversarial->attack.steps = 2;
    at_cfg.adversarial->replay_ratio = 0.5;

    VitModel at_model(cfg, init.clone());
    TrainHistory at_h = adversarial_train(at_model, ds, at_cfg);
    CHECK(params_bitwise_equal(at_model.params(), plain_model.params()));
    REQUIRE(at_h.epochs.size() == plain_h.epochs.size());
    for (size_t i = 0; i < at_h.epochs.size(); ++i)
      CHECK(at_h.epochs[i].train_loss == plain_h.epochs[i].train_loss);
  }

  // A real perturbation changes the trajectory.
  TrainConfig at_cfg = plain_cfg;
  at_cfg.epochs = 1;
  at_cfg.adversarial.emplace();
  at_cfg.adversarial->attack.epsilon = 8.0f / 255.0f;
  at_cfg.adversarial->attack.steps = 2;
  VitModel at_model(cfg, init.clone());
  adversarial_train(at_model, ds, at_cfg);

  VitModel plain1(cfg, init.clone());
  TrainConfig p1 = plain_cfg;
  p1.epochs = 1;
  train(plain1, ds, p1);
  CHECK_FALSE(params_bitwise_equal(at_model.params(), plain1.params()));
}

TEST_CASE("train/adversarial_train reject mismatched configs") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(9, "train.guard");
  VitModel model = VitModel::random_init(cfg, rng);
  Dataset ds = tiny_dataset(3, 4, 10);

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  CHECK_THROWS_AS(adversarial_train(model, ds, tc), ContractError);

  tc.adversarial.emplace();
  CHECK_THROWS_AS(train(model, ds, tc), ContractError);

  Dataset empty_train = ds;
  for (auto& s : empty_train.splits) s = Split::kTest;
  tc.adversarial.reset();
  CHECK_THROWS_AS(train(model, empty_train, tc), ContractError);
}

TEST_CASE("validation metrics come from the val split") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(10, "train.val");
  VitModel model = VitModel::random_init(cfg, rng);
  // Constant head: logits are all equal, so every prediction is class 0 and
  // the cross entropy is exactly log K.
  auto& p = model.params_mut();
  for (float& v : p.head_w.data_mut()) v = 0.0f;
  for (float& v : p.head_b.data_mut()) v = 0.0f;

  Dataset ds = tiny_dataset(3, 16, 12);
  assign_splits(ds, 0.5, 0.0, 13);

  TrainConfig tc;
  tc.epochs = 1;
  tc.lr = 0.0;  // frozen parameters: metrics reflect the initial model
  tc.batch_size = 4;
  TrainHistory h = train(model, ds, tc);
  REQUIRE(h.epochs.size() == 1);

  const auto val_idx = ds.split_indices(Split::kVal);
  const auto train_idx = ds.split_indices(Split::kTrain);
  REQUIRE(val_idx.size() == 8);
  int64_t val_zero = 0;
  for (size_t i : val_idx) val_zero += ds.labels[i] == 0;
  int64_t train_zero = 0;
  for (size_t i : train_idx) train_zero += ds.labels[i] == 0;

  CHECK(h.epochs[0].val_accuracy ==
        100.0 * static_cast<double>(val_zero) / static_cast<double>(val_idx.size()));
  CHECK(h.epochs[0].train_accuracy ==
        100.0 * static_cast<double>(train_zero) /
            static_cast<double>(train_idx.size()));
  CHECK(h.epochs[0].val_loss ==
        doctest::Approx(std::log(3.0)).epsilon(1e-5));
  CHECK(h.epochs[0].train_loss ==
        doctest::Approx(std::log(3.0)).epsilon(1e-5));
}

TEST_CASE("randomized smoothing votes, determinism, and tie-breaking") {
  VitConfig cfg = tiny_config();
  Rng rng = Rng::stream(11, "train.smooth");
  VitModel model = VitModel::random_init(cfg, rng);
  Dataset ds = tiny_dataset(3, 6, 14);

  SUBCASE("sigma=0 equals the plain prediction for any n") {
    for (int n : {1, 7}) {
      for (const Tensor& img : ds.images) {
        CHECK(randomized_smoothing_predict(model, img, 0.0, n, 5) ==
              model.predict(img));
        auto votes = smoothing_votes(model, img, 0.0, n, 5);
        CHECK(votes[static_cast<size_t>(model.predict(img))] == n);
      }
    }
  }

  SUBCASE("votes match an independent tally over the same noise streams") {
    const double sigma = 0.3;
    const int n = 12;
    const uint64_t seed = 77;
    for (const Tensor& img : ds.images) {
      auto votes = smoothing_votes(model, img, sigma, n, seed);
      int64_t total = 0;
      for (int64_t v : votes) total += v;
      CHECK(total == n);

      std::vector<int64_t> tally(3, 0);
      for (int i = 0; i < n; ++i) {
        Rng noise = Rng::stream(seed, "smoothing", static_cast<uint64_t>(i));
        Tensor noisy = img.clone();
        for (float& v : noisy.data_mut())
          v = std::clamp(v + static_cast<float>(sigma * noise.normal()), 0.0f, 1.0f);
        ++tally[static_cast<size_t>(model.predict(noisy))];
      }
      CHECK(votes == tally);
      CHECK(randomized_smoothing_predict(model, img, sigma, n, seed) ==
            majority_class(tally));
    }
  }

  SUBCASE("deterministic for fixed seed, sensitive to it") {
    const Tensor& img = ds.images[0];
    auto a = smoothing_votes(model, img, 0.25, 16, 4);
    auto b = smoothing_votes(model, img, 0.25, 16, 4);
    CHECK(a == b);
  }

  SUBCASE("majority ties break to the lower class index") {
    CHECK(majority_class({3, 5, 5}) == 1);
    CHECK(majority_class({0, 0, 0}) == 0);
    CHECK(majority_class({2, 7, 1}) == 1);
    CHECK_THROWS_AS(majority_class({}), ContractError);
  }

  SUBCASE("small-noise majorities are stable as n doubles") {
    int agree = 0;
    for (size_t i = 0; i < 5; ++i) {
      const int a = randomized_smoothing_predict(model, ds.images[i], 0.05, 8, 9);
      const int b = randomized_smoothing_predict(model, ds.images[i], 0.05, 16, 9);
      agree += a == b;
    }
    CHECK(agree >= 4);
  }

  SUBCASE("argument validation") {
    CHECK_THROWS_AS(smoothing_votes(model, ds.images[0], -0.1, 4, 1), ContractError);
    CHECK_THROWS_AS(smoothing_votes(model, ds.images[0], 0.1, 0, 1), ContractError);
  }
}
