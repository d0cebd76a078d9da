#include "nsvit/training.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "nsvit/errors.hpp"
#include "nsvit/ops.hpp"
#include "nsvit/parallel.hpp"
#include "nsvit/rng.hpp"

namespace nsvit {

std::string_view optimizer_name(Optimizer o) {
  switch (o) {
    case Optimizer::kSgdMomentum: return "sgd-momentum";
    case Optimizer::kAdam: return "adam";
  }
  throw ContractError("unknown optimizer");
}

Optimizer optimizer_from_name(std::string_view name) {
  if (name == "sgd-momentum") return Optimizer::kSgdMomentum;
  if (name == "adam") return Optimizer::kAdam;
  throw ContractError(detail::concat("unknown optimizer name: ", name));
}

void TrainConfig::validate() const {
  NSVIT_REQUIRE(epochs >= 1, "epochs must be >= 1, got ", epochs);
  NSVIT_REQUIRE(batch_size >= 1, "batch_size must be >= 1, got ", batch_size);
  NSVIT_REQUIRE(lr >= 0.0 && std::isfinite(lr), "lr must be finite and >= 0, got ", lr);
  NSVIT_REQUIRE(weight_decay >= 0.0, "weight_decay must be >= 0, got ", weight_decay);
  NSVIT_REQUIRE(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0,1), got ",
                momentum);
  if (adversarial) {
    adversarial->attack.validate();
    NSVIT_REQUIRE(adversarial->attack.kind == AttackKind::kFgsm ||
                      adversarial->attack.kind == AttackKind::kPgd,
                  "adversarial training supports fgsm or pgd attacks only");
    NSVIT_REQUIRE(adversarial->replay_ratio >= 0.0 && adversarial->replay_ratio <= 1.0,
                  "replay_ratio must lie in [0,1], got ", adversarial->replay_ratio);
  }
}

ParamOptimizer::ParamOptimizer(const TrainConfig& cfg, VitParams& params)
    : cfg_(cfg), named_(params.named()) {
  m_.resize(named_.size());
  v_.resize(named_.size());
  for (size_t i = 0; i < named_.size(); ++i) {
    const auto n = static_cast<size_t>(named_[i].second.numel());
    m_[i].assign(n, 0.0);
    if (cfg_.optimizer == Optimizer::kAdam) v_[i].assign(n, 0.0);
  }
}

void ParamOptimizer::step() {
  ++t_;
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (size_t i = 0; i < named_.size(); ++i) {
    Tensor& p = named_[i].second;
    auto data = p.data_mut();
    const auto grad = p.grad();  // reads zeros when absent
    for (size_t j = 0; j < data.size(); ++j) {
      const double g =
          static_cast<double>(grad[j]) + cfg_.weight_decay * data[j];
      double update;
      if (cfg_.optimizer == Optimizer::kAdam) {
        m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * g;
        v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * g * g;
        update = (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + kEps);
      } else {
        m_[i][j] = cfg_.momentum * m_[i][j] + g;
        update = m_[i][j];
      }
      data[j] = static_cast<float>(data[j] - cfg_.lr * update);
    }
  }
}

namespace {

int argmax_row(const Tensor& logits) {
  int best = 0;
  const auto d = logits.data();
  for (size_t i = 1; i < d.size(); ++i)
    if (d[i] > d[static_cast<size_t>(best)]) best = static_cast<int>(i);
  return best;
}

struct SplitEval {
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

SplitEval evaluate_split(const VitModel& model, const Dataset& ds,
                         const std::vector<size_t>& indices) {
  std::vector<double> losses(indices.size(), 0.0);
  std::vector<int> hits(indices.size(), 0);
  parallel_for(static_cast<int64_t>(indices.size()), [&](int64_t i) {
    const size_t idx = indices[static_cast<size_t>(i)];
    Tensor logits = model.forward(ds.images[idx]);
    losses[static_cast<size_t>(i)] =
        ops::cross_entropy(logits, ds.labels[idx]).item();
    hits[static_cast<size_t>(i)] = argmax_row(logits) == ds.labels[idx];
  });
  SplitEval ev;
  int64_t correct = 0;
  for (size_t i = 0; i < indices.size(); ++i) {
    ev.mean_loss += losses[i];
    correct += hits[i];
  }
  ev.mean_loss /= static_cast<double>(indices.size());
  ev.accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(indices.size());
  return ev;
}

TrainHistory train_impl(VitModel& model, const Dataset& dataset,
                        const TrainConfig& cfg, bool adversarial) {
  cfg.validate();
  dataset.validate();
  if (adversarial) {
    NSVIT_REQUIRE(cfg.adversarial.has_value(),
                  "adversarial_train needs cfg.adversarial");
  } else {
    NSVIT_REQUIRE(!cfg.adversarial.has_value(),
                  "cfg.adversarial is set; use adversarial_train");
  }
  std::vector<size_t> train_idx = dataset.split_indices(Split::kTrain);
  NSVIT_REQUIRE(!train_idx.empty(), "dataset has no train samples");
  std::vector<size_t> val_idx = dataset.split_indices(Split::kVal);
  if (val_idx.empty()) val_idx = train_idx;

  VitParams& params = model.params_mut();
  NSVIT_REQUIRE(params.all_finite(), "initial parameters are not finite");
  VitParams snapshot = params.clone();
  params.set_requires_grad(true);
  ParamOptimizer opt(cfg, params);

  TrainHistory history;
  const auto batch =
      static_cast<size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order = train_idx;
    Rng::stream(cfg.seed, "train.shuffle", static_cast<uint64_t>(epoch))
        .shuffle(order);

    double loss_sum = 0.0;
    int64_t hit_sum = 0;
    for (size_t start = 0; start < order.size(); start += batch) {
      const size_t b = std::min(batch, order.size() - start);

      // Assemble the batch; under adversarial training the trailing samples
      // (after the clean replay share) are replaced by attacked copies.
      std::vector<Tensor> images(b);
      std::vector<int> labels(b);
      size_t n_clean = b;
      if (adversarial) {
        n_clean = static_cast<size_t>(
            std::llround(cfg.adversarial->replay_ratio * static_cast<double>(b)));
        n_clean = std::min(n_clean, b);
      }
      const AttackConfig* atk = adversarial ? &cfg.adversarial->attack : nullptr;
      if (atk) params.set_requires_grad(false);
      for (size_t k = 0; k < b; ++k) {
        const size_t idx = order[start + k];
        labels[k] = dataset.labels[idx];
        if (atk && k >= n_clean) {
          const uint64_t attack_index =
              static_cast<uint64_t>(epoch) * order.size() + (start + k);
          Rng rng = Rng::stream(cfg.seed, "train.attack", attack_index);
          if (atk->kind == AttackKind::kFgsm) {
            images[k] = fgsm(model, dataset.images[idx], labels[k], atk->epsilon);
          } else {
            images[k] = pgd(model, dataset.images[idx], labels[k], *atk, &rng);
          }
        } else {
          images[k] = dataset.images[idx];
        }
      }
      if (atk) params.set_requires_grad(true);

      params.zero_grads();
      double batch_loss = 0.0;
      for (size_t k = 0; k < b; ++k) {
        Graph g;
        Tensor logits = model.forward(images[k], nullptr, nullptr, &g);
        Tensor loss = ops::cross_entropy(logits, labels[k], &g);
        g.backward(loss);
        batch_loss += loss.item();
        loss_sum += loss.item();
        hit_sum += argmax_row(logits) == labels[k];
      }
      batch_loss /= static_cast<double>(b);
      if (!std::isfinite(batch_loss)) {
        params = snapshot;
        history.diverged = true;
        return history;
      }

      const float inv_b = 1.0f / static_cast<float>(b);
      for (auto& [name, tensor] : params.named())
        for (float& gv : tensor.grad_mut()) gv *= inv_b;
      opt.step();
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(order.size());
    stats.train_accuracy =
        100.0 * static_cast<double>(hit_sum) / static_cast<double>(order.size());
    params.set_requires_grad(false);
    SplitEval val = evaluate_split(model, dataset, val_idx);
    params.set_requires_grad(true);
    stats.val_loss = val.mean_loss;
    stats.val_accuracy = val.accuracy;
    history.epochs.push_back(stats);
    snapshot = params.clone();
  }
  params.set_requires_grad(false);
  return history;
}

}  // namespace

TrainHistory train(VitModel& model, const Dataset& dataset, const TrainConfig& cfg) {
  return train_impl(model, dataset, cfg, false);
}

TrainHistory adversarial_train(VitModel& model, const Dataset& dataset,
                               const TrainConfig& cfg) {
  return train_impl(model, dataset, cfg, true);
}

std::vector<int64_t> smoothing_votes(const VitModel& model, const Tensor& image,
                                     double sigma, int n_samples, uint64_t seed) {
  NSVIT_REQUIRE(sigma >= 0.0, "sigma must be >= 0, got ", sigma);
  NSVIT_REQUIRE(n_samples >= 1, "n_samples must be >= 1, got ", n_samples);
  std::vector<int64_t> votes(static_cast<size_t>(model.config().num_classes), 0);
  if (sigma == 0.0) {
    votes[static_cast<size_t>(model.predict(image))] = n_samples;
    return votes;
  }
  std::vector<int> preds(static_cast<size_t>(n_samples), 0);
  parallel_for(n_samples, [&](int64_t i) {
    Rng rng = Rng::stream(seed, "smoothing", static_cast<uint64_t>(i));
    Tensor noisy = image.clone();
    for (float& v : noisy.data_mut()) {
      v = std::clamp(v + static_cast<float>(sigma * rng.normal()), 0.0f, 1.0f);
    }
    preds[static_cast<size_t>(i)] = model.predict(noisy);
  });
  for (int p : preds) ++votes[static_cast<size_t>(p)];
  return votes;
}

int majority_class(const std::vector<int64_t>& votes) {
  NSVIT_REQUIRE(!votes.empty(), "empty vote tally");
  size_t best = 0;
  for (size_t k = 1; k < votes.size(); ++k)
    if (votes[k] > votes[best]) best = k;  // strict: ties keep the lower index
  return static_cast<int>(best);
}

int randomized_smoothing_predict(const VitModel& model, const Tensor& image,
                                 double sigma, int n_samples, uint64_t seed) {
  return majority_class(smoothing_votes(model, image, sigma, n_samples, seed));
}

}  // namespace nsvit
