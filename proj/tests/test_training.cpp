#include <cmath>
#include <numbers>

#include "doctest.h"
#include "polypseg/checkpoint.hpp"
#include "polypseg/errors.hpp"
#include "polypseg/training.hpp"
#include "synthetic.hpp"

using namespace polypseg;
namespace fs = std::filesystem;

namespace {

bool rel_close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::abs(b); }

ArchConfig small_arch(std::uint64_t seed = 0) {
  ArchConfig a;
  a.input_height = a.input_width = 32;
  a.init_seed = seed;
  return a;
}

std::vector<std::vector<float>> trainable_snapshot(SegmentationModel<float>& m) {
  std::vector<std::vector<float>> out;
  for (auto& [name, p] : m.parameters()) {
    if (p->trainable) out.emplace_back(p->value.data(), p->value.data() + p->size());
  }
  return out;
}

}  // namespace

TEST_CASE("one-cycle endpoints with the default config") {
  const TrainConfig cfg;
  const Index total = 1000;
  const Index boundary = warmup_boundary(total, cfg.pct_warmup);
  CHECK(boundary == 250);
  CHECK(rel_close(one_cycle_schedule(0, total, cfg).lr, 4e-4, 1e-12));
  CHECK(rel_close(one_cycle_schedule(boundary, total, cfg).lr, 1e-2, 1e-12));
  CHECK(rel_close(one_cycle_schedule(total, total, cfg).lr, 1e-6, 1e-12));
  CHECK(one_cycle_schedule(0, total, cfg).momentum == doctest::Approx(0.95));
  CHECK(one_cycle_schedule(boundary, total, cfg).momentum == doctest::Approx(0.85));
  CHECK(one_cycle_schedule(total, total, cfg).momentum == doctest::Approx(0.95));

  TrainConfig literal = cfg;
  literal.lr_anchor = LrAnchor::Initial;
  CHECK(rel_close(one_cycle_schedule(0, total, literal).lr, 1e-2, 1e-12));
  CHECK(rel_close(one_cycle_schedule(boundary, total, literal).lr, 0.25, 1e-12));

  CHECK(warmup_boundary(2, 0.25) == 1);
  CHECK(warmup_boundary(10, 0.99) == 9);
  CHECK_THROWS_AS(one_cycle_schedule(0, 1, cfg), ConfigError);
  CHECK_THROWS_AS(one_cycle_schedule(11, 10, cfg), ConfigError);
  CHECK_THROWS_AS(one_cycle_schedule(-1, 10, cfg), ConfigError);
}

TEST_CASE("schedule is unimodal and momentum mirrors it") {
  const TrainConfig cfg;
  const Index total = 10000;
  const Index boundary = warmup_boundary(total, cfg.pct_warmup);
  const double start = cfg.peak_lr / cfg.div_start, end = cfg.peak_lr / cfg.div_final;
  double prev = 0;
  for (Index s = 0; s <= total; ++s) {
    const auto p = one_cycle_schedule(s, total, cfg);
    if (s > 0) {
      if (s <= boundary) CHECK(p.lr >= prev);
      else CHECK(p.lr <= prev);
    }
    prev = p.lr;
    const double lr_progress = s <= boundary ? (cfg.peak_lr - p.lr) / (cfg.peak_lr - start)
                                             : (cfg.peak_lr - p.lr) / (cfg.peak_lr - end);
    const double m_progress = (p.momentum - cfg.momentum_low) / (cfg.momentum_high - cfg.momentum_low);
    CHECK(std::abs(lr_progress - m_progress) <= 1e-9);
  }
}

TEST_CASE("binary cross-entropy values") {
  Rng rng(3);
  Tensor<double> zeros(2, 1, 4, 4), targets(2, 1, 4, 4), logits(2, 1, 4, 4);
  for (Index i = 0; i < targets.size(); ++i) {
    targets.data()[i] = rng.bernoulli(0.3) ? 1 : 0;
    logits.data()[i] = 6 * rng.normal();
  }
  CHECK(std::abs(bce_with_logits(zeros, targets) - std::numbers::ln2) <= 1e-9);

  Tensor<double> neg = logits, flipped = targets;
  neg.array() = -logits.array();
  flipped.array() = 1 - targets.array();
  CHECK(std::abs(bce_with_logits(logits, targets) - bce_with_logits(neg, flipped)) <= 1e-9);

  // direct definition on moderate logits
  double direct = 0;
  for (Index i = 0; i < logits.size(); ++i) {
    const double p = 1 / (1 + std::exp(-logits.data()[i]));
    direct -= targets.data()[i] * std::log(p) + (1 - targets.data()[i]) * std::log(1 - p);
  }
  CHECK(bce_with_logits(logits, targets) == doctest::Approx(direct / logits.size()).epsilon(1e-9));

  Tensor<float> big(1, 1, 1, 2), t(1, 1, 1, 2);
  big.array() << 100.f, -100.f;
  t.array() << 1.f, 1.f;
  CHECK(bce_with_logits(big, t) == doctest::Approx(50.0).epsilon(1e-6));
  CHECK(std::isfinite(bce_with_logits_grad(big, t).grad.array().sum()));

  Tensor<float> half = Tensor<float>::constant({1, 1, 1, 2}, 0.5f);
  CHECK_THROWS_AS(bce_with_logits(big, half), DataError);
  CHECK_THROWS_AS(bce_with_logits(big, Tensor<float>(1, 1, 2, 1)), ShapeError);
}

TEST_CASE("adam step matches the textbook update with per-step beta1") {
  Parameter<float> p({3}, true);
  p.value << 0.5f, -1.0f, 2.0f;
  Parameter<float> frozen({2}, false);
  Adam adam({{"p", &p}, {"frozen", &frozen}}, 0.999, 1e-8);

  std::array<double, 3> x{0.5, -1.0, 2.0}, m{}, v{};
  const std::array<std::array<double, 3>, 2> grads{{{0.1, -0.2, 0.3}, {-0.05, 0.4, 0.0}}};
  const std::array<double, 2> lrs{1e-2, 5e-3}, beta1s{0.95, 0.9};
  for (int t = 0; t < 2; ++t) {
    for (int i = 0; i < 3; ++i) p.grad[i] = static_cast<float>(grads[t][i]);
    adam.step(lrs[t], beta1s[t]);
    for (int i = 0; i < 3; ++i) {
      m[i] = beta1s[t] * m[i] + (1 - beta1s[t]) * grads[t][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t][i] * grads[t][i];
      const double mh = m[i] / (1 - std::pow(beta1s[t], t + 1));
      const double vh = v[i] / (1 - std::pow(0.999, t + 1));
      x[i] -= lrs[t] * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  CHECK(adam.steps() == 2);
  for (int i = 0; i < 3; ++i) CHECK(p.value[i] == doctest::Approx(x[i]).epsilon(1e-6));
  CHECK((frozen.value.array() == 0).all());
}

TEST_CASE("zero learning rate leaves trainable parameters bit-exact") {
  SegmentationModel<float> m(small_arch(1));
  const auto pairs = testing::synthetic_dataset(1, 2, 32, 32);
  const Batch batch = make_batches(pairs, 2, false, 0).at(0);
  const auto before = trainable_snapshot(m);
  const float running_before = m.find("encoder.stem.bn.running_mean")->value[0];
  Adam adam(m.parameters());
  const auto outcome = train_step(m, batch, adam, {0.0, 0.95}, 0);
  CHECK(std::isfinite(outcome.loss));
  CHECK(trainable_snapshot(m) == before);
  // batch-norm running statistics are buffers and still move
  CHECK(m.find("encoder.stem.bn.running_mean")->value[0] != running_before);
}

TEST_CASE("training steps are deterministic") {
  const auto pairs = testing::synthetic_dataset(2, 4, 32, 32);
  const auto batches = make_batches(pairs, 2, true, 9);
  std::vector<double> losses[2];
  std::uint64_t sums[2];
  for (int run = 0; run < 2; ++run) {
    SegmentationModel<float> m(small_arch(4));
    Adam adam(m.parameters());
    TrainConfig cfg;
    for (std::size_t s = 0; s < 4; ++s) {
      losses[run].push_back(train_step(m, batches[s % 2], adam, one_cycle_schedule(s, 4, cfg), s).loss);
    }
    sums[run] = parameter_checksum(m.parameters());
  }
  CHECK(losses[0] == losses[1]);
  CHECK(sums[0] == sums[1]);
}

TEST_CASE("non-finite values abort the step without touching parameters") {
  SegmentationModel<float> m(small_arch(2));
  const auto pairs = testing::synthetic_dataset(3, 2, 32, 32);
  const Batch batch = make_batches(pairs, 2, false, 0).at(0);
  m.find("head.conv.bias")->value[0] = std::numeric_limits<float>::quiet_NaN();
  const auto before = parameter_checksum(m.parameters_with_prefix("decoder."));
  Adam adam(m.parameters());
  try {
    train_step(m, batch, adam, {0.01, 0.9}, 17);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 17") != std::string::npos);
    CHECK(msg.find("lr=0.01") != std::string::npos);
    CHECK(msg.find(pairs[0].id) != std::string::npos);
  }
  CHECK(adam.steps() == 0);
  CHECK(parameter_checksum(m.parameters_with_prefix("decoder.")) == before);
}

TEST_CASE("fit writes history and checkpoints") {
  const fs::path dir = testing::scratch_dir("fit");
  const auto all = testing::synthetic_dataset(4, 6, 40, 36);
  const std::vector<SamplePair> train(all.begin(), all.begin() + 4), val(all.begin() + 4, all.end());
  SegmentationModel<float> m(small_arch(3));
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  FitOptions opt;
  opt.run_dir = dir;
  opt.augmentation.target_height = opt.augmentation.target_width = 32;
  std::size_t step_calls = 0;
  opt.on_step = [&](const StepRecord&) { ++step_calls; };
  const FitResult r = fit(m, train, val, cfg, opt);

  CHECK(r.total_steps == 4);
  CHECK(step_calls == 4);
  REQUIRE(r.history.steps.size() == 4);
  CHECK(r.history.epochs.size() == 2);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(r.history.steps[s].step == s);
    CHECK(r.history.steps[s].lr == one_cycle_schedule(static_cast<Index>(s), 4, cfg).lr);
  }
  const TrainHistory logged = read_history(dir / "history.jsonl");
  REQUIRE(logged.steps.size() == 4);
  CHECK(logged.steps[3].loss == r.history.steps[3].loss);
  CHECK(logged.epochs[1].validation.dsc == r.history.epochs[1].validation.dsc);
  CHECK(fs::exists(dir / "last.ckpt"));
  CHECK(fs::exists(dir / "best.ckpt"));
  const auto last = load_checkpoint(dir / "last.ckpt");
  CHECK(last.extra.at("train_config").at("epochs") == 2);
  CHECK(last.extra.at("state").at("step") == 4);
  CHECK(parameter_checksum(last.model->parameters()) == parameter_checksum(m.parameters()));

  CHECK_THROWS_AS(fit(m, train, train, cfg, {}), ConfigError);
  FitOptions wrong = opt;
  wrong.run_dir.clear();
  wrong.augmentation.target_height = 64;
  CHECK_THROWS_AS(fit(m, train, val, cfg, wrong), ConfigError);
  TrainConfig one = cfg;
  one.epochs = 1;
  one.batch_size = 8;
  CHECK_THROWS_AS(fit(m, train, val, one, {}), ConfigError);
}

TEST_CASE("prediction returns masks at the original resolution") {
  SegmentationModel<float> m(small_arch(5));
  const SamplePair p = testing::synthetic_polyp(5, 45, 61, "odd");
  const Mask mask = predict_mask(m, p.image, 0.5);
  CHECK(mask.rows() == 45);
  CHECK(mask.cols() == 61);
  CHECK((mask <= 1).all());
  CHECK((predict_mask(m, p.image, 0.5) == mask).all());

  const std::vector<SamplePair> pairs{p, testing::synthetic_polyp(6, 32, 32, "sq")};
  const auto report = evaluate_dataset(m, pairs, 0.5, Aggregation::PerImageMean);
  CHECK(report.per_image.size() == 2);
  const auto eval = evaluate_pairs(m, pairs, 0.5, Aggregation::GlobalCounts);
  CHECK(std::isfinite(eval.loss));
  CHECK(eval.report.totals.total() == 2 * 32 * 32);
}
