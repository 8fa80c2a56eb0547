// Acceptance suite: one PASS/FAIL line per primary criterion, at the stated
// tolerances. Exit status is nonzero when any gated criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include "metric_oracle.hpp"
#include "polypseg/checkpoint.hpp"
#include "polypseg/cli.hpp"
#include "polypseg/runtime.hpp"
#include "synthetic.hpp"

using namespace polypseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

using Clock = std::chrono::steady_clock;

int failures = 0;

void criterion(const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail = std::string("exception: ") + e.what();
  }
  const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("[%s] %-28s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds);
  std::fflush(stdout);
}

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  Outcome o;
  Rng rng(20240601);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Mask a = testing::random_mask(rng, 16, 16), b = testing::random_mask(rng, 16, 16);
    const auto got = compute_metrics(confusion(a, b)).values();
    const auto want = testing::oracle_metrics(a, b);
    for (std::size_t k = 0; k < 6; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
  }
  o.require(worst <= 1e-9, "max deviation " + fmt("%.3g", worst));
  Mask pred(2, 2), gt(2, 2);
  pred << 1, 1, 0, 0;
  gt << 1, 0, 0, 0;
  const auto row = build_report({{"example", confusion(pred, gt)}}, Aggregation::PerImageMean).aggregate_row();
  o.require(row == "0.5000 0.6667 1.0000 0.5000 0.7500 0.8333", "2x2 example gave " + row);
  const double t = elapsed(t0);
  o.require(t < 10.0, "runtime " + fmt("%.1f s", t));
  if (o.pass) o.detail = "1000 cases, max dev " + fmt("%.1e", worst) + "; 2x2 row " + row;
  return o;
}

Outcome metric_identities() {
  Outcome o;
  Rng rng(20240602);
  double worst_dice = 0, worst_f2 = 0;
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto c = confusion(testing::random_mask(rng, 16, 16), testing::random_mask(rng, 16, 16));
    const auto m = compute_metrics(c);
    if (c.tp + c.fp + c.fn > 0) worst_dice = std::max(worst_dice, std::abs(m.dsc - 2 * m.jaccard / (1 + m.jaccard)));
    if (c.tp > 0) {
      worst_f2 = std::max(worst_f2, std::abs(m.f2 - 5 * m.precision * m.recall / (4 * m.precision + m.recall)));
      ++checked;
    }
  }
  o.require(worst_dice <= 1e-12, "dsc identity off by " + fmt("%.3g", worst_dice));
  o.require(worst_f2 <= 1e-12, "f2 identity off by " + fmt("%.3g", worst_f2));
  if (o.pass) o.detail = "dsc dev " + fmt("%.1e", worst_dice) + ", f2 dev " + fmt("%.1e", worst_f2);
  return o;
}

Outcome shape_suite() {
  const auto t0 = Clock::now();
  Outcome o;
  const std::array<Index, 4> sizes{32, 64, 96, 256};
  const std::array<Index, 5> channels{64, 256, 512, 1024, 2048};
  int configs = 0;
  for (Index h : sizes)
    for (Index w : sizes) {
      ArchConfig a;
      a.input_height = h;
      a.input_width = w;
      SegmentationModel<float> m(a);
      Tensor<float> x(2, 3, h, w);
      Rng rng(static_cast<std::uint64_t>(h * 1000 + w));
      for (Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
      const auto taps = m.encode(x);
      // skips are stored deepest first; walk them from stride 2 upward
      std::array<Shape, 5> got{taps.skips[3].shape(), taps.skips[2].shape(), taps.skips[1].shape(),
                               taps.skips[0].shape(), taps.bottleneck.shape()};
      for (std::size_t k = 0; k < 5; ++k) {
        const Index stride = Index{2} << k;
        o.require(got[k] == Shape{2, channels[k], h / stride, w / stride},
                  "tap " + std::to_string(k) + " at " + std::to_string(h) + "x" + std::to_string(w) + " is " +
                      to_string(got[k]));
      }
      const auto out = m.forward(x);
      o.require(out.logits.shape() == Shape{2, 1, h, w}, "output " + to_string(out.logits.shape()));
      ++configs;
    }
  const double t = elapsed(t0);
  o.require(t < 120.0, "runtime " + fmt("%.1f s", t));
  if (o.pass) o.detail = std::to_string(configs) + " HxW combinations, B=2";
  return o;
}

Outcome schedule_suite() {
  Outcome o;
  const TrainConfig cfg;
  auto rel = [](double a, double b) { return std::abs(a - b) / std::abs(b); };
  for (Index total : {100, 1000, 12345}) {
    const Index boundary = warmup_boundary(total, cfg.pct_warmup);
    o.require(rel(one_cycle_schedule(0, total, cfg).lr, 4e-4) <= 1e-12, "lr(0)");
    o.require(rel(one_cycle_schedule(boundary, total, cfg).lr, 1e-2) <= 1e-12, "lr(boundary)");
    o.require(rel(one_cycle_schedule(total, total, cfg).lr, 1e-6) <= 1e-12, "lr(end)");
  }
  const Index total = 10000, boundary = warmup_boundary(total, cfg.pct_warmup);
  double prev = 0, worst_mirror = 0;
  for (Index s = 0; s <= total; ++s) {
    const auto p = one_cycle_schedule(s, total, cfg);
    if (s > 0) o.require(s <= boundary ? p.lr >= prev : p.lr <= prev, "not unimodal at step " + std::to_string(s));
    prev = p.lr;
    const double floor_lr = s <= boundary ? cfg.peak_lr / cfg.div_start : cfg.peak_lr / cfg.div_final;
    const double u = (cfg.peak_lr - p.lr) / (cfg.peak_lr - floor_lr);
    const double v = (p.momentum - cfg.momentum_low) / (cfg.momentum_high - cfg.momentum_low);
    worst_mirror = std::max(worst_mirror, std::abs(u - v));
  }
  o.require(worst_mirror <= 1e-9, "momentum mirror off by " + fmt("%.3g", worst_mirror));
  if (o.pass) o.detail = "endpoints to 1e-12; 10001-point grid unimodal; momentum mirror dev " + fmt("%.1e", worst_mirror);
  return o;
}

Outcome loss_checks() {
  Outcome o;
  Rng rng(5);
  Tensor<double> zeros(4, 1, 16, 16), logits(4, 1, 16, 16), targets(4, 1, 16, 16);
  for (Index i = 0; i < targets.size(); ++i) {
    targets.data()[i] = rng.bernoulli(0.4) ? 1 : 0;
    logits.data()[i] = 5 * rng.normal();
  }
  const double ln2_dev = std::abs(bce_with_logits(zeros, targets) - std::numbers::ln2);
  o.require(ln2_dev <= 1e-9, "zero logits off ln2 by " + fmt("%.3g", ln2_dev));
  Tensor<double> neg = logits, flip = targets;
  neg.array() = -logits.array();
  flip.array() = 1 - targets.array();
  const double sym_dev = std::abs(bce_with_logits(logits, targets) - bce_with_logits(neg, flip));
  o.require(sym_dev <= 1e-9, "symmetry off by " + fmt("%.3g", sym_dev));

  ArchConfig a;
  a.input_height = a.input_width = 64;
  a.init_seed = 3;
  SegmentationModel<float> m(a);
  const auto pairs = testing::synthetic_dataset(3, 2, 64, 64);
  const Batch batch = make_batches(pairs, 2, false, 0).at(0);
  std::vector<std::vector<float>> before;
  for (auto& [name, p] : m.parameters())
    if (p->trainable) before.emplace_back(p->value.data(), p->value.data() + p->size());
  Adam adam(m.parameters());
  train_step(m, batch, adam, {0.0, 0.95}, 0);
  std::size_t i = 0;
  bool fixpoint = true;
  for (auto& [name, p] : m.parameters())
    if (p->trainable) fixpoint &= std::vector<float>(p->value.data(), p->value.data() + p->size()) == before[i++];
  o.require(fixpoint, "zero-lr step moved a trainable parameter");
  if (o.pass) {
    o.detail = "ln2 dev " + fmt("%.1e", ln2_dev) + ", symmetry dev " + fmt("%.1e", sym_dev) +
               ", zero-lr step bit-exact on " + std::to_string(before.size()) + " tensors";
  }
  return o;
}

Outcome augmentation_consistency() {
  Outcome o;
  const SamplePair in = testing::synthetic_polyp(12, 72, 96, "a");
  auto commutation = [&](const AugmentationParams& p) {
    SamplePair carrier = in;
    for (auto& plane : carrier.image.planes) plane = (in.mask.cast<int>() * 255).cast<std::uint8_t>();
    const SamplePair out = apply_augmentation(carrier, p, 64, 64);
    const Mask from_image = (out.image.planes[0] >= 128).cast<std::uint8_t>();
    return static_cast<double>((from_image == out.mask).count()) / static_cast<double>(out.mask.size());
  };
  double worst = 1.0;
  AugmentationParams flip, rot, zoom, warp;
  flip.flip = true;
  rot.angle_degrees = 23;
  zoom.zoom = 1.1;
  warp.corner_shift = {Eigen::Vector2d(0.08, -0.05), Eigen::Vector2d(-0.1, 0.02), Eigen::Vector2d(0.03, 0.1),
                       Eigen::Vector2d(-0.04, -0.07)};
  for (const auto* p : {&flip, &rot, &zoom, &warp}) worst = std::min(worst, commutation(*p));
  o.require(worst >= 0.98, "image/mask agreement " + fmt("%.4f", worst));

  // exact oracles for flip and quarter turn
  const SamplePair sq = testing::synthetic_polyp(13, 33, 33, "s");
  AugmentationParams quarter;
  quarter.angle_degrees = 90;
  const SamplePair f = apply_augmentation(sq, flip, 33, 33), q = apply_augmentation(sq, quarter, 33, 33);
  bool exact = (f.mask == sq.mask.rowwise().reverse()).all();
  for (Index r = 0; r < 33; ++r)
    for (Index c = 0; c < 33; ++c) exact &= q.mask(r, c) == sq.mask(32 - c, r);
  o.require(exact, "flip/quarter-turn oracle mismatch");

  AugmentationParams light;
  light.brightness = -0.2;
  light.contrast = 1.2;
  o.require((apply_augmentation(in, light, 64, 64).mask == resize_pair(in, 64, 64).mask).all(),
            "photometric transform changed a mask");

  AugmentationConfig cfg;
  cfg.target_height = cfg.target_width = 64;
  bool binary = true;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    binary &= (augment(in, cfg, rng).mask <= 1).all();
  }
  o.require(binary, "non-binary augmented mask");
  if (o.pass) o.detail = "min image/mask agreement " + fmt("%.4f", worst) + "; 200 random draws binary";
  return o;
}

Outcome convergence() {
  const auto t0 = Clock::now();
  Outcome o;
  const auto pairs = testing::synthetic_dataset(7, 4, 128, 128);
  ArchConfig a;
  a.input_height = a.input_width = 128;
  auto model = build_model(a);
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.epochs = 100;  // one step per epoch
  cfg.augment = false;
  const FitResult r = fit(*model, pairs, {}, cfg);
  const auto eval = evaluate_pairs(*model, pairs, 0.5, Aggregation::PerImageMean);
  const double dice = eval.report.aggregate.dsc;
  const double t = elapsed(t0);
  o.require(r.total_steps <= 300, "too many steps");
  o.require(dice >= 0.95, "training dice " + fmt("%.4f", dice));
  o.require(t <= 600.0, "runtime " + fmt("%.0f s", t));
  o.detail = std::to_string(r.total_steps) + " steps, training dice " + fmt("%.4f", dice) + ", final loss " +
             fmt("%.4g", r.history.steps.back().loss);
  return o;
}

Outcome determinism() {
  Outcome o;
  const fs::path root = testing::scratch_dir("acceptance-determinism");
  testing::write_dataset(root / "data", testing::synthetic_dataset(21, 8, 48, 56));
  RunConfig cfg;
  cfg.data_root = (root / "data").string();
  cfg.output_dir = (root / "runs").string();
  cfg.arch.input_height = cfg.arch.input_width = 32;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 4;
  cfg.seed = 11;
  cfg.resolve();
  std::ostringstream sink;
  const fs::path a = cmd_train(cfg, sink), b = cmd_train(cfg, sink);
  o.require(a != b, "second run reused the first run directory");
  o.require(slurp(a / "history.jsonl") == slurp(b / "history.jsonl"), "history logs differ");
  o.require(!slurp(a / "history.jsonl").empty(), "empty history");
  for (const auto& run : {a, b}) {
    PredictOptions p;
    p.checkpoint = run / "last.ckpt";
    p.input_dir = root / "data" / "images";
    p.output_dir = run / "masks";
    cmd_predict(p, sink);
  }
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(a / "masks")) {
    o.require(slurp(e.path()) == slurp(b / "masks" / e.path().filename()), "mask differs: " + e.path().string());
    ++compared;
  }
  o.require(compared == 8, "expected 8 masks");
  if (o.pass) o.detail = "history and " + std::to_string(compared) + " masks byte-identical";
  return o;
}

}  // namespace

int main() {
  tune_allocator();
  criterion("metric-oracle", metric_oracle);
  criterion("metric-identities", metric_identities);
  criterion("shape-wiring", shape_suite);
  criterion("schedule", schedule_suite);
  criterion("loss", loss_checks);
  criterion("augmentation-consistency", augmentation_consistency);
  criterion("convergence-smoke", convergence);
  criterion("determinism", determinism);
  std::printf("[SKIP] %-28s full Kvasir-SEG training with pretrained encoder; GPU-scale, excluded from CI\n",
              "full-scale-kvasir");
  std::printf("%d gated criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
