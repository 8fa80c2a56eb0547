#include <cmath>
#include <fstream>

#include "doctest.h"
#include "metric_oracle.hpp"
#include "polypseg/errors.hpp"
#include "polypseg/metrics.hpp"
#include "synthetic.hpp"

using namespace polypseg;
namespace fs = std::filesystem;

namespace {

Mask mask2x2(int a, int b, int c, int d) {
  Mask m(2, 2);
  m << a, b, c, d;
  return m;
}

}  // namespace

TEST_CASE("worked 2x2 example") {
  const auto c = confusion(mask2x2(1, 1, 0, 0), mask2x2(1, 0, 0, 0));
  CHECK(c == ConfusionCounts{1, 1, 0, 2});
  const auto m = compute_metrics(c);
  CHECK(m.jaccard == 0.5);
  CHECK(m.dsc == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.recall == 1.0);
  CHECK(m.precision == 0.5);
  CHECK(m.accuracy == 0.75);
  CHECK(m.f2 == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("random masks agree with the per-pixel oracle") {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const Mask a = testing::random_mask(rng, 16, 16);
    const Mask b = testing::random_mask(rng, 16, 16);
    const auto got = compute_metrics(confusion(a, b)).values();
    const auto want = testing::oracle_metrics(a, b);
    for (std::size_t k = 0; k < 6; ++k) CHECK(std::abs(got[k] - want[k]) <= 1e-9);
  }
}

TEST_CASE("algebraic identities and symmetry") {
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    const Mask a = testing::random_mask(rng, 12, 9);
    const Mask b = testing::random_mask(rng, 12, 9);
    const auto c = confusion(a, b);
    const auto m = compute_metrics(c);
    if (c.tp + c.fp + c.fn > 0) CHECK(std::abs(m.dsc - 2 * m.jaccard / (1 + m.jaccard)) <= 1e-12);
    if (c.tp > 0) CHECK(std::abs(m.f2 - 5 * m.precision * m.recall / (4 * m.precision + m.recall)) <= 1e-12);

    const auto swapped = compute_metrics(confusion(b, a));
    CHECK(swapped.dsc == m.dsc);
    CHECK(swapped.jaccard == m.jaccard);
    CHECK(swapped.accuracy == m.accuracy);
    CHECK(swapped.precision == m.recall);
    CHECK(swapped.recall == m.precision);
    for (double v : m.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("turning a false negative into a true positive never lowers overlap") {
  Rng rng(8);
  for (int i = 0; i < 300; ++i) {
    Mask pred = testing::random_mask(rng, 10, 10);
    const Mask gt = testing::random_mask(rng, 10, 10);
    const auto before = compute_metrics(confusion(pred, gt));
    for (Index k = 0; k < pred.size(); ++k) {
      if (pred(k) == 0 && gt(k) == 1) {
        pred(k) = 1;
        break;
      }
    }
    const auto after = compute_metrics(confusion(pred, gt));
    CHECK(after.dsc >= before.dsc);
    CHECK(after.jaccard >= before.jaccard);
    CHECK(after.recall >= before.recall);
    CHECK(after.f2 >= before.f2);
  }
}

TEST_CASE("empty-mask conventions and smoothing") {
  const Mask zero = Mask::Zero(4, 4);
  const auto both = compute_metrics(confusion(zero, zero));
  for (double v : both.values()) CHECK(v == 1.0);
  MetricOptions opt;
  opt.empty_score = 0.0;
  const auto both0 = compute_metrics(confusion(zero, zero), opt);
  CHECK(both0.dsc == 0.0);
  CHECK(both0.accuracy == 1.0);

  Mask one = zero;
  one(1, 1) = 1;
  const auto missed = compute_metrics(confusion(zero, one));
  CHECK(missed.dsc == 0.0);
  CHECK(missed.precision == 0.0);
  CHECK(missed.recall == 0.0);
  CHECK(missed.f2 == 0.0);
  const auto spurious = compute_metrics(confusion(one, zero));
  CHECK(spurious.precision == 0.0);
  CHECK(spurious.recall == 0.0);

  MetricOptions smooth;
  smooth.smoothing = 1e-6;
  const auto s = compute_metrics(ConfusionCounts{0, 0, 0, 16}, smooth);
  CHECK(s.dsc == doctest::Approx(1.0));
}

TEST_CASE("confusion rejects mismatched or non-binary masks") {
  CHECK_THROWS_AS(confusion(Mask::Zero(2, 2), Mask::Zero(2, 3)), ShapeError);
  CHECK_THROWS_AS(confusion(mask2x2(0, 2, 0, 0), Mask::Zero(2, 2)), DataError);
}

TEST_CASE("aggregation modes") {
  std::vector<std::pair<std::string, ConfusionCounts>> counts{{"b", {1, 1, 0, 2}}, {"a", {3, 0, 1, 0}}};
  const auto mean = build_report(counts, Aggregation::PerImageMean);
  CHECK(mean.per_image[0].id == "a");
  const auto ma = compute_metrics({3, 0, 1, 0}), mb = compute_metrics({1, 1, 0, 2});
  CHECK(mean.aggregate.dsc == doctest::Approx((ma.dsc + mb.dsc) / 2));
  const auto global = build_report(counts, Aggregation::GlobalCounts);
  CHECK(global.totals == ConfusionCounts{4, 1, 1, 2});
  CHECK(global.aggregate.dsc == doctest::Approx(8.0 / 10.0));
  std::swap(counts[0], counts[1]);
  CHECK(build_report(counts, Aggregation::PerImageMean).aggregate.dsc == mean.aggregate.dsc);
  CHECK(parse_aggregation("global-counts") == Aggregation::GlobalCounts);
  CHECK_THROWS_AS(parse_aggregation("median"), ConfigError);
  CHECK_THROWS_AS(build_report({}, Aggregation::PerImageMean), DataError);
}

TEST_CASE("report table and files") {
  const auto report = build_report({{"case1", {1, 1, 0, 2}}}, Aggregation::PerImageMean);
  CHECK(report.aggregate_row() == "0.5000 0.6667 1.0000 0.5000 0.7500 0.8333");
  const std::string table = report.table();
  const auto header = table.substr(0, table.find('\n'));
  std::size_t pos = 0;
  for (auto col : {"Jaccard", "DSC", "Recall", "Prec.", "Acc.", "F2"}) {
    const auto at = header.find(col, pos);
    CHECK(at != std::string::npos);
    pos = at;
  }
  const fs::path dir = testing::scratch_dir("report");
  write_report(report, dir / "metrics");
  std::ifstream in(dir / "metrics.json");
  const auto j = nlohmann::json::parse(in);
  CHECK(j.at("images").size() == 1);
  CHECK(j.at("aggregate").at("dsc").get<double>() == doctest::Approx(2.0 / 3.0));
  CHECK(fs::exists(dir / "metrics.txt"));
}

TEST_CASE("mask directories: threshold, ids and sizes") {
  const fs::path root = testing::scratch_dir("maskdirs");
  fs::create_directories(root / "pred");
  fs::create_directories(root / "gt");
  write_mask(root / "gt" / "x.png", mask2x2(1, 0, 0, 0));
  RgbImage soft;
  for (auto& p : soft.planes) {
    p = Plane8(2, 2);
    p << 200, 140, 100, 0;
  }
  write_rgb(root / "pred" / "x.png", soft);
  // 140 > 0.5 * 255 but 100 is not
  const auto r = evaluate_mask_dirs(root / "pred", root / "gt", 0.5, Aggregation::PerImageMean);
  CHECK(r.aggregate_row() == "0.5000 0.6667 1.0000 0.5000 0.7500 0.8333");
  CHECK(evaluate_mask_dirs(root / "pred", root / "gt", 0.6, Aggregation::PerImageMean).aggregate.dsc == 1.0);

  write_mask(root / "gt" / "y.png", mask2x2(1, 0, 0, 0));
  write_mask(root / "gt" / "z.png", mask2x2(1, 0, 0, 0));
  try {
    evaluate_mask_dirs(root / "pred", root / "gt", 0.5, Aggregation::PerImageMean);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("y") != std::string::npos);
    CHECK(msg.find("z") != std::string::npos);
  }
  fs::remove(root / "gt" / "y.png");
  fs::remove(root / "gt" / "z.png");
  write_mask(root / "pred" / "x.png", Mask::Zero(3, 3));
  CHECK_THROWS_AS(evaluate_mask_dirs(root / "pred", root / "gt", 0.5, Aggregation::PerImageMean), DataError);
}
