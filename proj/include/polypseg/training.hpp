#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "polypseg/data.hpp"
#include "polypseg/metrics.hpp"
#include "polypseg/model.hpp"

namespace polypseg {

/// How `peak_lr` is read: as the top of the cycle (default) or as the
/// starting rate, in which case the peak becomes peak_lr * div_start.
enum class LrAnchor { Peak, Initial };

struct TrainConfig {
  double peak_lr = 1e-2;
  Index epochs = 50;
  Index batch_size = 8;
  double pct_warmup = 0.25;
  double div_start = 25.0;
  double div_final = 1e4;
  double momentum_high = 0.95;
  double momentum_low = 0.85;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  LrAnchor lr_anchor = LrAnchor::Peak;
  bool augment = true;
  double threshold = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
  /// Peak of the cycle after applying `lr_anchor`.
  double cycle_peak() const { return lr_anchor == LrAnchor::Peak ? peak_lr : peak_lr * div_start; }
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);

struct SchedulePoint {
  double lr = 0.0;
  double momentum = 0.0;
};

/// Step at which the learning rate peaks: round(pct_warmup * total_steps),
/// kept inside [1, total_steps - 1].
Index warmup_boundary(Index total_steps, double pct_warmup);

/// One-cycle policy with cosine phases. The rate rises from peak/div_start to
/// the peak at the warmup boundary, then falls to peak/div_final at
/// `total_steps`; momentum mirrors it between `momentum_high` and `momentum_low`.
SchedulePoint one_cycle_schedule(Index step, Index total_steps, const TrainConfig& config);

template <typename Scalar>
struct LossResult {
  double loss = 0.0;
  Tensor<Scalar> grad;  // d(loss)/d(logits)
};

/// Mean binary cross-entropy from logits, max(x,0) - x*y + log1p(exp(-|x|)).
template <typename Scalar>
double bce_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets);

/// Same value plus its gradient (sigmoid(x) - y) / count.
template <typename Scalar>
LossResult<Scalar> bce_with_logits_grad(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets);

/// Adam whose beta1 is supplied per step (the one-cycle momentum). Weight
/// decay, when nonzero, is decoupled from the gradient.
class Adam {
 public:
  Adam(ParameterList<float> params, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.0);

  void step(double lr, double beta1);
  std::uint64_t steps() const { return t_; }

 private:
  ParameterList<float> params_;
  std::vector<Vector<float>> m_, v_;
  double beta2_, eps_, weight_decay_;
  std::uint64_t t_ = 0;
};

struct StepOutcome {
  double loss = 0.0;
};

/// Forward, loss, backward and one Adam update. Requires exclusive access to
/// the model. Non-finite loss or gradients raise NumericalError carrying the
/// step, learning rate and batch ids; the parameters are left untouched.
StepOutcome train_step(SegmentationModel<float>& model, const Batch& batch, Adam& optimizer, const SchedulePoint& point,
                       std::uint64_t step = 0);

struct StepRecord {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double lr = 0.0;
  double momentum = 0.0;
  double loss = 0.0;
};

struct EpochRecord {
  std::uint64_t epoch = 0;
  double validation_loss = 0.0;
  MetricValues validation;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// One JSON object per line, `"type": "step"` or `"type": "epoch"`.
std::string history_line(const StepRecord& r);
std::string history_line(const EpochRecord& r);
TrainHistory read_history(const std::filesystem::path& path);

struct FitOptions {
  /// Directory receiving history.jsonl, last.ckpt and best.ckpt; empty to skip persistence.
  std::filesystem::path run_dir;
  AugmentationConfig augmentation;
  /// Stored in checkpoint metadata.
  nlohmann::json checkpoint_extra = nlohmann::json::object();
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
  TrainHistory history;
  double best_validation_dice = -1.0;
  std::uint64_t best_epoch = 0;
  std::uint64_t total_steps = 0;
};

/// Runs epochs x ceil(|train| / batch_size) one-cycle steps. Validation loss
/// and the six metrics are computed after every epoch; the last and the best
/// (by validation Dice) checkpoints are rewritten atomically.
FitResult fit(SegmentationModel<float>& model, std::span<const SamplePair> train, std::span<const SamplePair> validation,
              const TrainConfig& config, const FitOptions& options = {});

struct Evaluation {
  MetricsReport report;
  double loss = 0.0;
};

/// Inference-mode scoring of pairs already at the model resolution or
/// resized to it. Per-image metrics at `threshold`.
Evaluation evaluate_pairs(SegmentationModel<float>& model, std::span<const SamplePair> pairs, double threshold,
                          Aggregation mode, Index batch_size = 4);

/// Scores `dataset` with the model (resize to model resolution, predict,
/// resize the mask back, compare at the original resolution).
MetricsReport evaluate_dataset(SegmentationModel<float>& model, std::span<const SamplePair> dataset, double threshold,
                               Aggregation mode);

/// Binary mask for one image at its original resolution: resized to the model
/// input, predicted, thresholded, and resized back by nearest neighbour.
Mask predict_mask(SegmentationModel<float>& model, const RgbImage& image, double threshold);

extern template double bce_with_logits(const Tensor<float>&, const Tensor<float>&);
extern template double bce_with_logits(const Tensor<double>&, const Tensor<double>&);
extern template LossResult<float> bce_with_logits_grad(const Tensor<float>&, const Tensor<float>&);
extern template LossResult<double> bce_with_logits_grad(const Tensor<double>&, const Tensor<double>&);

}  // namespace polypseg
