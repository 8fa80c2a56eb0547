#include "polypseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "polypseg/checkpoint.hpp"
#include "polypseg/errors.hpp"

namespace polypseg {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (!(pct_warmup > 0.0 && pct_warmup < 1.0)) throw ConfigError("pct_warmup must lie strictly between 0 and 1");
  if (!(div_start > 1.0) || !(div_final > 1.0)) throw ConfigError("div_start and div_final must exceed 1");
  if (!(momentum_low > 0.0 && momentum_low <= momentum_high && momentum_high < 1.0)) {
    throw ConfigError("momentum range must satisfy 0 < low <= high < 1");
  }
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"peak_lr", c.peak_lr},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"pct_warmup", c.pct_warmup},
                     {"div_start", c.div_start},
                     {"div_final", c.div_final},
                     {"momentum_high", c.momentum_high},
                     {"momentum_low", c.momentum_low},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"weight_decay", c.weight_decay},
                     {"lr_anchor", c.lr_anchor == LrAnchor::Peak ? "peak" : "initial"},
                     {"augment", c.augment},
                     {"threshold", c.threshold},
                     {"seed", c.seed}};
}

// -------------------------------------------------------------- schedule

Index warmup_boundary(Index total_steps, double pct_warmup) {
  const auto b = static_cast<Index>(std::llround(pct_warmup * static_cast<double>(total_steps)));
  return std::clamp<Index>(b, 1, total_steps - 1);
}

namespace {

// start at t = 0, end at t = 1, exactly
double cosine_between(double start, double end, double t) {
  const double c = std::cos(std::numbers::pi * t);
  return start * (1.0 + c) / 2.0 + end * (1.0 - c) / 2.0;
}

}  // namespace

SchedulePoint one_cycle_schedule(Index step, Index total_steps, const TrainConfig& config) {
  if (total_steps < 2) throw ConfigError("one-cycle schedule needs at least 2 steps, got " + std::to_string(total_steps));
  if (step < 0 || step > total_steps) {
    throw ConfigError("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  const double peak = config.cycle_peak();
  const Index boundary = warmup_boundary(total_steps, config.pct_warmup);
  SchedulePoint p;
  if (step <= boundary) {
    const double t = static_cast<double>(step) / static_cast<double>(boundary);
    p.lr = cosine_between(peak / config.div_start, peak, t);
    p.momentum = cosine_between(config.momentum_high, config.momentum_low, t);
  } else {
    const double t = static_cast<double>(step - boundary) / static_cast<double>(total_steps - boundary);
    p.lr = cosine_between(peak, peak / config.div_final, t);
    p.momentum = cosine_between(config.momentum_low, config.momentum_high, t);
  }
  return p;
}

// ------------------------------------------------------------------ loss

namespace {

template <typename Scalar>
void check_loss_inputs(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets) {
  require_shape(targets.shape(), logits.shape(), "loss targets");
  if (logits.size() == 0) throw ShapeError("loss of an empty tensor");
  if (!((targets.array() == Scalar(0)) || (targets.array() == Scalar(1))).all()) {
    throw DataError("loss targets must be {0,1}-valued");
  }
}

template <typename Scalar>
double pixel_bce(Scalar x, Scalar y) {
  const double xd = static_cast<double>(x);
  return std::max(xd, 0.0) - xd * static_cast<double>(y) + std::log1p(std::exp(-std::abs(xd)));
}

}  // namespace

template <typename Scalar>
double bce_with_logits(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets) {
  check_loss_inputs(logits, targets);
  double sum = 0.0;
  for (Index i = 0; i < logits.size(); ++i) sum += pixel_bce(logits.data()[i], targets.data()[i]);
  const double loss = sum / static_cast<double>(logits.size());
  if (!std::isfinite(loss)) throw NumericalError("non-finite loss");
  return loss;
}

template <typename Scalar>
LossResult<Scalar> bce_with_logits_grad(const Tensor<Scalar>& logits, const Tensor<Scalar>& targets) {
  LossResult<Scalar> r;
  r.loss = bce_with_logits(logits, targets);
  const double inv_count = 1.0 / static_cast<double>(logits.size());
  r.grad = Tensor<Scalar>(logits.shape());
  for (Index i = 0; i < logits.size(); ++i) {
    const double x = static_cast<double>(logits.data()[i]);
    // sigmoid evaluated on the stable side
    const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    r.grad.data()[i] = static_cast<Scalar>((s - static_cast<double>(targets.data()[i])) * inv_count);
  }
  return r;
}

template double bce_with_logits(const Tensor<float>&, const Tensor<float>&);
template double bce_with_logits(const Tensor<double>&, const Tensor<double>&);
template LossResult<float> bce_with_logits_grad(const Tensor<float>&, const Tensor<float>&);
template LossResult<double> bce_with_logits_grad(const Tensor<double>&, const Tensor<double>&);

// ------------------------------------------------------------------ Adam

Adam::Adam(ParameterList<float> params, double beta2, double eps, double weight_decay)
    : beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (auto& p : params) {
    if (!p.param->trainable) continue;
    params_.push_back(p);
    m_.push_back(Vector<float>::Zero(p.param->size()));
    v_.push_back(Vector<float>::Zero(p.param->size()));
  }
}

void Adam::step(double lr, double beta1) {
  ++t_;
  const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto b1 = static_cast<float>(beta1);
  const auto b2 = static_cast<float>(beta2_);
  const auto step_size = static_cast<float>(lr / bias1);
  const auto inv_sqrt_bias2 = static_cast<float>(1.0 / std::sqrt(bias2));
  const auto eps = static_cast<float>(eps_);
  const auto decay = static_cast<float>(1.0 - lr * weight_decay_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<float>& p = *params_[i].param;
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseAbs2();
    if (weight_decay_ != 0.0) p.value *= decay;
    p.value.array() -= step_size * m_[i].array() / (v_[i].array().sqrt() * inv_sqrt_bias2 + eps);
  }
}

// ------------------------------------------------------------ train_step

namespace {

std::string describe_batch(const Batch& batch) {
  std::string ids;
  for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ", ") + id;
  return ids;
}

}  // namespace

StepOutcome train_step(SegmentationModel<float>& model, const Batch& batch, Adam& optimizer, const SchedulePoint& point,
                       std::uint64_t step) {
  // running statistics move during the forward pass; put them back if the step is abandoned
  std::vector<std::pair<Parameter<float>*, Vector<float>>> buffers;
  for (const auto& [name, param] : model.parameters()) {
    if (!param->trainable) buffers.emplace_back(param, param->value);
  }
  auto fail = [&](const std::string& what) {
    model.release();
    for (auto& [param, saved] : buffers) param->value = std::move(saved);
    std::ostringstream msg;
    msg << what << " at step " << step << " (lr=" << point.lr << ", batch: " << describe_batch(batch) << ")";
    throw NumericalError(msg.str());
  };

  model.zero_grad();
  ForwardResult<float> out;
  try {
    out = model.forward(batch.images, Mode::Train);
  } catch (const NumericalError& e) {
    fail(e.what());
  }
  LossResult<float> loss;
  try {
    loss = bce_with_logits_grad(out.logits, batch.masks);
  } catch (const NumericalError&) {
    fail("non-finite loss");
  }
  model.backward(loss.grad);
  for (const auto& [name, param] : model.parameters()) {
    if (param->trainable && !param->grad.allFinite()) fail("non-finite gradient in " + name);
  }
  optimizer.step(point.lr, point.momentum);
  return {loss.loss};
}

// --------------------------------------------------------------- history

std::string history_line(const StepRecord& r) {
  return nlohmann::json{{"type", "step"}, {"step", r.step}, {"epoch", r.epoch},
                        {"lr", r.lr},     {"momentum", r.momentum}, {"loss", r.loss}}
      .dump();
}

std::string history_line(const EpochRecord& r) {
  const MetricValues& v = r.validation;
  return nlohmann::json{{"type", "epoch"},         {"epoch", r.epoch},   {"val_loss", r.validation_loss},
                        {"jaccard", v.jaccard},    {"dsc", v.dsc},       {"recall", v.recall},
                        {"precision", v.precision}, {"accuracy", v.accuracy}, {"f2", v.f2}}
      .dump();
}

TrainHistory read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read history log: " + path.string());
  TrainHistory h;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "step") {
        h.steps.push_back({j.at("step").get<std::uint64_t>(), j.at("epoch").get<std::uint64_t>(), j.at("lr").get<double>(),
                           j.at("momentum").get<double>(), j.at("loss").get<double>()});
      } else if (type == "epoch") {
        EpochRecord e;
        e.epoch = j.at("epoch").get<std::uint64_t>();
        e.validation_loss = j.at("val_loss").get<double>();
        e.validation = {j.at("jaccard").get<double>(),   j.at("dsc").get<double>(),
                        j.at("recall").get<double>(),    j.at("precision").get<double>(),
                        j.at("accuracy").get<double>(),  j.at("f2").get<double>()};
        h.epochs.push_back(e);
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed history line " + std::to_string(line_no) + " in " + path.string() + ": " + e.what());
    }
  }
  return h;
}

// ------------------------------------------------------------ evaluation

Evaluation evaluate_pairs(SegmentationModel<float>& model, std::span<const SamplePair> pairs, double threshold,
                          Aggregation mode, Index batch_size) {
  const Index h = model.config().input_height;
  const Index w = model.config().input_width;
  auto prepare = [h, w](const SamplePair& p, std::size_t) {
    return (p.image.rows() == h && p.image.cols() == w) ? p : resize_pair(p, h, w);
  };
  BatchStream stream(pairs, batch_size, false, 0, 0, prepare);
  std::vector<std::pair<std::string, ConfusionCounts>> counts;
  double loss_sum = 0.0;
  Index pixel_count = 0;
  while (auto batch = stream.next()) {
    const ForwardResult<float> out = model.forward(batch->images, Mode::Inference);
    loss_sum += bce_with_logits(out.logits, batch->masks) * static_cast<double>(out.logits.size());
    pixel_count += out.logits.size();
    const Tensor<float> pred = binarize(out.probabilities, threshold);
    for (Index n = 0; n < pred.n(); ++n) {
      const Mask p = Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                         pred.plane_ptr(n, 0), h, w).cast<std::uint8_t>();
      const Mask g = Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                         batch->masks.plane_ptr(n, 0), h, w).cast<std::uint8_t>();
      counts.emplace_back(batch->ids[n], confusion(p, g));
    }
  }
  Evaluation e;
  e.report = build_report(std::move(counts), mode);
  e.loss = loss_sum / static_cast<double>(pixel_count);
  return e;
}

Mask predict_mask(SegmentationModel<float>& model, const RgbImage& image, double threshold) {
  const Index h = model.config().input_height;
  const Index w = model.config().input_width;
  const RgbImage resized = (image.rows() == h && image.cols() == w) ? image : resize_bilinear(image, h, w);
  const ForwardResult<float> out = model.forward(normalize(resized), Mode::Inference);
  const Tensor<float> pred = binarize(out.probabilities, threshold);
  const Mask small = Eigen::Map<const Eigen::Array<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                         pred.plane_ptr(0, 0), h, w).cast<std::uint8_t>();
  if (image.rows() == h && image.cols() == w) return small;
  return resize_nearest(small, image.rows(), image.cols());
}

MetricsReport evaluate_dataset(SegmentationModel<float>& model, std::span<const SamplePair> dataset, double threshold,
                               Aggregation mode) {
  std::vector<std::pair<std::string, ConfusionCounts>> counts;
  for (const auto& pair : dataset) counts.emplace_back(pair.id, confusion(predict_mask(model, pair.image, threshold), pair.mask));
  return build_report(std::move(counts), mode);
}

// ------------------------------------------------------------------- fit

FitResult fit(SegmentationModel<float>& model, std::span<const SamplePair> train, std::span<const SamplePair> validation,
              const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (train.empty()) throw DataError("training set is empty");
  std::set<std::string> train_ids;
  for (const auto& p : train) train_ids.insert(p.id);
  for (const auto& p : validation) {
    if (train_ids.contains(p.id)) throw ConfigError("sample '" + p.id + "' is in both training and validation sets");
  }
  const Index h = model.config().input_height;
  const Index w = model.config().input_width;
  if (config.augment) {
    options.augmentation.validate();
    if (options.augmentation.target_height != h || options.augmentation.target_width != w) {
      throw ConfigError("augmentation target size must equal the model input size");
    }
  }

  const auto n_train = static_cast<Index>(train.size());
  const Index steps_per_epoch = (n_train + config.batch_size - 1) / config.batch_size;
  const Index total_steps = steps_per_epoch * config.epochs;
  if (total_steps < 2) throw ConfigError("training needs at least 2 optimization steps; raise epochs or lower batch_size");

  std::vector<SamplePair> val_resized;
  val_resized.reserve(validation.size());
  for (const auto& p : validation) val_resized.push_back(resize_pair(p, h, w));

  std::ofstream log;
  if (!options.run_dir.empty()) {
    std::filesystem::create_directories(options.run_dir);
    log.open(options.run_dir / "history.jsonl", std::ios::app);
    if (!log) throw DataError("cannot open history log in " + options.run_dir.string());
  }

  Adam optimizer(model.parameters(), config.beta2, config.eps, config.weight_decay);
  FitResult result;
  result.total_steps = static_cast<std::uint64_t>(total_steps);
  std::uint64_t step = 0;

  for (Index epoch = 0; epoch < config.epochs; ++epoch) {
    BatchStream::Prepare prepare;
    if (config.augment) {
      prepare = [&, epoch](const SamplePair& p, std::size_t index) {
        Rng rng = Rng::derive(config.seed, static_cast<std::uint64_t>(epoch) + 1, index);
        return augment(p, options.augmentation, rng);
      };
    } else {
      prepare = [h, w](const SamplePair& p, std::size_t) { return resize_pair(p, h, w); };
    }
    BatchStream stream(train, config.batch_size, true, config.seed, static_cast<std::uint64_t>(epoch), prepare);
    while (auto batch = stream.next()) {
      const SchedulePoint point = one_cycle_schedule(static_cast<Index>(step), total_steps, config);
      const StepOutcome outcome = train_step(model, *batch, optimizer, point, step);
      const StepRecord rec{step, static_cast<std::uint64_t>(epoch), point.lr, point.momentum, outcome.loss};
      result.history.steps.push_back(rec);
      if (log.is_open()) log << history_line(rec) << "\n" << std::flush;
      if (options.on_step) options.on_step(rec);
      ++step;
    }

    nlohmann::json extra = options.checkpoint_extra;
    extra["train_config"] = config;
    extra["state"] = {{"step", step}, {"epoch", epoch + 1}};
    if (!val_resized.empty()) {
      const Evaluation eval = evaluate_pairs(model, val_resized, config.threshold, Aggregation::PerImageMean,
                                             config.batch_size);
      EpochRecord rec{static_cast<std::uint64_t>(epoch), eval.loss, eval.report.aggregate};
      result.history.epochs.push_back(rec);
      if (log.is_open()) log << history_line(rec) << "\n" << std::flush;
      if (options.on_epoch) options.on_epoch(rec);
      extra["state"]["validation_dice"] = rec.validation.dsc;
      const bool improved = rec.validation.dsc > result.best_validation_dice;
      if (improved) {
        result.best_validation_dice = rec.validation.dsc;
        result.best_epoch = static_cast<std::uint64_t>(epoch);
      }
      extra["state"]["best_validation_dice"] = result.best_validation_dice;
      if (improved && !options.run_dir.empty()) save_checkpoint(options.run_dir / "best.ckpt", model, extra);
    }
    if (!options.run_dir.empty()) save_checkpoint(options.run_dir / "last.ckpt", model, extra);
  }
  return result;
}

}  // namespace polypseg
