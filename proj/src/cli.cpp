#include "polypseg/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "polypseg/archive.hpp"
#include "polypseg/checkpoint.hpp"
#include "polypseg/errors.hpp"

namespace polypseg {

namespace fs = std::filesystem;

int run_guarded(const std::function<void()>& body, std::ostream& err) {
  try {
    body();
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "shape error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "filesystem error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

// ----------------------------------------------------------------- train

namespace {

fs::path fresh_run_dir(const fs::path& output) {
  fs::create_directories(output);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream stamp;
  stamp << "run-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  for (int suffix = 0;; ++suffix) {
    const fs::path dir = output / (suffix == 0 ? stamp.str() : stamp.str() + "-" + std::to_string(suffix));
    if (fs::create_directory(dir)) return dir;
  }
}

std::string format_metrics(const MetricValues& v) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "jaccard %.4f dsc %.4f recall %.4f precision %.4f accuracy %.4f f2 %.4f", v.jaccard,
                v.dsc, v.recall, v.precision, v.accuracy, v.f2);
  return buf;
}

}  // namespace

fs::path cmd_train(const RunConfig& input, std::ostream& out) {
  RunConfig config = input;
  config.resolve();
  config.validate();

  auto pairs = load_dataset(config.data_root);
  DatasetSplit split = split_dataset(std::move(pairs), config.train_fraction, config.seed);
  auto model = build_model(config.arch);

  const fs::path run_dir = fresh_run_dir(config.output_dir);
  write_file_atomic(run_dir / "config.cfg", serialize_config(config));
  split.manifest.save(run_dir / "split.json");
  out << "run directory: " << run_dir.string() << "\n"
      << "train " << split.train.size() << " / validation " << split.validation.size() << " samples\n";

  FitOptions options;
  options.run_dir = run_dir;
  options.augmentation = config.augment;
  options.checkpoint_extra = {{"split_manifest", "split.json"}, {"config_snapshot", "config.cfg"}};
  options.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch + 1 << ": val_loss " << std::setprecision(6) << r.validation_loss << " "
        << format_metrics(r.validation) << "\n"
        << std::flush;
  };
  const FitResult result = fit(*model, split.train, split.validation, config.train, options);
  out << "finished " << result.total_steps << " steps; best validation dsc " << std::setprecision(6)
      << result.best_validation_dice << " at epoch " << result.best_epoch + 1 << "\n";
  return run_dir;
}

// --------------------------------------------------------------- predict

void cmd_predict(const PredictOptions& options, std::ostream& out) {
  if (!(options.threshold > 0.0 && options.threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  const ArchConfig* expected = options.expected_arch ? &*options.expected_arch : nullptr;
  LoadedCheckpoint loaded = load_checkpoint(options.checkpoint, expected);
  const auto inputs = list_images(options.input_dir);
  if (inputs.empty()) throw DataError("no images in " + options.input_dir.string());
  fs::create_directories(options.output_dir);
  for (const auto& [id, path] : inputs) {
    const RgbImage image = read_rgb(path);
    const Mask mask = predict_mask(*loaded.model, image, options.threshold);
    write_mask(options.output_dir / (id + ".png"), mask);
  }
  out << "wrote " << inputs.size() << " mask(s) to " << options.output_dir.string() << "\n";
}

// -------------------------------------------------------------- evaluate

MetricsReport cmd_evaluate(const EvaluateOptions& options, std::ostream& out) {
  MetricsReport report;
  fs::path output_dir = options.output_dir;
  if (!options.checkpoint.empty()) {
    if (options.data_root.empty()) throw ConfigError("evaluating a checkpoint needs a dataset root (--data)");
    if (!(options.threshold > 0.0 && options.threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
    LoadedCheckpoint loaded = load_checkpoint(options.checkpoint);
    const auto dataset = load_dataset(options.data_root);
    report = evaluate_dataset(*loaded.model, dataset, options.threshold, options.aggregation);
    if (output_dir.empty()) output_dir = options.checkpoint.parent_path();
  } else {
    if (options.predictions.empty() || options.ground_truth.empty()) {
      throw ConfigError("evaluate needs --predictions and --ground-truth, or --checkpoint and --data");
    }
    report = evaluate_mask_dirs(options.predictions, options.ground_truth, options.threshold, options.aggregation);
    if (output_dir.empty()) output_dir = options.predictions;
  }
  fs::create_directories(output_dir);
  write_report(report, output_dir / "metrics");
  out << report.table() << report.aggregate_row() << "\n";
  return report;
}

// ---------------------------------------------------------------- report

namespace {

struct Series {
  std::vector<double> x, y;
};

std::string svg_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

void write_plot(const fs::path& path, const std::string& title, const std::string& x_label, const std::string& y_label,
                const Series& s) {
  constexpr double width = 640, height = 400, left = 70, right = 20, top = 40, bottom = 50;
  double x_lo = s.x.empty() ? 0.0 : *std::min_element(s.x.begin(), s.x.end());
  double x_hi = s.x.empty() ? 1.0 : *std::max_element(s.x.begin(), s.x.end());
  double y_lo = s.y.empty() ? 0.0 : *std::min_element(s.y.begin(), s.y.end());
  double y_hi = s.y.empty() ? 1.0 : *std::max_element(s.y.begin(), s.y.end());
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  if (y_hi <= y_lo) y_hi = y_lo + std::max(1e-12, std::abs(y_lo));
  auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * (width - left - right); };
  auto py = [&](double y) { return height - bottom - (y - y_lo) / (y_hi - y_lo) * (height - top - bottom); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n"
      << "<line x1=\"" << left << "\" y1=\"" << height - bottom << "\" x2=\"" << width - right << "\" y2=\""
      << height - bottom << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << height - bottom
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"" << height - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
      << x_label << "</text>\n"
      << "<text x=\"16\" y=\"" << height / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
      << height / 2 << ")\">" << y_label << "</text>\n";
  for (const auto& [value, anchor_y] : {std::pair{y_lo, py(y_lo)}, std::pair{y_hi, py(y_hi)}}) {
    svg << "<text x=\"" << left - 6 << "\" y=\"" << anchor_y + 4 << "\" text-anchor=\"end\" font-size=\"10\">"
        << svg_number(value) << "</text>\n";
  }
  for (const auto& [value, anchor_x] : {std::pair{x_lo, px(x_lo)}, std::pair{x_hi, px(x_hi)}}) {
    svg << "<text x=\"" << anchor_x << "\" y=\"" << height - bottom + 16
        << "\" text-anchor=\"middle\" font-size=\"10\">" << svg_number(value) << "</text>\n";
  }
  svg << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < s.x.size(); ++i) svg << svg_number(px(s.x[i])) << "," << svg_number(py(s.y[i])) << " ";
  svg << "\"/>\n</svg>\n";
  write_file_atomic(path, svg.str());
}

void write_csv(const fs::path& path, const std::string& x_name, const std::string& y_name, const Series& s) {
  std::ostringstream csv;
  csv << x_name << "," << y_name << "\n" << std::setprecision(17);
  for (std::size_t i = 0; i < s.x.size(); ++i) csv << static_cast<std::uint64_t>(s.x[i]) << "," << s.y[i] << "\n";
  write_file_atomic(path, csv.str());
}

}  // namespace

void cmd_report(const fs::path& run_dir, std::ostream& out) {
  const fs::path log = run_dir / "history.jsonl";
  if (!fs::is_regular_file(log)) throw DataError("no history log in " + run_dir.string());
  const TrainHistory history = read_history(log);
  if (history.steps.empty()) throw DataError("history log has no step records: " + log.string());

  Series lr, loss;
  for (const auto& s : history.steps) {
    lr.x.push_back(static_cast<double>(s.step));
    lr.y.push_back(s.lr);
    loss.x.push_back(static_cast<double>(s.step));
    loss.y.push_back(s.loss);
  }
  write_plot(run_dir / "lr_vs_step.svg", "learning rate", "step", "lr", lr);
  write_plot(run_dir / "loss_vs_step.svg", "training loss", "step", "loss", loss);
  write_csv(run_dir / "lr_vs_step.csv", "step", "lr", lr);
  write_csv(run_dir / "loss_vs_step.csv", "step", "loss", loss);

  std::ostringstream summary;
  summary << "steps: " << history.steps.size() << "\n"
          << "final training loss: " << std::setprecision(6) << history.steps.back().loss << "\n";
  if (history.epochs.empty()) {
    summary << "no validation records\n";
  } else {
    const auto best = std::max_element(history.epochs.begin(), history.epochs.end(),
                                       [](const auto& a, const auto& b) { return a.validation.dsc < b.validation.dsc; });
    const auto& last = history.epochs.back();
    summary << "best validation (epoch " << best->epoch + 1 << "): val_loss " << best->validation_loss << " "
            << format_metrics(best->validation) << "\n"
            << "final validation (epoch " << last.epoch + 1 << "): val_loss " << last.validation_loss << " "
            << format_metrics(last.validation) << "\n";
  }
  write_file_atomic(run_dir / "summary.txt", summary.str());
  out << summary.str();
}

// ------------------------------------------------------------ entry point

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "Config file with dotted keys (key = value)");
    app->add_option("--seed", seed, "Seed for init, split, batching and augmentation");
    app->add_option("--output", output, "Output directory");
    app->add_option("--set", overrides, "Override a config key, key=value (repeatable)");
  }

  bool touches_config() const { return !config_path.empty() || !overrides.empty(); }

  /// defaults < config file < --set < dedicated flags
  RunConfig resolve() const {
    RunConfig config;
    if (!config_path.empty()) apply_config_file(config, config_path);
    for (const auto& o : overrides) apply_override(config, o);
    if (seed) config.seed = *seed;
    if (!output.empty()) config.output_dir = output;
    config.resolve();
    return config;
  }
};

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Polyp segmentation: train, predict, evaluate and report"};
  app.name("polypseg");
  app.require_subcommand(1);

  CommonFlags train_flags, predict_flags, eval_flags, report_flags;
  std::string data_root;

  auto* train = app.add_subcommand("train", "Train a model into a new timestamped run directory");
  train_flags.attach(train);
  train->add_option("--data", data_root, "Dataset root with images/ and masks/");
  bool print_config = false;
  train->add_flag("--print-config", print_config, "Print the resolved config and exit");

  PredictOptions predict_opts;
  std::optional<double> predict_threshold;
  auto* predict = app.add_subcommand("predict", "Write binary masks for every image in a directory");
  predict_flags.attach(predict);
  predict->add_option("--checkpoint", predict_opts.checkpoint, "Checkpoint file")->required();
  predict->add_option("--input", predict_opts.input_dir, "Directory of input images")->required();
  predict->add_option("--threshold", predict_threshold, "Binarization threshold in (0, 1)");

  EvaluateOptions eval_opts;
  std::optional<double> eval_threshold;
  std::string eval_aggregation;
  auto* evaluate = app.add_subcommand("evaluate", "Score predicted masks (or a checkpoint) against ground truth");
  eval_flags.attach(evaluate);
  evaluate->add_option("--predictions", eval_opts.predictions, "Directory of predicted masks");
  evaluate->add_option("--ground-truth", eval_opts.ground_truth, "Directory of ground-truth masks");
  evaluate->add_option("--checkpoint", eval_opts.checkpoint, "Checkpoint to score instead of mask files");
  evaluate->add_option("--data", eval_opts.data_root, "Dataset root used with --checkpoint");
  evaluate->add_option("--threshold", eval_threshold, "Binarization threshold in (0, 1)");
  evaluate->add_option("--aggregation", eval_aggregation, "per-image-mean or global-counts");

  fs::path run_dir;
  auto* report = app.add_subcommand("report", "Plot lr and loss curves and summarize a run");
  report_flags.attach(report);
  report->add_option("run_dir", run_dir, "Run directory holding history.jsonl")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  return run_guarded(
      [&] {
        if (train->parsed()) {
          RunConfig config = train_flags.resolve();
          if (!data_root.empty()) config.data_root = data_root;
          if (print_config) {
            config.validate();
            out << serialize_config(config);
            return;
          }
          cmd_train(config, out);
        } else if (predict->parsed()) {
          const RunConfig config = predict_flags.resolve();
          predict_opts.threshold = predict_threshold.value_or(config.threshold);
          predict_opts.output_dir = config.output_dir;
          if (predict_flags.touches_config()) predict_opts.expected_arch = config.arch;
          cmd_predict(predict_opts, out);
        } else if (evaluate->parsed()) {
          const RunConfig config = eval_flags.resolve();
          eval_opts.threshold = eval_threshold.value_or(config.threshold);
          eval_opts.aggregation = eval_aggregation.empty() ? config.aggregation : parse_aggregation(eval_aggregation);
          if (!eval_flags.output.empty() || eval_flags.touches_config()) eval_opts.output_dir = config.output_dir;
          cmd_evaluate(eval_opts, out);
        } else if (report->parsed()) {
          cmd_report(run_dir, out);
        }
      },
      err);
}

}  // namespace polypseg
