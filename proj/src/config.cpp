#include "polypseg/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "polypseg/errors.hpp"

namespace polypseg {

void RunConfig::resolve() {
  arch.init_seed = seed;
  train.seed = seed;
  train.threshold = threshold;
  augment.seed = seed;
  augment.target_height = arch.input_height;
  augment.target_width = arch.input_width;
}

void RunConfig::validate() const {
  arch.validate();
  train.validate();
  augment.validate();
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("data.train_fraction must lie in (0, 1)");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0, 1)");
  if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::ostringstream out;
  for (std::size_t i = 0; i < items.size(); ++i) out << (i ? ", " : "") << items[i];
  return out.str();
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename T>
Field number_field(std::string key, T RunConfig::*outer) {
  return {key, [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*outer);
            else return std::to_string(c.*outer);
          },
          [outer, key](RunConfig& c, const std::string& v) { c.*outer = parse_number<T>(key, v); }};
}

template <typename Sub, typename T>
Field number_field(std::string key, Sub RunConfig::*sub, T Sub::*member) {
  return {key, [sub, member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_double(c.*sub.*member);
            else return std::to_string(c.*sub.*member);
          },
          [sub, member, key](RunConfig& c, const std::string& v) { c.*sub.*member = parse_number<T>(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(number_field("seed", &RunConfig::seed));
    f.push_back({"data.root", [](const RunConfig& c) { return c.data_root; },
                 [](RunConfig& c, const std::string& v) { c.data_root = v; }});
    f.push_back(number_field("data.train_fraction", &RunConfig::train_fraction));
    f.push_back({"output.dir", [](const RunConfig& c) { return c.output_dir; },
                 [](RunConfig& c, const std::string& v) { c.output_dir = v; }});
    f.push_back(number_field("eval.threshold", &RunConfig::threshold));
    f.push_back({"eval.aggregation", [](const RunConfig& c) { return to_string(c.aggregation); },
                 [](RunConfig& c, const std::string& v) { c.aggregation = parse_aggregation(v); }});

    f.push_back(number_field("arch.input_channels", &RunConfig::arch, &ArchConfig::input_channels));
    f.push_back(number_field("arch.input_height", &RunConfig::arch, &ArchConfig::input_height));
    f.push_back(number_field("arch.input_width", &RunConfig::arch, &ArchConfig::input_width));
    f.push_back({"arch.encoder", [](const RunConfig& c) { return c.arch.encoder_name; },
                 [](RunConfig& c, const std::string& v) { c.arch.encoder_name = v; }});
    f.push_back({"arch.tap_stages", [](const RunConfig& c) { return join(c.arch.tap_stages); },
                 [](RunConfig& c, const std::string& v) { c.arch.tap_stages = split_list(v); }});
    f.push_back({"arch.decoder_channels", [](const RunConfig& c) { return join(c.arch.decoder_channels); },
                 [](RunConfig& c, const std::string& v) {
                   c.arch.decoder_channels.clear();
                   for (const auto& item : split_list(v)) {
                     c.arch.decoder_channels.push_back(parse_number<Index>("arch.decoder_channels", item));
                   }
                 }});
    f.push_back(number_field("arch.head_channels", &RunConfig::arch, &ArchConfig::head_channels));
    f.push_back({"arch.pretrained", [](const RunConfig& c) { return std::string(c.arch.pretrained ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.arch.pretrained = parse_bool("arch.pretrained", v); }});
    f.push_back({"arch.pretrained_path", [](const RunConfig& c) { return c.arch.pretrained_path; },
                 [](RunConfig& c, const std::string& v) { c.arch.pretrained_path = v; }});

    f.push_back(number_field("train.peak_lr", &RunConfig::train, &TrainConfig::peak_lr));
    f.push_back({"train.lr_anchor",
                 [](const RunConfig& c) { return std::string(c.train.lr_anchor == LrAnchor::Peak ? "peak" : "initial"); },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "peak") c.train.lr_anchor = LrAnchor::Peak;
                   else if (v == "initial") c.train.lr_anchor = LrAnchor::Initial;
                   else throw ConfigError("train.lr_anchor must be 'peak' or 'initial', got '" + v + "'");
                 }});
    f.push_back(number_field("train.epochs", &RunConfig::train, &TrainConfig::epochs));
    f.push_back(number_field("train.batch_size", &RunConfig::train, &TrainConfig::batch_size));
    f.push_back(number_field("train.pct_warmup", &RunConfig::train, &TrainConfig::pct_warmup));
    f.push_back(number_field("train.div_start", &RunConfig::train, &TrainConfig::div_start));
    f.push_back(number_field("train.div_final", &RunConfig::train, &TrainConfig::div_final));
    f.push_back(number_field("train.momentum_high", &RunConfig::train, &TrainConfig::momentum_high));
    f.push_back(number_field("train.momentum_low", &RunConfig::train, &TrainConfig::momentum_low));
    f.push_back(number_field("train.beta2", &RunConfig::train, &TrainConfig::beta2));
    f.push_back(number_field("train.eps", &RunConfig::train, &TrainConfig::eps));
    f.push_back(number_field("train.weight_decay", &RunConfig::train, &TrainConfig::weight_decay));
    f.push_back({"train.augment", [](const RunConfig& c) { return std::string(c.train.augment ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.train.augment = parse_bool("train.augment", v); }});

    f.push_back(number_field("augment.flip_probability", &RunConfig::augment, &AugmentationConfig::flip_probability));
    f.push_back(number_field("augment.rotation_limit", &RunConfig::augment, &AugmentationConfig::rotation_limit));
    f.push_back(number_field("augment.zoom_min", &RunConfig::augment, &AugmentationConfig::zoom_min));
    f.push_back(number_field("augment.zoom_max", &RunConfig::augment, &AugmentationConfig::zoom_max));
    f.push_back(number_field("augment.brightness_contrast_limit", &RunConfig::augment,
                             &AugmentationConfig::brightness_contrast_limit));
    f.push_back(number_field("augment.warp_magnitude", &RunConfig::augment, &AugmentationConfig::warp_magnitude));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

void set_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  find_field(key).set(config, trim(value));
  config.resolve();
}

std::string get_config_value(const RunConfig& config, const std::string& key) { return find_field(key).get(config); }

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value', got '" + t + "'");
    }
    try {
      set_config_value(config, trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(config, text.str(), path.string());
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override must look like key=value, got '" + assignment + "'");
  set_config_value(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string serialize_config(const RunConfig& config) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = dot == std::string::npos ? "" : f.key.substr(0, dot);
    if (s != section) {
      out << "\n# " << s << "\n";
      section = s;
    }
    out << f.key << " = " << f.get(config) << "\n";
  }
  return out.str();
}

}  // namespace polypseg
