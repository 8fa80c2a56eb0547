#include "polypseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "polypseg/archive.hpp"
#include "polypseg/errors.hpp"

namespace polypseg {

namespace {

const std::vector<std::string> kTapStages = {"stem", "stage1", "stage2", "stage3"};
constexpr std::array<Index, 4> kStageBlocks = {3, 4, 6, 3};
constexpr std::array<Index, 4> kStageWidths = {64, 128, 256, 512};
// skip channels consumed by decoder blocks 1..5 (the last block has none)
constexpr std::array<Index, 5> kSkipChannels = {1024, 512, 256, 64, 0};

}  // namespace

// ------------------------------------------------------------ ArchConfig

void ArchConfig::validate() const {
  if (encoder_name != "resnet50") throw ConfigError("unsupported encoder '" + encoder_name + "' (only resnet50)");
  if (input_channels < 1) throw ConfigError("input_channels must be positive");
  if (pretrained && input_channels != 3) throw ConfigError("pretrained resnet50 weights require 3 input channels");
  if (input_height < 32 || input_width < 32 || input_height % 32 != 0 || input_width % 32 != 0) {
    throw ConfigError("input size " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                      " must be a positive multiple of 32 in both dimensions");
  }
  if (decoder_channels.size() != 5) {
    throw ConfigError("decoder_channels needs exactly 5 entries, got " + std::to_string(decoder_channels.size()));
  }
  for (Index c : decoder_channels) {
    if (c < 1) throw ConfigError("decoder_channels entries must be positive");
  }
  if (tap_stages != kTapStages) {
    throw ConfigError("tap_stages must be exactly [stem, stage1, stage2, stage3] (highest resolution first)");
  }
  if (head_channels < 1) throw ConfigError("head_channels must be positive");
}

bool ArchConfig::same_graph(const ArchConfig& o) const {
  return input_channels == o.input_channels && input_height == o.input_height && input_width == o.input_width &&
         encoder_name == o.encoder_name && tap_stages == o.tap_stages && decoder_channels == o.decoder_channels &&
         head_channels == o.head_channels;
}

void to_json(nlohmann::json& j, const ArchConfig& c) {
  j = nlohmann::json{{"input_channels", c.input_channels},
                     {"input_height", c.input_height},
                     {"input_width", c.input_width},
                     {"encoder_name", c.encoder_name},
                     {"tap_stages", c.tap_stages},
                     {"decoder_channels", c.decoder_channels},
                     {"head_channels", c.head_channels},
                     {"pretrained", c.pretrained},
                     {"pretrained_path", c.pretrained_path},
                     {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ArchConfig& c) {
  j.at("input_channels").get_to(c.input_channels);
  j.at("input_height").get_to(c.input_height);
  j.at("input_width").get_to(c.input_width);
  j.at("encoder_name").get_to(c.encoder_name);
  j.at("tap_stages").get_to(c.tap_stages);
  j.at("decoder_channels").get_to(c.decoder_channels);
  j.at("head_channels").get_to(c.head_channels);
  j.at("pretrained").get_to(c.pretrained);
  c.pretrained_path = j.value("pretrained_path", std::string());
  c.init_seed = j.value("init_seed", std::uint64_t{0});
}

// ------------------------------------------------------------ Bottleneck

template <typename Scalar>
Bottleneck<Scalar>::Bottleneck(Index in_channels, Index width, Index stride)
    : conv1_(in_channels, width, 1, 1, 0, false),
      conv2_(width, width, 3, stride, 1, false),
      conv3_(width, width * 4, 1, 1, 0, false),
      bn1_(width), bn2_(width), bn3_(width * 4),
      has_downsample_(stride != 1 || in_channels != width * 4) {
  if (has_downsample_) {
    down_conv_ = Conv2d<Scalar>(in_channels, width * 4, 1, stride, 0, false);
    down_bn_ = BatchNorm2d<Scalar>(width * 4);
  }
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  Tensor<Scalar> out = bn1_.forward(conv1_.forward(x, mode), mode);
  relu1_.forward_inplace(out, mode);
  out = bn2_.forward(conv2_.forward(out, mode), mode);
  relu2_.forward_inplace(out, mode);
  out = bn3_.forward(conv3_.forward(out, mode), mode);
  if (has_downsample_) {
    out.array() += down_bn_.forward(down_conv_.forward(x, mode), mode).array();
  } else {
    out.array() += x.array();
  }
  relu3_.forward_inplace(out, mode);
  return out;
}

template <typename Scalar>
Tensor<Scalar> Bottleneck<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  const Tensor<Scalar> g_sum = relu3_.backward(grad_out);
  Tensor<Scalar> g = bn3_.backward(g_sum);
  g = conv3_.backward(g);
  g = conv2_.backward(bn2_.backward(relu2_.backward(std::move(g))));
  g = conv1_.backward(bn1_.backward(relu1_.backward(std::move(g))));
  if (has_downsample_) {
    g.array() += down_conv_.backward(down_bn_.backward(g_sum)).array();
  } else {
    g.array() += g_sum.array();
  }
  return g;
}

template <typename Scalar>
void Bottleneck<Scalar>::init(Rng& rng) {
  conv1_.init(rng);
  conv2_.init(rng);
  conv3_.init(rng);
  bn1_.reset();
  bn2_.reset();
  bn3_.reset();
  if (has_downsample_) {
    down_conv_.init(rng);
    down_bn_.reset();
  }
}

template <typename Scalar>
void Bottleneck<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  conv1_.collect(prefix + ".conv1", out);
  bn1_.collect(prefix + ".bn1", out);
  conv2_.collect(prefix + ".conv2", out);
  bn2_.collect(prefix + ".bn2", out);
  conv3_.collect(prefix + ".conv3", out);
  bn3_.collect(prefix + ".bn3", out);
  if (has_downsample_) {
    down_conv_.collect(prefix + ".downsample.conv", out);
    down_bn_.collect(prefix + ".downsample.bn", out);
  }
}

template <typename Scalar>
void Bottleneck<Scalar>::release() {
  conv1_.release();
  conv2_.release();
  conv3_.release();
  bn1_.release();
  bn2_.release();
  bn3_.release();
  relu1_.release();
  relu2_.release();
  relu3_.release();
  down_conv_.release();
  down_bn_.release();
}

// ------------------------------------------------------- ResNet50Encoder

template <typename Scalar>
ResNet50Encoder<Scalar>::ResNet50Encoder(Index input_channels)
    : stem_conv_(input_channels, 64, 7, 2, 3, false), stem_bn_(64), pool_(3, 2, 1) {
  Index in = 64;
  for (std::size_t s = 0; s < 4; ++s) {
    const Index width = kStageWidths[s];
    for (Index b = 0; b < kStageBlocks[s]; ++b) {
      stages_[s].emplace_back(in, width, (b == 0 && s > 0) ? 2 : 1);
      in = width * 4;
    }
  }
}

template <typename Scalar>
EncoderTaps<Scalar> ResNet50Encoder<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  EncoderTaps<Scalar> taps;
  Tensor<Scalar> stem = stem_bn_.forward(stem_conv_.forward(x, mode), mode);
  stem_relu_.forward_inplace(stem, mode);
  Tensor<Scalar> h = pool_.forward(stem, mode);
  taps.skips[3] = std::move(stem);
  for (std::size_t s = 0; s < 4; ++s) {
    for (auto& block : stages_[s]) h = block.forward(h, mode);
    if (s < 3) {
      taps.skips[2 - s] = h;
    }
  }
  taps.bottleneck = std::move(h);
  return taps;
}

template <typename Scalar>
void ResNet50Encoder<Scalar>::backward(const Tensor<Scalar>& grad_bottleneck,
                                       const std::array<Tensor<Scalar>, 4>& grad_skips) {
  Tensor<Scalar> g = grad_bottleneck;
  for (std::size_t s = 4; s-- > 0;) {
    if (s < 3) g.array() += grad_skips[2 - s].array();
    for (auto it = stages_[s].rbegin(); it != stages_[s].rend(); ++it) g = it->backward(g);
  }
  g = pool_.backward(g);
  g.array() += grad_skips[3].array();
  stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(std::move(g))));
  pool_.release();
}

template <typename Scalar>
void ResNet50Encoder<Scalar>::init(Rng& rng) {
  stem_conv_.init(rng);
  stem_bn_.reset();
  for (auto& stage : stages_) {
    for (auto& block : stage) block.init(rng);
  }
}

template <typename Scalar>
void ResNet50Encoder<Scalar>::collect(ParameterList<Scalar>& out) {
  stem_conv_.collect("encoder.stem.conv", out);
  stem_bn_.collect("encoder.stem.bn", out);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      stages_[s][b].collect("encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b), out);
    }
  }
}

template <typename Scalar>
void ResNet50Encoder<Scalar>::release() {
  stem_conv_.release();
  stem_bn_.release();
  stem_relu_.release();
  pool_.release();
  for (auto& stage : stages_) {
    for (auto& block : stage) block.release();
  }
}

// ---------------------------------------------------------- DecoderBlock

template <typename Scalar>
DecoderBlock<Scalar>::DecoderBlock(Index in_channels, Index skip_channels, Index out_channels)
    : skip_channels_(skip_channels),
      up_(in_channels, out_channels, 2),
      conv1_(out_channels + skip_channels, out_channels, 3, 1, 1, false),
      conv2_(out_channels, out_channels, 3, 1, 1, false),
      bn1_(out_channels), bn2_(out_channels) {}

template <typename Scalar>
Tensor<Scalar> DecoderBlock<Scalar>::forward(const Tensor<Scalar>& x, const Tensor<Scalar>* skip, Mode mode) {
  Tensor<Scalar> up = up_.forward(x, mode);
  if (skip_channels_ > 0) {
    if (skip == nullptr) throw ShapeError("decoder block expects a skip connection");
    const Shape expected{up.n(), skip_channels_, up.h(), up.w()};
    require_shape(skip->shape(), expected, "decoder skip");
    up = concat_channels(up, *skip);
  } else if (skip != nullptr) {
    throw ShapeError("decoder block built without a skip connection was given one");
  }
  Tensor<Scalar> out = bn1_.forward(conv1_.forward(up, mode), mode);
  relu1_.forward_inplace(out, mode);
  out = bn2_.forward(conv2_.forward(out, mode), mode);
  relu2_.forward_inplace(out, mode);
  return out;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, Tensor<Scalar>> DecoderBlock<Scalar>::backward(const Tensor<Scalar>& grad_out) {
  Tensor<Scalar> g = conv2_.backward(bn2_.backward(relu2_.backward(grad_out)));
  g = conv1_.backward(bn1_.backward(relu1_.backward(std::move(g))));
  Tensor<Scalar> g_skip;
  if (skip_channels_ > 0) {
    auto [g_up, g_s] = split_channels(g, up_.out_channels());
    g = std::move(g_up);
    g_skip = std::move(g_s);
  }
  return {up_.backward(g), std::move(g_skip)};
}

template <typename Scalar>
void DecoderBlock<Scalar>::init(Rng& rng) {
  up_.init(rng);
  conv1_.init(rng);
  conv2_.init(rng);
  bn1_.reset();
  bn2_.reset();
}

template <typename Scalar>
void DecoderBlock<Scalar>::collect(const std::string& prefix, ParameterList<Scalar>& out) {
  up_.collect(prefix + ".up", out);
  conv1_.collect(prefix + ".conv1", out);
  bn1_.collect(prefix + ".bn1", out);
  conv2_.collect(prefix + ".conv2", out);
  bn2_.collect(prefix + ".bn2", out);
}

template <typename Scalar>
void DecoderBlock<Scalar>::release() {
  up_.release();
  conv1_.release();
  conv2_.release();
  bn1_.release();
  bn2_.release();
  relu1_.release();
  relu2_.release();
}

// ----------------------------------------------------- SegmentationModel

template <typename Scalar>
SegmentationModel<Scalar>::SegmentationModel(const ArchConfig& config)
    : config_((config.validate(), config)), encoder_(config.input_channels) {
  Index in = ResNet50Encoder<Scalar>::kChannels[4];
  for (std::size_t i = 0; i < 5; ++i) {
    decoder_.emplace_back(in, kSkipChannels[i], config.decoder_channels[i]);
    in = config.decoder_channels[i];
  }
  head_ = Conv2d<Scalar>(in, config.head_channels, 1, 1, 0, true);

  encoder_.collect(params_);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    decoder_[i].collect("decoder.block" + std::to_string(i + 1), params_);
  }
  head_.collect("head.conv", params_);
  initialize(config.init_seed);
}

template <typename Scalar>
void SegmentationModel<Scalar>::initialize(std::uint64_t seed) {
  Rng encoder_rng = Rng::derive(seed, 1);
  Rng decoder_rng = Rng::derive(seed, 2);
  encoder_.init(encoder_rng);
  for (auto& block : decoder_) block.init(decoder_rng);
  head_.init(decoder_rng);
}

template <typename Scalar>
void SegmentationModel<Scalar>::check_input(const Tensor<Scalar>& images) const {
  const Shape expected{images.n(), config_.input_channels, config_.input_height, config_.input_width};
  if (images.n() < 1) throw ShapeError("empty input batch");
  require_shape(images.shape(), expected, "model input");
}

template <typename Scalar>
EncoderTaps<Scalar> SegmentationModel<Scalar>::encode(const Tensor<Scalar>& images, Mode mode) {
  check_input(images);
  return encoder_.forward(images, mode);
}

template <typename Scalar>
ForwardResult<Scalar> SegmentationModel<Scalar>::forward(const Tensor<Scalar>& images, Mode mode) {
  EncoderTaps<Scalar> taps = encode(images, mode);
  Tensor<Scalar> h = std::move(taps.bottleneck);
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const Tensor<Scalar>* skip = i < taps.skips.size() ? &taps.skips[i] : nullptr;
    h = decoder_[i].forward(h, skip, mode);
    if (i < taps.skips.size()) taps.skips[i] = Tensor<Scalar>();
  }
  ForwardResult<Scalar> result;
  result.logits = head_.forward(h, mode);

  const Index per_sample = result.logits.shape().sample_size();
  for (Index n = 0; n < result.logits.n(); ++n) {
    if (!result.logits.array().segment(n * per_sample, per_sample).isFinite().all()) {
      throw NumericalError("non-finite logits for batch index " + std::to_string(n));
    }
  }
  // clamp keeps the probabilities inside the open interval at float resolution
  const Scalar lo = std::numeric_limits<Scalar>::min();
  const Scalar hi = Scalar(1) - std::numeric_limits<Scalar>::epsilon() / 2;
  result.probabilities = Tensor<Scalar>(result.logits.shape());
  result.probabilities.array() = (Scalar(1) / (Scalar(1) + (-result.logits.array()).exp())).max(lo).min(hi);
  return result;
}

template <typename Scalar>
void SegmentationModel<Scalar>::backward(const Tensor<Scalar>& grad_logits) {
  Tensor<Scalar> g = head_.backward(grad_logits);
  std::array<Tensor<Scalar>, 4> grad_skips;
  for (std::size_t i = decoder_.size(); i-- > 0;) {
    auto [g_features, g_skip] = decoder_[i].backward(g);
    g = std::move(g_features);
    if (i < grad_skips.size()) grad_skips[i] = std::move(g_skip);
  }
  encoder_.backward(g, grad_skips);
}

template <typename Scalar>
ParameterList<Scalar> SegmentationModel<Scalar>::parameters_with_prefix(const std::string& prefix) {
  ParameterList<Scalar> out;
  for (const auto& p : params_) {
    if (p.name.starts_with(prefix)) out.push_back(p);
  }
  return out;
}

template <typename Scalar>
Parameter<Scalar>* SegmentationModel<Scalar>::find(const std::string& name) {
  for (const auto& p : params_) {
    if (p.name == name) return p.param;
  }
  return nullptr;
}

template <typename Scalar>
void SegmentationModel<Scalar>::zero_grad() {
  for (auto& p : params_) p.param->zero_grad();
}

template <typename Scalar>
void SegmentationModel<Scalar>::release() {
  encoder_.release();
  for (auto& block : decoder_) block.release();
  head_.release();
}

// --------------------------------------------------------- free functions

void load_encoder_weights(SegmentationModel<float>& model, const std::string& path) {
  if (path.empty()) throw WeightsUnavailableError("pretrained encoder requested but no weights path configured");
  Archive archive;
  try {
    archive = read_archive(path);
  } catch (const CheckpointError& e) {
    throw WeightsUnavailableError(std::string("pretrained encoder weights unavailable: ") + e.what());
  }
  std::vector<std::string> problems;
  for (auto& [name, param] : model.parameters_with_prefix("encoder.")) {
    const TensorRecord* t = archive.find(name);
    if (t == nullptr) {
      problems.push_back("missing " + name);
    } else if (t->shape != param->shape) {
      problems.push_back("shape mismatch for " + name);
    } else {
      std::memcpy(param->value.data(), t->values.data(), t->values.size() * sizeof(float));
    }
  }
  if (!problems.empty()) {
    std::string msg = "pretrained encoder weights in " + path + " are incomplete:";
    for (const auto& p : problems) msg += "\n  " + p;
    throw WeightsUnavailableError(msg);
  }
}

std::unique_ptr<SegmentationModel<float>> build_model(const ArchConfig& config) {
  auto model = std::make_unique<SegmentationModel<float>>(config);
  if (config.pretrained) load_encoder_weights(*model, config.pretrained_path);
  return model;
}

template <typename Scalar>
Tensor<Scalar> binarize(const Tensor<Scalar>& probabilities, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ConfigError("binarization threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  Tensor<Scalar> out(probabilities.shape());
  out.array() = (probabilities.array() > Scalar(threshold)).template cast<Scalar>();
  return out;
}

std::uint64_t parameter_checksum(const ParameterList<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, param] : params) {
    feed(name.data(), name.size());
    for (Index d : param->shape) {
      const auto dim = static_cast<std::int64_t>(d);
      feed(&dim, sizeof(dim));
    }
    feed(param->value.data(), static_cast<std::size_t>(param->value.size()) * sizeof(float));
  }
  return h;
}

template class Bottleneck<float>;
template class Bottleneck<double>;
template class ResNet50Encoder<float>;
template class ResNet50Encoder<double>;
template class DecoderBlock<float>;
template class DecoderBlock<double>;
template class SegmentationModel<float>;
template class SegmentationModel<double>;
template Tensor<float> binarize(const Tensor<float>&, double);
template Tensor<double> binarize(const Tensor<double>&, double);

}  // namespace polypseg
