#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "polypseg/layers.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

/// Network graph description. Together with the parameter values it fully
/// determines the model; it is serialized into every checkpoint.
struct ArchConfig {
  Index input_channels = 3;
  Index input_height = 256;
  Index input_width = 256;
  std::string encoder_name = "resnet50";
  /// Encoder outputs forwarded as skips, highest resolution first.
  std::vector<std::string> tap_stages = {"stem", "stage1", "stage2", "stage3"};
  /// Output width of each decoder block, bottleneck side first.
  std::vector<Index> decoder_channels = {512, 256, 128, 64, 32};
  Index head_channels = 1;
  bool pretrained = false;
  /// Archive holding the `encoder.*` tensors used when `pretrained` is set.
  std::string pretrained_path;
  /// Seed for the random initialization of every freshly initialized tensor.
  std::uint64_t init_seed = 0;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  /// Structural equality: everything that changes the graph or its weights'
  /// provenance. `pretrained_path` is a retrieval detail and is not compared.
  bool same_graph(const ArchConfig& other) const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

void to_json(nlohmann::json& j, const ArchConfig& c);
void from_json(const nlohmann::json& j, ArchConfig& c);

/// Encoder outputs. `skips` are in decoder consumption order: strides 16, 8, 4, 2.
template <typename Scalar>
struct EncoderTaps {
  Tensor<Scalar> bottleneck;
  std::array<Tensor<Scalar>, 4> skips;
};

/// ResNet50 bottleneck residual block (stride on the 3x3 convolution).
template <typename Scalar>
class Bottleneck {
 public:
  Bottleneck(Index in_channels, Index width, Index stride);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  Tensor<Scalar> backward(const Tensor<Scalar>& grad_out);
  void init(Rng& rng);
  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void release();

 private:
  Conv2d<Scalar> conv1_, conv2_, conv3_;
  BatchNorm2d<Scalar> bn1_, bn2_, bn3_;
  ReLU<Scalar> relu1_, relu2_, relu3_;
  bool has_downsample_ = false;
  Conv2d<Scalar> down_conv_;
  BatchNorm2d<Scalar> down_bn_;
};

/// ResNet50 trunk exposing the stem and the four stage outputs.
template <typename Scalar>
class ResNet50Encoder {
 public:
  static constexpr std::array<Index, 5> kChannels = {64, 256, 512, 1024, 2048};

  explicit ResNet50Encoder(Index input_channels);

  EncoderTaps<Scalar> forward(const Tensor<Scalar>& x, Mode mode);
  /// `grad_skips` follows the EncoderTaps ordering (strides 16, 8, 4, 2).
  void backward(const Tensor<Scalar>& grad_bottleneck, const std::array<Tensor<Scalar>, 4>& grad_skips);
  void init(Rng& rng);
  void collect(ParameterList<Scalar>& out);
  void release();

 private:
  Conv2d<Scalar> stem_conv_;
  BatchNorm2d<Scalar> stem_bn_;
  ReLU<Scalar> stem_relu_;
  MaxPool2d<Scalar> pool_;
  std::array<std::vector<Bottleneck<Scalar>>, 4> stages_;
};

/// transpose-conv (x2) -> concat(skip) -> [conv3x3 -> BN -> ReLU] x 2
template <typename Scalar>
class DecoderBlock {
 public:
  DecoderBlock(Index in_channels, Index skip_channels, Index out_channels);

  Index out_channels() const { return up_.out_channels(); }
  Index skip_channels() const { return skip_channels_; }

  /// `skip` may be null only for a block built with zero skip channels.
  Tensor<Scalar> forward(const Tensor<Scalar>& x, const Tensor<Scalar>* skip, Mode mode);
  /// Returns (grad wrt features, grad wrt skip); the latter is empty without a skip.
  std::pair<Tensor<Scalar>, Tensor<Scalar>> backward(const Tensor<Scalar>& grad_out);
  void init(Rng& rng);
  void collect(const std::string& prefix, ParameterList<Scalar>& out);
  void release();

 private:
  Index skip_channels_ = 0;
  ConvTranspose2d<Scalar> up_;
  Conv2d<Scalar> conv1_, conv2_;
  BatchNorm2d<Scalar> bn1_, bn2_;
  ReLU<Scalar> relu1_, relu2_;
};

template <typename Scalar>
struct ForwardResult {
  Tensor<Scalar> logits;
  Tensor<Scalar> probabilities;
};

/// U-Net decoder over a ResNet50 encoder with a 1x1 sigmoid head.
///
/// Parameters are named `encoder.stem.*`, `encoder.stageK.blockI.*`,
/// `decoder.blockK.*` (K = 1 nearest the bottleneck) and `head.conv.*`.
/// Training mode caches activations for one `backward` call; inference mode
/// is free of side effects and safe for concurrent callers.
template <typename Scalar>
class SegmentationModel {
 public:
  explicit SegmentationModel(const ArchConfig& config);

  SegmentationModel(const SegmentationModel&) = delete;
  SegmentationModel& operator=(const SegmentationModel&) = delete;

  const ArchConfig& config() const { return config_; }

  /// Checks an input batch against the configured channel count and size.
  void check_input(const Tensor<Scalar>& images) const;

  EncoderTaps<Scalar> encode(const Tensor<Scalar>& images, Mode mode = Mode::Inference);
  ForwardResult<Scalar> forward(const Tensor<Scalar>& images, Mode mode = Mode::Inference);
  /// Backpropagates d(loss)/d(logits) through the last training-mode forward,
  /// accumulating into every trainable parameter's gradient.
  void backward(const Tensor<Scalar>& grad_logits);

  /// Reinitializes every tensor from `seed` (encoder included).
  void initialize(std::uint64_t seed);

  ParameterList<Scalar>& parameters() { return params_; }
  ParameterList<Scalar> parameters_with_prefix(const std::string& prefix);
  Parameter<Scalar>* find(const std::string& name);
  void zero_grad();
  void release();

  DecoderBlock<Scalar>& decoder_block(std::size_t i) { return decoder_[i]; }

 private:
  ArchConfig config_;
  ResNet50Encoder<Scalar> encoder_;
  std::vector<DecoderBlock<Scalar>> decoder_;
  Conv2d<Scalar> head_;
  ParameterList<Scalar> params_;
};

/// Constructs the model described by `config`. With `pretrained` set the
/// encoder tensors are copied bit-for-bit from `config.pretrained_path`;
/// failure to retrieve them raises WeightsUnavailableError.
std::unique_ptr<SegmentationModel<float>> build_model(const ArchConfig& config);

/// Loads every `encoder.*` tensor of an archive into `model`.
void load_encoder_weights(SegmentationModel<float>& model, const std::string& path);

/// Elementwise `p > threshold` as 0/1 values.
template <typename Scalar>
Tensor<Scalar> binarize(const Tensor<Scalar>& probabilities, double threshold = 0.5);

/// FNV-1a over names, shapes and float32 values, in list order.
std::uint64_t parameter_checksum(const ParameterList<float>& params);

extern template class SegmentationModel<float>;
extern template class SegmentationModel<double>;

}  // namespace polypseg
