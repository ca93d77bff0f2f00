#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace ldl {

/// Shape of the VGG16-style U-net. Channel counts are the VGG16 ones divided by
/// `width_divisor` (4 is the "tiny" variant, 2 "small", 1 full width).
struct NetworkConfig {
  int width_divisor = 4;
  int embed_dim = 16;     // K
  int num_clusters = 16;  // C
  int height = 512;
  int width = 512;
  int in_channels = 3;

  void validate() const;
  /// Channels of the five encoder blocks, one entry per conv layer.
  std::vector<std::vector<int>> encoder_channels() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct DiscriminatorConfig {
  std::vector<int> conv_channels{16, 32, 32, 32, 32, 32, 32};
  std::vector<int> fc_sizes{32, 1};
  double leak = 0.2;

  void validate() const;
  /// Smallest accepted input side: one 2x2 pooling per conv layer.
  int min_input_size() const { return 1 << conv_channels.size(); }
};

void to_json(nlohmann::json& j, const DiscriminatorConfig& c);
void from_json(const nlohmann::json& j, DiscriminatorConfig& c);

struct EmbedNetOutput {
  torch::Tensor v;  // [N, K, H, W], unit L2 norm per pixel
  torch::Tensor r;  // [N, C, H, W], per-pixel simplex
};

// ---------------------------------------------------------------------------

struct ConvBnReluImpl : torch::nn::Module {
  ConvBnReluImpl(int in, int out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv{nullptr};
  torch::nn::BatchNorm2d bn{nullptr};
};
TORCH_MODULE(ConvBnRelu);

/// VGG16 convolutional trunk without the classifier; returns the output of
/// every block so the decoder can use them as skip connections.
struct EncoderImpl : torch::nn::Module {
  explicit EncoderImpl(const NetworkConfig& cfg);
  std::vector<torch::Tensor> forward(const torch::Tensor& x);

  std::vector<torch::nn::Sequential> blocks;
};
TORCH_MODULE(Encoder);

/// Four blocks of nearest 2x upsampling, skip concatenation and two convs.
struct DecoderImpl : torch::nn::Module {
  explicit DecoderImpl(const NetworkConfig& cfg);
  torch::Tensor forward(const std::vector<torch::Tensor>& skips);
  int out_channels() const { return out_channels_; }

  std::vector<torch::nn::Sequential> blocks;

 private:
  int out_channels_ = 0;
};
TORCH_MODULE(Decoder);

struct EmbedNetImpl : torch::nn::Module {
  explicit EmbedNetImpl(const NetworkConfig& cfg);
  EmbedNetOutput forward(const torch::Tensor& x);
  const NetworkConfig& config() const { return cfg_; }

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  torch::nn::Sequential cluster_branch{nullptr};
  torch::nn::Sequential embed_branch{nullptr};

 private:
  NetworkConfig cfg_;
};
TORCH_MODULE(EmbedNet);

/// Plain U-net with a sigmoid head; shares the encoder layout of EmbedNet so
/// pretrained encoder weights transplant one-to-one.
struct SegNetImpl : torch::nn::Module {
  SegNetImpl(const NetworkConfig& cfg, int out_channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor logits(const torch::Tensor& x);
  const NetworkConfig& config() const { return cfg_; }
  int out_channels() const { return out_channels_; }

  Encoder encoder{nullptr};
  Decoder decoder{nullptr};
  torch::nn::Sequential head{nullptr};

 private:
  NetworkConfig cfg_;
  int out_channels_;
};
TORCH_MODULE(SegNet);

/// Mask discriminator: conv + LeakyReLU + 2x2 max-pool per layer, global
/// average pooling, fully-connected stack, sigmoid.
struct DiscriminatorImpl : torch::nn::Module {
  explicit DiscriminatorImpl(const DiscriminatorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& mask);  // [N] in (0, 1)
  torch::Tensor logits(const torch::Tensor& mask);   // [N]
  const DiscriminatorConfig& config() const { return cfg_; }

  torch::nn::Sequential convs{nullptr};
  std::vector<torch::nn::Linear> fcs;

 private:
  DiscriminatorConfig cfg_;
};
TORCH_MODULE(Discriminator);

EmbedNet build_embed_net(const NetworkConfig& cfg);
Discriminator build_discriminator(const DiscriminatorConfig& cfg);
SegNet build_seg_net(const NetworkConfig& cfg, int out_channels);

std::int64_t count_parameters(const torch::nn::Module& m);

/// Copies encoder parameters and buffers from `src` into `dst`.
void copy_encoder(const Encoder& src, Encoder& dst);

/// FNV-1a hash of every parameter of `m` (names and bytes), for freeze checks.
std::uint64_t parameter_hash(const torch::nn::Module& m);

// ---------------------------------------------------------------------------
// Checkpoints: one torch archive with named tensors, the header
// "ldlearn-ckpt-v1", a kind tag and a JSON metadata blob (network config and
// training state). Optimizer state is stored when given.

inline constexpr const char* kCheckpointHeader = "ldlearn-ckpt-v1";

struct CheckpointMeta {
  std::string kind;  // "embed", "seg", "disc"
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::string& path, const torch::nn::Module& module, const CheckpointMeta& meta,
                     const torch::optim::Optimizer* optimizer = nullptr);
CheckpointMeta read_checkpoint_meta(const std::string& path);
/// Loads tensors into `module` (shapes must match). Returns the metadata.
CheckpointMeta load_checkpoint(const std::string& path, torch::nn::Module& module,
                               torch::optim::Optimizer* optimizer = nullptr);

/// Rebuilds a network from a checkpoint's stored configuration.
EmbedNet load_embed_net(const std::string& path);
SegNet load_seg_net(const std::string& path);

}  // namespace ldl
