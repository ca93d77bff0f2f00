#include "ldlearn/nets.hpp"

#include "ldlearn/common.hpp"

#include <filesystem>

namespace ldl {

namespace F = torch::nn::functional;

void NetworkConfig::validate() const {
  if (width_divisor < 1) throw ConfigError("network.width_divisor must be a positive integer");
  if (embed_dim < 2) throw ConfigError("network.embed_dim (K) must be at least 2");
  if (num_clusters < 1) throw ConfigError("network.num_clusters (C) must be at least 1");
  if (in_channels < 1) throw ConfigError("network.in_channels must be positive");
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0)
    throw ConfigError("network input size must be positive and divisible by 32, got " + std::to_string(height) +
                      "x" + std::to_string(width));
}

std::vector<std::vector<int>> NetworkConfig::encoder_channels() const {
  static const std::vector<std::vector<int>> kVgg16 = {
      {64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}, {512, 512, 512}};
  auto out = kVgg16;
  for (auto& block : out)
    for (auto& c : block) c = std::max(1, c / width_divisor);
  return out;
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"width_divisor", c.width_divisor}, {"embed_dim", c.embed_dim},
                     {"num_clusters", c.num_clusters}, {"height", c.height},
                     {"width", c.width},               {"in_channels", c.in_channels}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.width_divisor = j.value("width_divisor", c.width_divisor);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_clusters = j.value("num_clusters", c.num_clusters);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.in_channels = j.value("in_channels", c.in_channels);
}

void DiscriminatorConfig::validate() const {
  if (conv_channels.empty()) throw ConfigError("discriminator needs at least one conv layer");
  if (fc_sizes.empty() || fc_sizes.back() != 1) throw ConfigError("discriminator fc stack must end in one unit");
  for (int c : conv_channels)
    if (c < 1) throw ConfigError("discriminator conv channels must be positive");
  for (int c : fc_sizes)
    if (c < 1) throw ConfigError("discriminator fc sizes must be positive");
  if (leak < 0.0) throw ConfigError("discriminator leak must be non-negative");
}

void to_json(nlohmann::json& j, const DiscriminatorConfig& c) {
  j = nlohmann::json{{"conv_channels", c.conv_channels}, {"fc_sizes", c.fc_sizes}, {"leak", c.leak}};
}

void from_json(const nlohmann::json& j, DiscriminatorConfig& c) {
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.fc_sizes = j.value("fc_sizes", c.fc_sizes);
  c.leak = j.value("leak", c.leak);
}

// ---------------------------------------------------------------------------

ConvBnReluImpl::ConvBnReluImpl(int in, int out) {
  conv = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1).bias(false)));
  bn = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBnReluImpl::forward(const torch::Tensor& x) { return torch::relu(bn(conv(x))); }

EncoderImpl::EncoderImpl(const NetworkConfig& cfg) {
  int in = cfg.in_channels;
  const auto channels = cfg.encoder_channels();
  for (std::size_t b = 0; b < channels.size(); ++b) {
    torch::nn::Sequential block;
    for (int out : channels[b]) {
      block->push_back(ConvBnRelu(in, out));
      in = out;
    }
    blocks.push_back(register_module("block" + std::to_string(b), block));
  }
}

std::vector<torch::Tensor> EncoderImpl::forward(const torch::Tensor& x) {
  std::vector<torch::Tensor> outs;
  outs.reserve(blocks.size());
  torch::Tensor h = x;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (b > 0) h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
    h = blocks[b]->forward(h);
    outs.push_back(h);
  }
  return outs;
}

DecoderImpl::DecoderImpl(const NetworkConfig& cfg) {
  const auto channels = cfg.encoder_channels();
  int in = channels.back().back();
  for (int j = 0; j < 4; ++j) {
    const int skip = channels[3 - j].back();
    torch::nn::Sequential block;
    block->push_back(ConvBnRelu(in + skip, skip));
    block->push_back(ConvBnRelu(skip, skip));
    blocks.push_back(register_module("block" + std::to_string(j), block));
    in = skip;
  }
  out_channels_ = in;
}

torch::Tensor DecoderImpl::forward(const std::vector<torch::Tensor>& skips) {
  torch::Tensor h = skips.back();
  for (int j = 0; j < 4; ++j) {
    h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    h = torch::cat({h, skips[3 - j]}, 1);
    h = blocks[j]->forward(h);
  }
  return h;
}

static torch::nn::Sequential make_branch(int in, int out) {
  torch::nn::Sequential s;
  s->push_back(ConvBnRelu(in, in));
  s->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  return s;
}

EmbedNetImpl::EmbedNetImpl(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoder = register_module("encoder", Encoder(cfg_));
  decoder = register_module("decoder", Decoder(cfg_));
  cluster_branch = register_module("cluster_branch", make_branch(decoder->out_channels(), cfg_.num_clusters));
  embed_branch = register_module("embed_branch", make_branch(decoder->out_channels(), cfg_.embed_dim));
}

EmbedNetOutput EmbedNetImpl::forward(const torch::Tensor& x) {
  TORCH_CHECK(x.dim() == 4 && x.size(2) % 32 == 0 && x.size(3) % 32 == 0,
              "embed net input must be [N, C, H, W] with H, W divisible by 32");
  auto features = decoder(encoder(x));
  auto raw = embed_branch->forward(features);
  auto v = raw / (raw.norm(2, 1, true) + 1e-8);
  auto r = torch::softmax(cluster_branch->forward(features), 1);
  return {v, r};
}

SegNetImpl::SegNetImpl(const NetworkConfig& cfg, int out_channels) : cfg_(cfg), out_channels_(out_channels) {
  cfg_.validate();
  if (out_channels < 1) throw ConfigError("segmentation net needs at least one output channel");
  encoder = register_module("encoder", Encoder(cfg_));
  decoder = register_module("decoder", Decoder(cfg_));
  head = register_module("head", make_branch(decoder->out_channels(), out_channels));
}

torch::Tensor SegNetImpl::logits(const torch::Tensor& x) {
  TORCH_CHECK(x.dim() == 4 && x.size(2) % 32 == 0 && x.size(3) % 32 == 0,
              "segmentation net input must be [N, C, H, W] with H, W divisible by 32");
  return head->forward(decoder(encoder(x)));
}

torch::Tensor SegNetImpl::forward(const torch::Tensor& x) { return torch::sigmoid(logits(x)); }

DiscriminatorImpl::DiscriminatorImpl(const DiscriminatorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  convs = torch::nn::Sequential();
  int in = 1;
  for (int out : cfg_.conv_channels) {
    convs->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    convs->push_back(torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(cfg_.leak)));
    convs->push_back(torch::nn::MaxPool2d(torch::nn::MaxPool2dOptions(2)));
    in = out;
  }
  register_module("convs", convs);
  for (std::size_t i = 0; i < cfg_.fc_sizes.size(); ++i) {
    fcs.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(in, cfg_.fc_sizes[i])));
    in = cfg_.fc_sizes[i];
  }
}

torch::Tensor DiscriminatorImpl::logits(const torch::Tensor& mask) {
  if (mask.dim() != 4 || mask.size(1) != 1)
    throw std::invalid_argument("discriminator input must be [N, 1, H, W]");
  const auto min_side = cfg_.min_input_size();
  if (mask.size(2) < min_side || mask.size(3) < min_side)
    throw std::invalid_argument("discriminator input smaller than " + std::to_string(min_side) + " pixels per side");
  auto h = convs->forward(mask).mean({2, 3});
  for (std::size_t i = 0; i < fcs.size(); ++i) {
    h = fcs[i](h);
    if (i + 1 < fcs.size()) h = F::leaky_relu(h, F::LeakyReLUFuncOptions().negative_slope(cfg_.leak));
  }
  return h.squeeze(1);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& mask) { return torch::sigmoid(logits(mask)); }

EmbedNet build_embed_net(const NetworkConfig& cfg) { return EmbedNet(cfg); }
Discriminator build_discriminator(const DiscriminatorConfig& cfg) { return Discriminator(cfg); }
SegNet build_seg_net(const NetworkConfig& cfg, int out_channels) { return SegNet(cfg, out_channels); }

std::int64_t count_parameters(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

void copy_encoder(const Encoder& src, Encoder& dst) {
  torch::NoGradGuard guard;
  auto dst_params = dst->named_parameters();
  for (const auto& p : src->named_parameters()) {
    auto* target = dst_params.find(p.key());
    if (!target || !target->sizes().equals(p.value().sizes()))
      throw ConfigError("encoder layouts differ at " + p.key());
    target->copy_(p.value());
  }
  auto dst_buffers = dst->named_buffers();
  for (const auto& b : src->named_buffers()) {
    auto* target = dst_buffers.find(b.key());
    if (!target) throw ConfigError("encoder layouts differ at buffer " + b.key());
    target->copy_(b.value());
  }
}

std::uint64_t parameter_hash(const torch::nn::Module& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : m.named_parameters()) {
    mix(p.key().data(), p.key().size());
    auto t = p.value().detach().contiguous().cpu();
    mix(t.data_ptr(), t.numel() * t.element_size());
  }
  return h;
}

// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const torch::nn::Module& module, const CheckpointMeta& meta,
                     const torch::optim::Optimizer* optimizer) {
  torch::serialize::OutputArchive archive;
  archive.write("header", c10::IValue(std::string(kCheckpointHeader)));
  archive.write("kind", c10::IValue(meta.kind));
  archive.write("meta", c10::IValue(meta.meta.dump()));
  for (const auto& p : module.named_parameters()) archive.write("param." + p.key(), p.value().detach());
  for (const auto& b : module.named_buffers()) archive.write("buffer." + b.key(), b.value(), true);
  if (optimizer) {
    torch::serialize::OutputArchive opt_archive;
    optimizer->save(opt_archive);
    archive.write("optimizer", opt_archive);
  }
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  archive.save_to(path);
}

static CheckpointMeta read_meta(torch::serialize::InputArchive& archive, const std::string& path) {
  c10::IValue header;
  if (!archive.try_read("header", header) || !header.isString() || header.toStringRef() != kCheckpointHeader)
    throw ConfigError("not an ldlearn checkpoint (missing " + std::string(kCheckpointHeader) + " header): " + path);
  c10::IValue kind, meta;
  archive.read("kind", kind);
  archive.read("meta", meta);
  return {kind.toStringRef(), nlohmann::json::parse(meta.toStringRef())};
}

static torch::serialize::InputArchive open_archive(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("checkpoint not found: " + path);
  torch::serialize::InputArchive archive;
  archive.load_from(path);
  return archive;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  auto archive = open_archive(path);
  return read_meta(archive, path);
}

CheckpointMeta load_checkpoint(const std::string& path, torch::nn::Module& module, torch::optim::Optimizer* optimizer) {
  auto archive = open_archive(path);
  auto meta = read_meta(archive, path);
  torch::NoGradGuard guard;
  auto copy_in = [&](const std::string& key, torch::Tensor& target, bool is_buffer) {
    torch::Tensor stored;
    if (!archive.try_read(key, stored, is_buffer)) throw ConfigError("checkpoint " + path + " lacks " + key);
    if (!stored.sizes().equals(target.sizes()))
      throw ConfigError("checkpoint " + path + " has mismatched shape for " + key);
    target.copy_(stored);
  };
  for (auto& p : module.named_parameters()) copy_in("param." + p.key(), p.value(), false);
  for (auto& b : module.named_buffers()) copy_in("buffer." + b.key(), b.value(), true);
  if (optimizer) {
    torch::serialize::InputArchive opt_archive;
    if (!archive.try_read("optimizer", opt_archive)) throw ConfigError("checkpoint " + path + " has no optimizer state");
    optimizer->load(opt_archive);
  }
  return meta;
}

EmbedNet load_embed_net(const std::string& path) {
  auto meta = read_checkpoint_meta(path);
  if (meta.kind != "embed") throw ConfigError("expected an embedding-net checkpoint, got '" + meta.kind + "': " + path);
  auto net = EmbedNet(meta.meta.at("network").get<NetworkConfig>());
  load_checkpoint(path, *net);
  return net;
}

SegNet load_seg_net(const std::string& path) {
  auto meta = read_checkpoint_meta(path);
  if (meta.kind != "seg") throw ConfigError("expected a segmentation-net checkpoint, got '" + meta.kind + "': " + path);
  auto net = SegNet(meta.meta.at("network").get<NetworkConfig>(), meta.meta.value("out_channels", 1));
  load_checkpoint(path, *net);
  return net;
}

}  // namespace ldl
