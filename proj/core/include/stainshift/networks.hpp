#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>

namespace stainshift::networks {

struct GeneratorSpec {
  std::int64_t in_channels = 3;
  std::int64_t out_channels = 3;
  std::int64_t base_width = 32;
  std::int64_t levels = 2;       // stride-2 downsampling stages
  std::int64_t blocks = 3;       // residual blocks at the bottleneck
  void validate() const;
  static GeneratorSpec from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct DiscriminatorSpec {
  std::int64_t in_channels = 3;
  std::int64_t base_width = 32;
  std::int64_t blocks = 3;  // stride-2 stages
  void validate() const;
  static DiscriminatorSpec from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

class ResidualBlockImpl : public torch::nn::Module {
 public:
  explicit ResidualBlockImpl(std::int64_t channels);
  torch::Tensor forward(torch::Tensor x);

 private:
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResidualBlock);

// Residual encoder-decoder translator. Output is sigmoid-bounded to [0,1]
// and shape-preserving; input height/width must be divisible by 2^levels.
class ResnetGeneratorImpl : public torch::nn::Module {
 public:
  explicit ResnetGeneratorImpl(GeneratorSpec spec);
  torch::Tensor forward(torch::Tensor x);
  const GeneratorSpec& spec() const { return spec_; }

 private:
  GeneratorSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(ResnetGenerator);

// PatchGAN-style critic: maps (N,3,H,W) to an unbounded score map of shape
// (N,1,H/2^blocks,W/2^blocks).
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(DiscriminatorSpec spec);
  torch::Tensor forward(torch::Tensor x);
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

// Reinitializes all parameters from an isolated generator seeded with `seed`
// (weights ~ N(0, 0.02), biases zero). Registration order makes this
// deterministic.
void init_parameters(torch::nn::Module& module, std::uint64_t seed);

ResnetGenerator build_generator(const GeneratorSpec& spec, std::uint64_t seed);
PatchDiscriminator build_discriminator(const DiscriminatorSpec& spec,
                                       std::uint64_t seed);

}  // namespace stainshift::networks
