#include "stainshift/networks.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <stdexcept>

namespace stainshift::networks {

void GeneratorSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) {
    throw std::invalid_argument("GeneratorSpec: channels must be positive");
  }
  if (base_width < 8) {
    throw std::invalid_argument("GeneratorSpec: base_width must be >= 8");
  }
  if (levels < 1) {
    throw std::invalid_argument("GeneratorSpec: levels must be >= 1");
  }
  if (blocks < 0) {
    throw std::invalid_argument("GeneratorSpec: blocks must be >= 0");
  }
}

GeneratorSpec GeneratorSpec::from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  s.in_channels = j.value("in_channels", s.in_channels);
  s.out_channels = j.value("out_channels", s.out_channels);
  s.base_width = j.value("base_width", s.base_width);
  s.levels = j.value("levels", s.levels);
  s.blocks = j.value("blocks", s.blocks);
  s.validate();
  return s;
}

nlohmann::ordered_json GeneratorSpec::to_json() const {
  return {{"in_channels", in_channels},
          {"out_channels", out_channels},
          {"base_width", base_width},
          {"levels", levels},
          {"blocks", blocks}};
}

void DiscriminatorSpec::validate() const {
  if (in_channels < 1) {
    throw std::invalid_argument("DiscriminatorSpec: channels must be positive");
  }
  if (base_width < 8) {
    throw std::invalid_argument("DiscriminatorSpec: base_width must be >= 8");
  }
  if (blocks < 1) {
    throw std::invalid_argument("DiscriminatorSpec: blocks must be >= 1");
  }
}

DiscriminatorSpec DiscriminatorSpec::from_json(const nlohmann::json& j) {
  DiscriminatorSpec s;
  s.in_channels = j.value("in_channels", s.in_channels);
  s.base_width = j.value("base_width", s.base_width);
  s.blocks = j.value("blocks", s.blocks);
  s.validate();
  return s;
}

nlohmann::ordered_json DiscriminatorSpec::to_json() const {
  return {{"in_channels", in_channels},
          {"base_width", base_width},
          {"blocks", blocks}};
}

namespace {

torch::nn::InstanceNorm2d make_norm(std::int64_t channels) {
  return torch::nn::InstanceNorm2d(torch::nn::InstanceNorm2dOptions(channels)
                                       .affine(false)
                                       .track_running_stats(false));
}

}  // namespace

ResidualBlockImpl::ResidualBlockImpl(std::int64_t channels) {
  body_ = torch::nn::Sequential(
      torch::nn::ReflectionPad2d(1),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3)),
      make_norm(channels), torch::nn::ReLU(),
      torch::nn::ReflectionPad2d(1),
      torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3)),
      make_norm(channels));
  register_module("body", body_);
}

torch::Tensor ResidualBlockImpl::forward(torch::Tensor x) {
  return x + body_->forward(x);
}

ResnetGeneratorImpl::ResnetGeneratorImpl(GeneratorSpec spec) : spec_(spec) {
  spec_.validate();
  const auto w = spec_.base_width;

  torch::nn::Sequential body;
  body->push_back(torch::nn::ReflectionPad2d(3));
  body->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(spec_.in_channels, w, 7)));
  body->push_back(make_norm(w));
  body->push_back(torch::nn::ReLU());

  std::int64_t ch = w;
  for (std::int64_t l = 0; l < spec_.levels; ++l) {
    body->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(ch, ch * 2, 3).stride(2).padding(1)));
    body->push_back(make_norm(ch * 2));
    body->push_back(torch::nn::ReLU());
    ch *= 2;
  }
  for (std::int64_t b = 0; b < spec_.blocks; ++b) {
    body->push_back(ResidualBlock(ch));
  }
  for (std::int64_t l = 0; l < spec_.levels; ++l) {
    body->push_back(torch::nn::Upsample(
        torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0})
            .mode(torch::kNearest)));
    body->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(ch, ch / 2, 3).padding(1)));
    body->push_back(make_norm(ch / 2));
    body->push_back(torch::nn::ReLU());
    ch /= 2;
  }
  body->push_back(torch::nn::ReflectionPad2d(3));
  body->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(ch, spec_.out_channels, 7)));
  body->push_back(torch::nn::Sigmoid());

  body_ = body;
  register_module("body", body_);
}

torch::Tensor ResnetGeneratorImpl::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw std::invalid_argument("generator: expected (N,C,H,W) input");
  }
  const std::int64_t stride = 1ll << spec_.levels;
  if (x.size(2) % stride != 0 || x.size(3) % stride != 0) {
    throw std::invalid_argument(
        "generator: height/width must be divisible by 2^levels");
  }
  return body_->forward(x);
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(DiscriminatorSpec spec)
    : spec_(spec) {
  spec_.validate();
  const auto w = spec_.base_width;

  torch::nn::Sequential body;
  body->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(spec_.in_channels, w, 4).stride(2).padding(1)));
  body->push_back(torch::nn::LeakyReLU(
      torch::nn::LeakyReLUOptions().negative_slope(0.2)));
  std::int64_t ch = w;
  for (std::int64_t b = 1; b < spec_.blocks; ++b) {
    body->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(ch, ch * 2, 4).stride(2).padding(1)));
    body->push_back(make_norm(ch * 2));
    body->push_back(torch::nn::LeakyReLU(
        torch::nn::LeakyReLUOptions().negative_slope(0.2)));
    ch *= 2;
  }
  body->push_back(torch::nn::Conv2d(
      torch::nn::Conv2dOptions(ch, 1, 3).padding(1)));

  body_ = body;
  register_module("body", body_);
}

torch::Tensor PatchDiscriminatorImpl::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw std::invalid_argument("discriminator: expected (N,C,H,W) input");
  }
  const std::int64_t min_size = 1ll << spec_.blocks;
  if (x.size(2) < min_size || x.size(3) < min_size) {
    throw std::invalid_argument("discriminator: input smaller than 2^blocks");
  }
  return body_->forward(x);
}

void init_parameters(torch::nn::Module& module, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  torch::NoGradGuard no_grad;
  for (auto& p : module.parameters()) {
    if (p.dim() >= 2) {
      p.normal_(0.0, 0.02, gen);
    } else {
      p.zero_();
    }
  }
}

ResnetGenerator build_generator(const GeneratorSpec& spec, std::uint64_t seed) {
  ResnetGenerator g(spec);
  init_parameters(*g, seed);
  return g;
}

PatchDiscriminator build_discriminator(const DiscriminatorSpec& spec,
                                       std::uint64_t seed) {
  PatchDiscriminator d(spec);
  init_parameters(*d, seed);
  return d;
}

}  // namespace stainshift::networks
