#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <memory>
#include <random>
#include <string>

#include "stainshift/data.hpp"
#include "stainshift/losses.hpp"
#include "stainshift/networks.hpp"
#include "stainshift/stain.hpp"

namespace stainshift::trainer {

inline constexpr int kCheckpointVersion = 1;

struct TrainConfig {
  int stage = 1;
  std::int64_t steps = 3000;
  std::int64_t batch_size = 1;
  double lr_generator = 2e-4;
  double lr_discriminator = 2e-4;
  std::string optimizer = "adam";  // "adam" or "sgd"
  losses::LossWeights weights;
  losses::SeparationVariant separation_variant =
      losses::SeparationVariant::kPurityComplement;
  stain::RestainCoefficients alpha = stain::RestainCoefficients::defaults();
  stain::StainMatrix stain_matrix = stain::StainMatrix::default_hed();
  networks::GeneratorSpec generator_spec;
  networks::DiscriminatorSpec discriminator_spec;
  double labeled_fraction = 0.25;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_interval = 1000;
  std::string out_dir = "out";
  bool single_thread = false;

  void validate() const;
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct Stage1State {
  TrainConfig config;
  std::int64_t step = 0;
  networks::ResnetGenerator g_ac{nullptr};
  networks::ResnetGenerator g_ca{nullptr};
  networks::PatchDiscriminator d_a{nullptr};
  networks::PatchDiscriminator d_c{nullptr};
  std::shared_ptr<torch::optim::Optimizer> opt_g;
  std::shared_ptr<torch::optim::Optimizer> opt_d;
  std::mt19937_64 sampler;
};

struct Stage2State {
  TrainConfig config;
  std::int64_t step = 0;
  networks::ResnetGenerator g_ab{nullptr};
  networks::PatchDiscriminator d_b{nullptr};
  networks::ResnetGenerator g_ac{nullptr};  // frozen stage-1 copies
  networks::ResnetGenerator g_ca{nullptr};
  std::shared_ptr<torch::optim::Optimizer> opt_g;
  std::shared_ptr<torch::optim::Optimizer> opt_d;
  std::mt19937_64 sampler;
};

// f_AB = G_CA ∘ κ ∘ G_AC, evaluated without gradient tracking. The transforms
// may be real generators or analytic stand-ins.
torch::Tensor compute_f_ab(const torch::Tensor& x_a,
                           const stain::ImageTransform& g_ac,
                           const stain::ImageTransform& g_ca,
                           const stain::RestainCoefficients& alpha);

Stage1State init_stage1(const TrainConfig& config);
Stage2State init_stage2(const TrainConfig& config, const std::string& stage1_ckpt);

// Checkpoints live at <out_dir>/stage<k>/step_<n>/ and embed a config
// snapshot, the sampler state, and the optimizer state.
std::string save_checkpoint(const Stage1State& state);
std::string save_checkpoint(const Stage2State& state);
Stage1State load_stage1_checkpoint(const std::string& dir);
Stage2State load_stage2_checkpoint(const std::string& dir);

// Runs (or resumes) the stage-1 A<->C training loop. Domain B participates
// only through the eosin-absence term. Appends one JSONL record per step to
// <out_dir>/stage1/train_log.jsonl and returns the final state.
Stage1State train_stage1(const TrainConfig& config, const data::PatchDataset& a,
                         const data::PatchDataset& b, const data::PatchDataset& c,
                         const std::string& resume_ckpt = "");

// Stage 2: trains G_AB against D_B with the guidance target from compute_f_ab;
// stage-1 generators stay frozen.
Stage2State train_stage2(const TrainConfig& config, const data::PatchDataset& a,
                         const data::PatchDataset& b,
                         const std::string& stage1_ckpt,
                         const std::string& resume_ckpt = "");

// Bitwise-stable checksum of all parameters, used to verify freezing.
double parameter_checksum(const torch::nn::Module& module);

}  // namespace stainshift::trainer
