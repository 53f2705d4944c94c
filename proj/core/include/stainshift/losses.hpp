#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace stainshift::losses {

struct LossWeights {
  double lambda_adv = 1.0;
  double lambda_guidance = 10.0;        // λ0
  double lambda_cycle = 10.0;
  double lambda_stain_guidance = 1.0;
  double lambda_eosin_absence = 1.0;
  double lambda_sup_e = 1.0;
  double lambda_sup_d = 1.0;
  double sup_sign = 1.0;  // sign applied to `as_written` separation terms
  void validate() const;
  static LossWeights from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

enum class SeparationVariant { kPurityComplement, kAsWritten };

inline constexpr double kSeparationEpsilon = 1e-8;

// mean((s - 1)^2) over the fake-score map.
torch::Tensor lsgan_generator_loss(const torch::Tensor& d_fake_scores);

// 0.5*mean((real - 1)^2) + 0.5*mean(fake^2).
torch::Tensor lsgan_discriminator_loss(const torch::Tensor& d_real_scores,
                                       const torch::Tensor& d_fake_scores);

// Mean absolute difference; shared contract for guidance/cycle losses.
torch::Tensor guidance_loss(const torch::Tensor& g_ab_out,
                            const torch::Tensor& f_ab_out);
torch::Tensor cycle_loss(const torch::Tensor& x,
                         const torch::Tensor& x_reconstructed);
torch::Tensor stain_guidance_loss(const torch::Tensor& g_ac_out,
                                  const torch::Tensor& pseudo_if);

// Mean |E| over the synthetic stain image produced from monoplex inputs.
torch::Tensor eosin_absence_loss(const torch::Tensor& g_ac_of_b);

// Per-pixel purity ratio r_c = c_t / (sum_c |c| + eps) over labeled pixels.
// `purity_complement` averages (1 - r_c); `as_written` averages r_c * c_t.
torch::Tensor supervised_separation_loss(const torch::Tensor& g_ac_out,
                                         const torch::Tensor& mask,
                                         int target_channel,
                                         SeparationVariant variant =
                                             SeparationVariant::kPurityComplement);

struct LossReport {
  struct Term {
    std::string name;
    double value = 0.0;
    double weight = 0.0;
  };
  std::vector<Term> terms;
  double total = 0.0;
  nlohmann::ordered_json to_json() const;
};

// Stage rosters: stage 1 requires adversarial/cycle/stain_guidance/
// eosin_absence (sup_e, sup_d optional); stage 2 requires adversarial and
// guidance. Unknown term names are rejected.
LossReport total_generator_loss(const std::map<std::string, double>& terms,
                                const LossWeights& weights, int stage);
std::pair<torch::Tensor, LossReport> total_generator_loss(
    const std::map<std::string, torch::Tensor>& terms,
    const LossWeights& weights, int stage);

}  // namespace stainshift::losses
