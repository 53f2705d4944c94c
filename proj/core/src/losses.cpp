#include "stainshift/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "stainshift/stain.hpp"

namespace stainshift::losses {

namespace {

void require_finite(const torch::Tensor& t, const char* what) {
  if (t.numel() == 0) {
    throw std::invalid_argument(std::string(what) + ": empty batch");
  }
  if (!t.isfinite().all().item<bool>()) {
    throw std::invalid_argument(std::string(what) + ": non-finite values");
  }
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b,
                        const char* what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
  if (a.numel() == 0) {
    throw std::invalid_argument(std::string(what) + ": empty batch");
  }
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {lambda_adv, lambda_guidance, lambda_cycle,
                   lambda_stain_guidance, lambda_eosin_absence, lambda_sup_e,
                   lambda_sup_d}) {
    if (!std::isfinite(w) || w < 0.0) {
      throw std::invalid_argument("LossWeights: weights must be finite and >= 0");
    }
  }
  if (!std::isfinite(sup_sign)) {
    throw std::invalid_argument("LossWeights: sup_sign must be finite");
  }
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_adv = j.value("lambda_adv", w.lambda_adv);
  w.lambda_guidance = j.value("lambda_guidance", w.lambda_guidance);
  w.lambda_cycle = j.value("lambda_cycle", w.lambda_cycle);
  w.lambda_stain_guidance = j.value("lambda_stain_guidance", w.lambda_stain_guidance);
  w.lambda_eosin_absence = j.value("lambda_eosin_absence", w.lambda_eosin_absence);
  w.lambda_sup_e = j.value("lambda_sup_e", w.lambda_sup_e);
  w.lambda_sup_d = j.value("lambda_sup_d", w.lambda_sup_d);
  w.sup_sign = j.value("sup_sign", w.sup_sign);
  w.validate();
  return w;
}

nlohmann::ordered_json LossWeights::to_json() const {
  return {{"lambda_adv", lambda_adv},
          {"lambda_guidance", lambda_guidance},
          {"lambda_cycle", lambda_cycle},
          {"lambda_stain_guidance", lambda_stain_guidance},
          {"lambda_eosin_absence", lambda_eosin_absence},
          {"lambda_sup_e", lambda_sup_e},
          {"lambda_sup_d", lambda_sup_d},
          {"sup_sign", sup_sign}};
}

torch::Tensor lsgan_generator_loss(const torch::Tensor& d_fake_scores) {
  require_finite(d_fake_scores, "lsgan_generator_loss");
  return (d_fake_scores - 1.0).square().mean();
}

torch::Tensor lsgan_discriminator_loss(const torch::Tensor& d_real_scores,
                                       const torch::Tensor& d_fake_scores) {
  require_finite(d_real_scores, "lsgan_discriminator_loss");
  require_finite(d_fake_scores, "lsgan_discriminator_loss");
  return 0.5 * (d_real_scores - 1.0).square().mean() +
         0.5 * d_fake_scores.square().mean();
}

torch::Tensor guidance_loss(const torch::Tensor& g_ab_out,
                            const torch::Tensor& f_ab_out) {
  require_same_shape(g_ab_out, f_ab_out, "guidance_loss");
  return (g_ab_out - f_ab_out).abs().mean();
}

torch::Tensor cycle_loss(const torch::Tensor& x,
                         const torch::Tensor& x_reconstructed) {
  require_same_shape(x, x_reconstructed, "cycle_loss");
  return (x - x_reconstructed).abs().mean();
}

torch::Tensor stain_guidance_loss(const torch::Tensor& g_ac_out,
                                  const torch::Tensor& pseudo_if) {
  require_same_shape(g_ac_out, pseudo_if, "stain_guidance_loss");
  return (g_ac_out - pseudo_if).abs().mean();
}

torch::Tensor eosin_absence_loss(const torch::Tensor& g_ac_of_b) {
  if (g_ac_of_b.dim() < 3 || g_ac_of_b.size(-3) != 3) {
    throw std::invalid_argument("eosin_absence_loss: expected (...,3,H,W)");
  }
  return g_ac_of_b.select(-3, stain::kChannelE).abs().mean();
}

torch::Tensor supervised_separation_loss(const torch::Tensor& g_ac_out,
                                         const torch::Tensor& mask,
                                         int target_channel,
                                         SeparationVariant variant) {
  if (g_ac_out.dim() < 3 || g_ac_out.size(-3) != 3) {
    throw std::invalid_argument("supervised_separation_loss: expected (...,3,H,W)");
  }
  if (target_channel != stain::kChannelE && target_channel != stain::kChannelD) {
    throw std::invalid_argument("supervised_separation_loss: target must be E or D");
  }
  auto m = mask.to(g_ac_out.dtype());
  while (m.dim() > g_ac_out.dim() - 1 && m.size(m.dim() - 3) == 1) {
    m = m.squeeze(m.dim() - 3);  // drop a singleton channel axis
  }
  const double count = m.sum().item<double>();
  if (count <= 0.0) {
    throw std::invalid_argument("supervised_separation_loss: empty mask");
  }

  auto target = g_ac_out.select(-3, target_channel);
  auto denom = g_ac_out.abs().sum(-3) + kSeparationEpsilon;
  auto ratio = target / denom;
  auto per_pixel = variant == SeparationVariant::kPurityComplement
                       ? (1.0 - ratio)
                       : ratio * target;
  return (per_pixel * m).sum() / count;
}

namespace {

struct TermSpec {
  const char* name;
  double weight;
  bool required;
};

std::vector<TermSpec> roster_for(const LossWeights& w, int stage) {
  w.validate();
  if (stage == 1) {
    return {{"adversarial", w.lambda_adv, true},
            {"cycle", w.lambda_cycle, true},
            {"stain_guidance", w.lambda_stain_guidance, true},
            {"eosin_absence", w.lambda_eosin_absence, true},
            {"sup_e", w.lambda_sup_e * w.sup_sign, false},
            {"sup_d", w.lambda_sup_d * w.sup_sign, false}};
  }
  if (stage == 2) {
    return {{"adversarial", w.lambda_adv, true},
            {"guidance", w.lambda_guidance, true}};
  }
  throw std::invalid_argument("total_generator_loss: stage must be 1 or 2");
}

template <typename Map, typename Scalar>
std::pair<Scalar, LossReport> accumulate_total(const Map& terms,
                                               const LossWeights& weights,
                                               int stage, Scalar zero,
                                               double (*to_double)(const Scalar&)) {
  const auto roster = roster_for(weights, stage);
  for (const auto& [name, value] : terms) {
    bool known = false;
    for (const auto& spec : roster) known |= name == spec.name;
    if (!known) {
      throw std::invalid_argument("total_generator_loss: unknown term '" + name +
                                  "' for stage " + std::to_string(stage));
    }
    (void)value;
  }

  LossReport report;
  Scalar total = zero;
  for (const auto& spec : roster) {
    auto it = terms.find(spec.name);
    if (it == terms.end()) {
      if (spec.required) {
        throw std::invalid_argument(std::string("total_generator_loss: missing "
                                                "required term '") +
                                    spec.name + "'");
      }
      continue;
    }
    total = total + spec.weight * it->second;
    report.terms.push_back({spec.name, to_double(it->second), spec.weight});
  }
  report.total = to_double(total);
  return {std::move(total), std::move(report)};
}

double identity_double(const double& v) { return v; }
double tensor_to_double(const torch::Tensor& t) { return t.item<double>(); }

}  // namespace

nlohmann::ordered_json LossReport::to_json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json named;
  for (const auto& t : terms) {
    named[t.name] = {{"value", t.value}, {"weight", t.weight}};
  }
  j["terms"] = named;
  j["total"] = total;
  return j;
}

LossReport total_generator_loss(const std::map<std::string, double>& terms,
                                const LossWeights& weights, int stage) {
  return accumulate_total(terms, weights, stage, 0.0, identity_double).second;
}

std::pair<torch::Tensor, LossReport> total_generator_loss(
    const std::map<std::string, torch::Tensor>& terms, const LossWeights& weights,
    int stage) {
  torch::Tensor zero = torch::zeros({}, torch::kFloat64);
  if (!terms.empty()) {
    zero = torch::zeros({}, terms.begin()->second.options());
  }
  return accumulate_total(terms, weights, stage, zero, tensor_to_double);
}

}  // namespace stainshift::losses
