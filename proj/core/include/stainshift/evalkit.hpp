#pragma once

// Downstream evaluation: a surrogate monoplex-trained nucleus-posterior model,
// exact rank-based AUC over annotated pixels, cumulative posterior histograms
// and per-method 1-AUC / harmonic-mean comparison reports.

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace stainshift::evalkit {

inline constexpr int kPosteriorModelVersion = 1;

// Small convolutional pixel classifier standing in for a monoplex-trained
// segmentation model: maps (N,3,H,W) images to (N,1,H,W) nucleus posteriors.
class PosteriorModelImpl : public torch::nn::Module {
 public:
  explicit PosteriorModelImpl(std::int64_t width);
  torch::Tensor forward(torch::Tensor x);
  std::int64_t width() const { return width_; }

 private:
  std::int64_t width_ = 0;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PosteriorModel);

struct SurrogateConfig {
  std::int64_t width = 16;
  std::int64_t steps = 600;
  std::int64_t batch_size = 2;
  double lr = 1e-2;
  std::uint64_t seed = 1;

  void validate() const;
  static SurrogateConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct SbExample {
  torch::Tensor image;        // (3,H,W) float32 in [0,1]
  torch::Tensor mask_nuclei;  // (1,H,W) float32, 0/1
};

// Reads the "sb" split (monoplex patches + nucleus masks) from a phantom
// manifest.jsonl, ordered by scene id.
std::vector<SbExample> load_sb_split(const std::string& manifest_path);

// Per-pixel binary cross-entropy against the nucleus mask with Adam;
// deterministic in config.seed. Throws on an empty dataset.
PosteriorModel train_surrogate_sb(const std::vector<SbExample>& examples,
                                  const SurrogateConfig& config);

// Posterior of `model` on one (3,H,W) patch, no gradients: (1,H,W) in [0,1].
torch::Tensor posterior_map(const PosteriorModel& model,
                            const torch::Tensor& image);

void save_posterior_model(const PosteriorModel& model,
                          const SurrogateConfig& config,
                          const std::string& dir);
PosteriorModel load_posterior_model(const std::string& dir);

// AUC = P(pos > neg) + 0.5 P(pos = neg) over all pairs, computed exactly from
// the sorted score lists. Throws on empty or non-finite inputs.
double auc_from_scores(const std::vector<double>& pos,
                       const std::vector<double>& neg);

struct CumulativeCurve {
  std::vector<double> edges;       // (i+1)/n_bins for i = 0..n_bins-1
  std::vector<double> cumulative;  // fraction of scores <= edge

  nlohmann::ordered_json to_json() const;
  static CumulativeCurve from_json(const nlohmann::json& j);
};

// Scores must lie in [0,1]; n_bins >= 2. The curve is non-decreasing and the
// final value is exactly 1.
CumulativeCurve cumulative_histogram(const std::vector<double>& scores,
                                     int n_bins);

// 2ab / (a + b). Throws on non-positive or non-finite input.
double harmonic_mean(double a, double b);

struct EvalItem {
  torch::Tensor duplex;           // (3,H,W) float32 in [0,1]
  torch::Tensor monoplex_gt;      // (3,H,W)
  torch::Tensor mask_nuclei;      // (1,H,W) float32, 0/1
  torch::Tensor mask_background;  // (1,H,W)
};

// Reads the paired "eval" split from a phantom manifest.jsonl, ordered by
// scene id. Throws when a scene lacks any of the four roles.
std::vector<EvalItem> load_eval_split(const std::string& manifest_path);

// Duplex patch -> predicted monoplex patch. The item carries the ground-truth
// pair so the `oracle` method can simply return it.
using MethodFn = std::function<torch::Tensor(const EvalItem&)>;

struct MethodMetrics {
  double nucleus_one_minus_auc = 0.0;     // nucleus pixels vs background, 1-AUC
  double background_one_minus_auc = 0.0;  // same with complement posteriors
  double harmonic_mean = 0.0;
  CumulativeCurve nucleus_curve;     // posterior at nucleus pixels
  CumulativeCurve background_curve;  // 1 - posterior at background pixels

  nlohmann::ordered_json to_json() const;
};

struct MetricsReport {
  int histogram_bins = 0;
  std::map<std::string, MethodMetrics> methods;

  nlohmann::ordered_json to_json() const;
};

struct EvaluateOptions {
  int histogram_bins = 20;
};

// For each method: posterior = sb(method(duplex)); nucleus scores are the
// posteriors at nucleus-mask pixels (background pixels as negatives) and the
// background panel repeats the ranking with 1 - posterior as the score. The
// harmonic mean combines the two panel 1-AUC values (floored at a tiny
// positive so perfect separation stays in-domain). The `identity` baseline
// entry is mandatory; throws on mask/patch misalignment.
MetricsReport evaluate_methods(const std::vector<EvalItem>& items,
                               const std::map<std::string, MethodFn>& methods,
                               const PosteriorModel& sb,
                               const EvaluateOptions& options = {});

}  // namespace stainshift::evalkit
