#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace stainshift::data {

struct PatchRecord {
  std::string image_path;
  std::optional<std::string> mask_e_path;
  std::optional<std::string> mask_d_path;
};

// Immutable in-memory patch collection for one domain. Images are kept as
// decoded 8-bit tensors; `image()` converts on demand so batch pixel values
// are exactly file value / 255.
class PatchDataset {
 public:
  PatchDataset(std::string root, std::string domain,
               std::vector<PatchRecord> records);

  std::int64_t size() const { return static_cast<std::int64_t>(records_.size()); }
  const std::string& root() const { return root_; }
  const std::string& domain() const { return domain_; }
  std::int64_t height() const { return height_; }
  std::int64_t width() const { return width_; }

  const PatchRecord& record(std::int64_t index) const;
  torch::Tensor image(std::int64_t index) const;  // float32 (3,H,W)
  bool has_labels(std::int64_t index) const;
  torch::Tensor mask_e(std::int64_t index) const;  // float32 (1,H,W), 0/1
  torch::Tensor mask_d(std::int64_t index) const;

  const std::vector<std::int64_t>& labeled_indices() const { return labeled_; }
  const std::vector<std::int64_t>& unlabeled_indices() const { return unlabeled_; }

 private:
  std::string root_;
  std::string domain_;
  std::vector<PatchRecord> records_;
  std::vector<torch::Tensor> images_;  // uint8 (3,H,W)
  std::vector<torch::Tensor> masks_e_;  // float32 (1,H,W) or undefined
  std::vector<torch::Tensor> masks_d_;
  std::vector<std::int64_t> labeled_;
  std::vector<std::int64_t> unlabeled_;
  std::int64_t height_ = 0;
  std::int64_t width_ = 0;
};

// Loads a domain's patches either from a phantom manifest.jsonl or from a
// plain directory of PNGs with `_me.png` / `_md.png` mask sidecars. Ordering
// is lexicographic by image path.
PatchDataset load_dataset(const std::string& manifest_or_dir,
                          const std::string& domain);

struct UnpairedBatch {
  torch::Tensor x_a;  // (N,3,H,W) float32
  torch::Tensor x_b;
  torch::Tensor x_c;
  torch::Tensor labels_present;  // (N) bool
  torch::Tensor mask_e;          // (N,1,H,W) float32, zero where absent
  torch::Tensor mask_d;
};

struct SampleOptions {
  double labeled_fraction = 0.0;  // oversampling target for labeled A items
  bool hflip = false;
  bool vflip = false;
};

// Uniform draw with replacement.
std::int64_t draw_index(const PatchDataset& dataset, std::mt19937_64& rng);

// Domain-A draw with labeled oversampling: with probability labeled_fraction
// pick uniformly among labeled records, otherwise among unlabeled ones.
std::int64_t draw_index_a(const PatchDataset& dataset, std::mt19937_64& rng,
                          double labeled_fraction);

UnpairedBatch sample_batch(const PatchDataset& a, const PatchDataset& b,
                           const PatchDataset& c, std::int64_t batch_size,
                           std::mt19937_64& rng,
                           const SampleOptions& options = {});

}  // namespace stainshift::data
