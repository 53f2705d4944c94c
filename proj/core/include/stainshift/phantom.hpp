#pragma once

// Synthetic scene generator: unpaired duplex-IHC / monoplex-IHC / IF patch
// corpora drawn from one generative model, with held-back paired evaluation
// data, nucleus masks and partial saturated-stain label masks.

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include "stainshift/stain.hpp"

namespace stainshift::phantom {

struct Nucleus {
  double cx = 0.0, cy = 0.0;     // center, px
  double ax = 0.0, ay = 0.0;     // semi-axes, px
  double rotation = 0.0;         // radians
  bool marker_positive = false;
  double intensity = 0.0;        // counterstain concentration
  double marker_intensity = 0.0; // eosin-like concentration, 0 when negative
};

struct Membrane {
  double cx = 0.0, cy = 0.0;
  double ax = 0.0, ay = 0.0;     // ring mid-line semi-axes, px
  double rotation = 0.0;
  double half_width = 1.0;       // px
  double intensity = 0.0;        // DAB concentration
};

struct Scene {
  int height = 0;
  int width = 0;
  double background_haze = 0.0;  // faint counterstain everywhere
  std::vector<Nucleus> nuclei;
  std::vector<Membrane> membranes;
};

enum class DomainStyle { kDuplex, kMonoplex, kIf };
enum class RenderStyle { kBrightfield, kFluorescence };

struct PhantomConfig {
  int patch_size = 64;                   // in [32, 256]
  int nuclei_min = 6;
  int nuclei_max = 12;
  double marker_positive_fraction = 0.5;
  double membrane_fraction = 0.35;
  double noise_level = 0.01;             // train splits only; eval pairs are clean
  std::uint64_t seed = 1;
  int labeled_patches = 200;             // duplex train patches with M_E / M_D masks
  double saturation_fraction = 0.8;      // M_x = concentration > fraction * patch max

  void validate() const;  // throws std::invalid_argument
  static PhantomConfig from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct CorpusCounts {
  int train_a = 0;
  int train_b = 0;
  int train_c = 0;
  int sb_train = 0;  // monoplex patches + nucleus masks for the surrogate model
  int eval = 0;      // paired duplex / ground-truth monoplex / masks

  static CorpusCounts from_json(const nlohmann::json& j);
  nlohmann::ordered_json to_json() const;
};

struct ManifestRecord {
  std::string path;   // relative to the corpus root
  std::string domain; // "A", "B" or "C"
  std::string split;  // "train", "sb" or "eval"
  std::int64_t scene = 0;
  std::string role;   // "image", "mask_e", "mask_d", "mask_nuclei",
                      // "mask_background" or "monoplex_gt"
};

struct CorpusManifest {
  std::vector<ManifestRecord> records;

  std::string to_jsonl() const;
  static CorpusManifest from_jsonl_file(const std::string& path);
};

// Deterministic in (config.seed, index). Throws std::runtime_error when the
// requested nucleus count cannot be packed into the canvas.
Scene generate_scene(const PhantomConfig& config, std::int64_t index);

// (3, H, W) float64 concentration map in (H, E, D) order. The monoplex
// rendering is the restain image of the duplex one under the default
// coefficients, so the duplex and monoplex corpora describe one consistent
// assay pair; the IF rendering shares the duplex concentrations.
torch::Tensor render_stains(const Scene& scene, DomainStyle style);

// Brightfield: rgb = 10^(-concentrations * M) plus clipped Gaussian noise.
// Fluorescence: channels are emission intensities plus noise, dark background.
// Output is (3, H, W) in [0, 1]; noise is deterministic in noise_seed.
torch::Tensor render_rgb(const torch::Tensor& stains,
                         const stain::StainMatrix& m, RenderStyle style,
                         double noise, std::uint64_t noise_seed = 0);

// (H, W) bool masks. Nucleus: soft coverage >= 0.5 for some nucleus.
// Background: zero coverage from every nucleus (membranes stay background).
torch::Tensor nucleus_mask(const Scene& scene);
torch::Tensor background_mask(const Scene& scene);

// M_E / M_D label masks from a duplex concentration image: pixels whose
// channel value exceeds saturation_fraction times the patch channel maximum.
torch::Tensor saturation_mask(const torch::Tensor& duplex_stains, int channel,
                              double saturation_fraction);

// Writes the corpus under out_dir (PNG patches + masks + manifest.jsonl) and
// returns the manifest. Scene index ranges per split are disjoint by
// construction; throws on I/O failure or an empty corpus.
CorpusManifest export_corpus(const PhantomConfig& config,
                             const std::string& out_dir,
                             const CorpusCounts& counts,
                             const stain::StainMatrix& m);

}  // namespace stainshift::phantom
