#pragma once

// Closed-form stain math shared by the phantom renderer, the training
// pipeline and the evaluation baselines: optical-density transforms,
// stain-matrix (de)convolution and the channel-remapping restain operator.
//
// Image tensors are torch CPU tensors of shape (..., 3, H, W). The channel
// axis is always the third-from-last dimension and is ordered (H, E, D):
// hematoxylin-like counterstain, eosin-like purple marker, DAB.

#include <array>
#include <functional>
#include <string>

#include <torch/torch.h>

namespace stainshift::stain {

inline constexpr int kChannelH = 0;
inline constexpr int kChannelE = 1;
inline constexpr int kChannelD = 2;

inline constexpr double kDefaultOdEpsilon = 1e-6;

/// 3x3 matrix of optical-density color vectors, one unit-norm row per stain
/// in (H, E, D) order.
class StainMatrix {
 public:
  // Rows are normalized to unit Euclidean norm; throws std::invalid_argument
  // if a row is near zero, any entry is non-finite, or the matrix is
  // numerically singular (condition number >= 1e6).
  explicit StainMatrix(const std::array<std::array<double, 3>, 3>& rows);

  // Classical brightfield H/E/DAB absorption colors. The phantom generator
  // and the deconvolution baselines share this one ground-truth matrix.
  static StainMatrix default_hed();

  // 3x3 numeric block, e.g. {"rows": [[..],[..],[..]]} or a bare 3x3 array.
  static StainMatrix from_json(const std::string& json_text);
  // Three whitespace-separated numbers per line, three lines.
  static StainMatrix from_text_file(const std::string& path);

  const std::array<std::array<double, 3>, 3>& rows() const { return rows_; }
  double condition_number() const { return condition_; }

  // Row-major (3,3) tensor in the requested dtype.
  torch::Tensor tensor(torch::Dtype dtype = torch::kFloat32) const;
  // Inverse, precomputed in double precision.
  torch::Tensor inverse_tensor(torch::Dtype dtype = torch::kFloat32) const;

  std::string to_json() const;

 private:
  std::array<std::array<double, 3>, 3> rows_{};
  std::array<std::array<double, 3>, 3> inverse_{};
  double condition_ = 0.0;
};

/// Coefficients of the restain operator: alpha[out][in] mixes input stain
/// channels into output stain channels, both in (H, E, D) order.
struct RestainCoefficients {
  std::array<std::array<double, 3>, 3> alpha{};

  // alpha_hh = 1, alpha_eh = 0.5, alpha_dd = 1, everything else 0: deletes
  // the eosin-like marker and folds half of it into the counterstain.
  static RestainCoefficients defaults();
  static RestainCoefficients identity();
  static RestainCoefficients from_json(const std::string& json_text);

  torch::Tensor tensor(torch::Dtype dtype = torch::kFloat32) const;
  std::string to_json() const;
  void validate() const;  // throws on non-finite entries
};

// od = -log10((rgb + epsilon) / (1 + epsilon)), elementwise. Input must be
// finite and in [0, 1]; epsilon in (0, 1e-2]. Output is >= 0 and bounded by
// -log10(epsilon / (1 + epsilon)).
torch::Tensor rgb_to_od(const torch::Tensor& rgb,
                        double epsilon = kDefaultOdEpsilon);

// Inverse of the Beer-Lambert map without the epsilon shift:
// rgb = 10^(-od), clamped to [0, 1].
torch::Tensor od_to_rgb(const torch::Tensor& od);

// Per pixel solves od_row = conc_row * M for the concentration row vector;
// negative solutions are clamped to 0.
torch::Tensor od_to_concentrations(const torch::Tensor& od,
                                   const StainMatrix& m);

// od_row = conc_row * M.
torch::Tensor concentrations_to_od(const torch::Tensor& concentrations,
                                   const StainMatrix& m);

// out[c] = sum_k alpha[c][k] * in[k] per pixel, clamped at 0.
torch::Tensor restain(const torch::Tensor& concentrations,
                      const RestainCoefficients& alpha);

using ImageTransform = std::function<torch::Tensor(const torch::Tensor&)>;

// Classical-deconvolution pseudo-IF: clamp01(od_to_concentrations(rgb_to_od)).
// Used both as the stain-guidance target and as the analytic stand-in for
// the learned brightfield-to-IF generator.
ImageTransform pseudo_if_transform(const StainMatrix& m,
                                   double epsilon = kDefaultOdEpsilon);

// Analytic stand-in for the IF-to-brightfield generator:
// clamp01(10^(-concentrations * M)).
ImageTransform brightfield_reconstruction_transform(const StainMatrix& m);

}  // namespace stainshift::stain
